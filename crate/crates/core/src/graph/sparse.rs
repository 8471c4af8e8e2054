use std::sync::Arc;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::dim(
                "CsrMatrix::from_triplets",
                format!("{rows}x{cols}"),
                format!("entry ({r}, {c})"),
            ));
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                t.set(r, c, v);
            }
        }
        t
    }

    /// Sparse × dense product, parallel over output rows.
    pub fn spmm(&self, h: &Tensor) -> Result<Tensor> {
        if h.rows() != self.cols {
            return Err(Error::dim(
                "spmm",
                format!("{} rows", self.cols),
                format!("{} rows", h.rows()),
            ));
        }
        let d = h.cols();
        let mut out = Tensor::zeros(self.rows, d);
        if d == 0 {
            return Ok(out);
        }
        let kernel = |(r, out_row): (usize, &mut [f64])| {
            let (idx, vals) = self.row(r);
            for (&c, &w) in idx.iter().zip(vals) {
                for (o, &x) in out_row.iter_mut().zip(h.row(c)) {
                    *o += w * x;
                }
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            if self.nnz() * d > 1 << 15 {
                out.data_mut().par_chunks_mut(d).enumerate().for_each(kernel);
                return Ok(out);
            }
        }
        out.data_mut().chunks_mut(d).enumerate().for_each(kernel);
        Ok(out)
    }

    /// `selfᵀ · g`, by scattering rows.
    pub fn spmm_transpose(&self, g: &Tensor) -> Result<Tensor> {
        if g.rows() != self.rows {
            return Err(Error::dim(
                "spmm_transpose",
                format!("{} rows", self.rows),
                format!("{} rows", g.rows()),
            ));
        }
        let d = g.cols();
        let mut out = Tensor::zeros(self.cols, d);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let src = g.row(r);
            for (&c, &w) in idx.iter().zip(vals) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }
}

/// Symmetrically normalized adjacency `D^{-1/2}(A+I)D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn shared(&self) -> Arc<CsrMatrix> {
        Arc::clone(&self.matrix)
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }

    /// Wraps a precomputed matrix; used for tests and hand-built operators.
    pub fn from_matrix(matrix: CsrMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::dim(
                "NormalizedAdjacency",
                "square matrix",
                format!("{}x{}", matrix.rows(), matrix.cols()),
            ));
        }
        Ok(NormalizedAdjacency {
            matrix: Arc::new(matrix),
        })
    }
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let mut degree = vec![1.0f64; n];
    for &(u, v) in g.edges() {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * g.edges().len());
    for (i, d) in degree.iter().enumerate() {
        triplets.push((i, i, 1.0 / d));
    }
    for &(u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    let matrix = CsrMatrix::from_triplets(n, n, triplets).expect("edge endpoints validated by Graph");
    NormalizedAdjacency {
        matrix: Arc::new(matrix),
    }
}

/// One neighborhood aggregation: `out[n] = Σ_u Â(n,u)·h[u]`.
pub fn aggregate(adj: &NormalizedAdjacency, h: &Tensor) -> Result<Tensor> {
    adj.matrix.spmm(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::new(
            Tensor::zeros(3, 1),
            vec![None; 3],
            [(0, 1), (1, 2)],
            vec![false; 3],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap()
    }

    #[test]
    fn single_node_is_identity() {
        let g = Graph::new(
            Tensor::zeros(1, 1),
            vec![None],
            [],
            vec![false],
            vec![false],
            vec![false],
        )
        .unwrap();
        let a = normalize_adjacency(&g);
        assert_eq!(a.matrix().to_dense().data(), &[1.0]);
    }

    #[test]
    fn two_nodes_all_half() {
        let g = Graph::new(
            Tensor::zeros(2, 1),
            vec![None; 2],
            [(0, 1)],
            vec![false; 2],
            vec![false; 2],
            vec![false; 2],
        )
        .unwrap();
        let a = normalize_adjacency(&g).matrix().to_dense();
        for &v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_entries() {
        let a = normalize_adjacency(&path3());
        let m = a.matrix();
        assert!((m.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((m.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let g = Graph::new(
            Tensor::zeros(2, 1),
            vec![None; 2],
            [(0, 1)],
            vec![false; 2],
            vec![false; 2],
            vec![false; 2],
        )
        .unwrap();
        let a = normalize_adjacency(&g);
        let out = aggregate(&a, &Tensor::identity(2)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(matches!(
            aggregate(&a, &Tensor::zeros(3, 2)),
            Err(Error::Dimension { .. })
        ));

        let isolated = Graph::new(
            Tensor::zeros(3, 1),
            vec![None; 3],
            [],
            vec![false; 3],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap();
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(aggregate(&normalize_adjacency(&isolated), &h).unwrap(), h);
    }

    #[test]
    fn transpose_product_matches_dense() {
        let a = normalize_adjacency(&path3());
        let g = Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]).unwrap();
        let dense = a.matrix().to_dense().t_matmul(&g).unwrap();
        let sparse = a.matrix().spmm_transpose(&g).unwrap();
        for (x, y) in dense.data().iter().zip(sparse.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
