//! Graph data model, dataset ingestion and adjacency normalization.

mod io;
mod sparse;
mod split;
mod synthetic;

use std::collections::BTreeSet;

pub use io::{load_graph, load_tsv, save_graph, save_json, GraphFile, GraphFormat};
pub use sparse::{aggregate, normalize_adjacency, CsrMatrix, NormalizedAdjacency};
pub use split::carve_validation;
pub use synthetic::{make_synthetic, BlockSpec, SyntheticGraph, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which node subset a mask selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An undirected attributed graph with node-classification splits.
///
/// Unknown labels are `None`; they can never be used as a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    features: Tensor,
    labels: Vec<Option<usize>>,
    edges: Vec<(usize, usize)>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

impl Graph {
    /// Validates the parts and canonicalizes the edge list.
    ///
    /// Edges are symmetrized to `(min, max)`, deduplicated and sorted; self-loops
    /// are dropped since normalization adds them back uniformly.
    pub fn new(
        features: Tensor,
        labels: Vec<Option<usize>>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = features.rows();
        for (name, len) in [
            ("labels", labels.len()),
            ("train_mask", train_mask.len()),
            ("val_mask", val_mask.len()),
            ("test_mask", test_mask.len()),
        ] {
            if len != n {
                return Err(Error::Validation(format!("{name} has length {len}, expected {n}")));
            }
        }
        let mut canon = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u != v {
                canon.insert((u.min(v), u.max(v)));
            }
        }
        for i in 0..n {
            let count = train_mask[i] as u8 + val_mask[i] as u8 + test_mask[i] as u8;
            if count > 1 {
                return Err(Error::Validation(format!("node {i} belongs to more than one mask")));
            }
            if (train_mask[i] || val_mask[i]) && labels[i].is_none() {
                return Err(Error::Validation(format!("train/val node {i} has no label")));
            }
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain non-finite values".into()));
        }
        Ok(Graph {
            features,
            labels,
            edges: canon.into_iter().collect(),
            train_mask,
            val_mask,
            test_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// One more than the largest known label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train_mask,
            Split::Val => &self.val_mask,
            Split::Test => &self.test_mask,
        }
    }

    /// Indices of the nodes selected by `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        mask_to_indices(self.mask(split))
    }

    /// Replaces the three masks, re-running validation.
    pub fn with_masks(&self, train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<Graph> {
        Graph::new(
            self.features.clone(),
            self.labels.clone(),
            self.edges.iter().copied(),
            train,
            val,
            test,
        )
    }

    /// Adjacency lists, sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }
}

pub(crate) fn mask_to_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Tensor {
        Tensor::zeros(n, 2)
    }

    #[test]
    fn edges_are_canonicalized() {
        let g = Graph::new(
            feats(3),
            vec![Some(0); 3],
            [(1, 0), (0, 1), (2, 1), (2, 2)],
            vec![false; 3],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn overlapping_masks_rejected() {
        let err = Graph::new(
            feats(2),
            vec![Some(0), Some(1)],
            [],
            vec![true, false],
            vec![false, false],
            vec![true, false],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn unlabeled_train_node_rejected() {
        let err = Graph::new(feats(1), vec![None], [], vec![true], vec![false], vec![false]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = Graph::new(
            feats(2),
            vec![None; 2],
            [(0, 2)],
            vec![false; 2],
            vec![false; 2],
            vec![false; 2],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
