//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each operation's output value together with the handles
//! of its inputs. Nodes are appended in execution order, so a reverse sweep
//! visits every node after all of its consumers. A tape supports exactly one
//! backward pass.

use std::sync::Arc;

use rand::Rng;

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Aggregate(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    ClampMin(Var, f64),
    RowLogSoftmax(Var),
    RowLogSumExp(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    CumsumColsExclusive(Var),
    Sum(Var),
    Mean(Var),
    Nll(Var, Vec<usize>, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    stochastic: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once a train-mode dropout with a nonzero rate has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_raw(store.value(id).clone(), Op::Param(id), true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Sparse neighborhood aggregation `Â · h`.
    pub fn aggregate(&mut self, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let out = adj.spmm(self.value(h))?;
        self.push("aggregate", out, Op::Aggregate(Arc::clone(adj), h), &[h])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × C` row vector to every row of an `N × C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "add_row",
                format!("(1, {c})"),
                format!("{:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("pointwise_mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// `log σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(log_sigmoid);
        self.push("log_sigmoid", out, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// `max(x, floor)` elementwise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", out, Op::ClampMin(a, floor), &[a])
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = crate::tensor::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("row_log_softmax", out, Op::RowLogSoftmax(a), &[a])
    }

    /// Row-wise log-sum-exp, giving an `N × 1` column.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::column(x.iter_rows().map(crate::tensor::log_sum_exp).collect());
        self.push("row_logsumexp", out, Op::RowLogSumExp(a), &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`; identity when `train` is false.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0,1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
            .collect();
        let x = self.value(a);
        let out = Tensor::new(
            x.rows(),
            x.cols(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        self.push("dropout", out, Op::Dropout(a, mask), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::dim("gather_rows", format!("row < {}", x.rows()), bad));
        }
        let mut out = Tensor::zeros(rows.len(), x.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(r));
        }
        self.push("gather_rows", out, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Selects entry `cols[r]` of each row `r`, giving an `N × 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if cols.len() != x.rows() {
            return Err(Error::dim("pick_cols", x.rows(), cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= x.cols()) {
            return Err(Error::dim("pick_cols", format!("column < {}", x.cols()), bad));
        }
        let out = Tensor::column(cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect());
        self.push("pick_cols", out, Op::PickCols(a, cols.to_vec()), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "at least one input", 0));
        };
        let n = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(Error::dim("concat_cols", format!("{n} rows"), r));
            }
            total += c;
        }
        let mut out = Tensor::zeros(n, total);
        for r in 0..n {
            let mut pos = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[pos..pos + src.len()].copy_from_slice(src);
                pos += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `out[:, j] = Σ_{i<j} x[:, i]`
    pub fn cumsum_cols_exclusive(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let mut acc = 0.0;
            for c in 0..x.cols() {
                out.set(r, c, acc);
                acc += x.get(r, c);
            }
        }
        self.push("cumsum_cols_exclusive", out, Op::CumsumColsExclusive(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Numeric("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("reduce_mean", out, Op::Mean(a), &[a])
    }

    /// Mean negative log-likelihood of `labels[i]` in row `rows[i]` of a log-probability matrix.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[Option<usize>], mask: &[bool]) -> Result<Var> {
        let x = self.value(log_probs);
        if labels.len() != x.rows() || mask.len() != x.rows() {
            return Err(Error::dim(
                "nll_loss",
                x.rows(),
                format!("{} labels / {} mask", labels.len(), mask.len()),
            ));
        }
        let mut rows = Vec::new();
        let mut cls = Vec::new();
        for (r, (&m, l)) in mask.iter().zip(labels).enumerate() {
            if m {
                let c = l.ok_or_else(|| Error::Contract(format!("nll_loss: masked row {r} has no label")))?;
                if c >= x.cols() {
                    return Err(Error::dim("nll_loss", format!("label < {}", x.cols()), c));
                }
                rows.push(r);
                cls.push(c);
            }
        }
        if rows.is_empty() {
            return Err(Error::Numeric("nll_loss: mask selects no rows".into()));
        }
        let total: f64 = rows.iter().zip(&cls).map(|(&r, &c)| x.get(r, c)).sum();
        let out = Tensor::scalar(-total / rows.len() as f64);
        self.push("nll_loss", out, Op::Nll(log_probs, rows, cls), &[log_probs])
    }

    /// Accumulates `∂loss/∂p` into every parameter reachable from `loss`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on one tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let out = &node.value;
            let mut send = |v: Var, contribution: Tensor| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_scaled(&contribution, 1.0),
                    slot @ None => {
                        *slot = Some(contribution);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    store.grad_mut(*id).add_scaled(&g, 1.0)?;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        send(*a, g.matmul_t(bv)?)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        send(*b, av.t_matmul(&g)?)?;
                    }
                }
                Op::Aggregate(adj, h) => send(*h, adj.spmm_transpose(&g)?)?,
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::AddRow(a, row) => {
                    let mut col_sums = Tensor::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (s, v) in col_sums.data_mut().iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    send(*a, g)?;
                    send(*row, col_sums)?;
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x))?;
                    send(*a, g)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, g.zip_map(bv, |x, y| x * y)?)?;
                    send(*b, g.zip_map(av, |x, y| x * y)?)?;
                }
                Op::Scale(a, c) => send(*a, g.map(|x| c * x))?,
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)?;
                }
                Op::Sigmoid(a) => send(*a, g.zip_map(out, |gv, s| gv * s * (1.0 - s))?)?,
                Op::LogSigmoid(a) => {
                    let x = &self.nodes[a.0].value;
                    send(*a, g.zip_map(x, |gv, xv| gv * sigmoid(-xv))?)?;
                }
                Op::Exp(a) => send(*a, g.zip_map(out, |gv, e| gv * e)?)?,
                Op::ClampMin(a, floor) => {
                    let x = &self.nodes[a.0].value;
                    send(*a, g.zip_map(x, |gv, xv| if xv > *floor { gv } else { 0.0 })?)?;
                }
                Op::RowLogSoftmax(a) => {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for (d, &lp) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
                            *d -= lp.exp() * gsum;
                        }
                    }
                    send(*a, dx)?;
                }
                Op::RowLogSumExp(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut dx = x.clone();
                    for r in 0..dx.rows() {
                        let lse = out.get(r, 0);
                        let gr = g.get(r, 0);
                        for v in dx.row_mut(r) {
                            *v = gr * (*v - lse).exp();
                        }
                    }
                    send(*a, dx)?;
                }
                Op::Dropout(a, mask) => {
                    let dx = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    )?;
                    send(*a, dx)?;
                }
                Op::GatherRows(a, rows) => {
                    let src = &self.nodes[a.0].value;
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    send(*a, dx)?;
                }
                Op::PickCols(a, cols) => {
                    let src = &self.nodes[a.0].value;
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        dx.set(r, c, g.get(r, 0));
                    }
                    send(*a, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut pos = 0;
                    for &p in parts {
                        let (rows, cols) = self.nodes[p.0].value.shape();
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            dx.row_mut(r).copy_from_slice(&g.row(r)[pos..pos + cols]);
                        }
                        pos += cols;
                        send(p, dx)?;
                    }
                }
                Op::CumsumColsExclusive(a) => {
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let mut acc = 0.0;
                        for c in (0..g.cols()).rev() {
                            dx.set(r, c, acc);
                            acc += g.get(r, c);
                        }
                    }
                    send(*a, dx)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    send(*a, Tensor::filled(r, c, g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    send(*a, Tensor::filled(r, c, g.data()[0] / (r * c) as f64))?;
                }
                Op::Nll(a, rows, cls) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut dx = Tensor::zeros(r, c);
                    let w = -g.data()[0] / rows.len() as f64;
                    for (&row, &col) in rows.iter().zip(cls) {
                        dx.set(row, col, dx.get(row, col) + w);
                    }
                    send(*a, dx)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, store: &mut ParamStore, rows: &[Vec<f64>]) -> (Var, ParamId) {
        let id = store.add("w", Tensor::from_rows(rows).unwrap());
        (tape.param(store, id), id)
    }

    #[test]
    fn relu_forward_and_adjoint() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (x, id) = var(&mut tape, &mut store, &[vec![-1.0, 2.0]]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[0.0, 1.0]);
    }

    #[test]
    fn log_softmax_of_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        let y = tape.row_log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn nll_example() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::from_rows(&[vec![0.8f64.ln(), 0.2f64.ln()]]).unwrap());
        let l = tape.nll_loss(lp, &[Some(0)], &[true]).unwrap();
        assert!((tape.scalar(l) - 0.22314355131420976).abs() < 1e-12);
        assert!(matches!(
            tape.nll_loss(lp, &[Some(0)], &[false]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (w, id) = var(&mut tape, &mut store, &[vec![1.0, -3.0, 2.0], vec![0.5, 0.0, 9.0]]);
        let s = tape.sum(w).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn least_squares_closed_form() {
        // loss = mean((W x − y)²) over the 2 outputs; dL/dW = 2 (Wx − y) xᵀ / 2
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (w, id) = var(&mut tape, &mut store, &[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let x = tape.constant(Tensor::column(vec![0.3, -0.7]));
        let y = tape.constant(Tensor::column(vec![1.0, 2.0]));
        let wx = tape.matmul(w, x).unwrap();
        let r = tape.sub(wx, y).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let resid = [1.0 * 0.3 + 2.0 * -0.7 - 1.0, -1.0 * 0.3 + 0.5 * -0.7 - 2.0];
        let xs = [0.3, -0.7];
        for i in 0..2 {
            for j in 0..2 {
                let expected = 2.0 * resid[i] * xs[j] / 2.0;
                assert!((store.grad(id).get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_contracts() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (w, _) = var(&mut tape, &mut store, &[vec![1.0, 2.0]]);
        assert!(matches!(tape.backward(w, &mut store), Err(Error::Contract(_))));
        let s = tape.sum(w).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(matches!(tape.backward(s, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(3, 3));
        let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(x, y);
        assert!(!tape.is_stochastic());
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_adjoint_is_its_mask() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (w, id) = var(&mut tape, &mut store, &[vec![1.0; 8], vec![1.0; 8]]);
        let y = tape.dropout(w, 0.25, &mut rng, true).unwrap();
        let mask = tape.value(y).clone();
        assert!(mask.data().iter().all(|&m| m == 0.0 || (m - 4.0 / 3.0).abs() < 1e-15));
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id), &mask);
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
