//! Variational distributions over propagation depth.
//!
//! Two parameterizations share the per-depth scores `s_{k,n} = w_kᵀ H_{k,n} (+ b_k)`:
//!
//! * select (L2S): `q(t_n = k) = softmax_k(s_{k,n})`
//! * quit (L2Q): gates `α_{k,n} = σ(s_{k,n})` for `k < K`, turned into a categorical by
//!   stick-breaking: `q(k) = α_k ∏_{j<k}(1 − α_j)` and `q(K) = ∏_{j<K}(1 − α_j)`.
//!
//! On the tape both heads produce `log q` directly. The quit head works in log
//! space as `log α_k + Σ_{j<k} log(1 − α_j)`, which stays finite where the
//! product form would underflow.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::backbone::LayerStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    L2s,
    L2q,
}

/// Row-stochastic `N × (K+1)` matrix; row `n` is `q(t_n = ·)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationPosterior {
    probs: Tensor,
}

impl PropagationPosterior {
    pub fn new(probs: Tensor) -> Result<Self> {
        for (r, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Numeric(format!("posterior row {r} has an entry outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("posterior row {r} sums to {s}")));
            }
        }
        if probs.cols() == 0 {
            return Err(Error::dim("PropagationPosterior", "at least one depth", 0));
        }
        Ok(PropagationPosterior { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn depth(&self) -> usize {
        self.probs.cols() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.probs.rows()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.probs.row(n)
    }

    pub fn select_rows(&self, rows: &[usize]) -> PropagationPosterior {
        let mut t = Tensor::zeros(rows.len(), self.probs.cols());
        for (i, &r) in rows.iter().enumerate() {
            t.row_mut(i).copy_from_slice(self.probs.row(r));
        }
        PropagationPosterior { probs: t }
    }

    /// Element-wise `ln max(q, 1e-12)`.
    pub fn log_probs(&self) -> Tensor {
        self.probs.map(|p| p.max(PROB_FLOOR).ln())
    }
}

/// Quit gates `α_{k,n}`, an `N × K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuitProbabilities {
    probs: Tensor,
}

impl QuitProbabilities {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.data().iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Numeric("quit probabilities must lie in [0,1]".into()));
        }
        Ok(QuitProbabilities { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// A relaxed one-hot depth selection per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSelection {
    pub probs: Tensor,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prior {
    Uniform,
    /// Mass proportional to `ratio^k`.
    Geometric {
        ratio: f64,
    },
}

impl Prior {
    pub fn build(&self, depth: usize, num_nodes: usize) -> Result<PropagationPosterior> {
        match *self {
            Prior::Uniform => Ok(uniform_prior(depth, num_nodes)),
            Prior::Geometric { ratio } => geometric_prior(depth, num_nodes, ratio),
        }
    }

    /// Log-probabilities of one row.
    pub fn log_row(&self, depth: usize) -> Result<Vec<f64>> {
        Ok(self.build(depth, 1)?.log_probs().into_data())
    }
}

impl std::str::FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Prior::Uniform);
        }
        if let Some(r) = s.strip_prefix("geometric:") {
            let ratio = r
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid geometric ratio '{r}'")))?;
            return Ok(Prior::Geometric { ratio });
        }
        Err(Error::Config(format!(
            "unknown prior '{s}' (expected uniform or geometric:<r>)"
        )))
    }
}

pub fn uniform_prior(depth: usize, num_nodes: usize) -> PropagationPosterior {
    PropagationPosterior {
        probs: Tensor::filled(num_nodes, depth + 1, 1.0 / (depth + 1) as f64),
    }
}

pub fn geometric_prior(depth: usize, num_nodes: usize, ratio: f64) -> Result<PropagationPosterior> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Config(format!(
            "geometric prior ratio must be positive, got {ratio}"
        )));
    }
    let w: Vec<f64> = (0..=depth).map(|k| ratio.powi(k as i32)).collect();
    let z: f64 = w.iter().sum();
    let mut probs = Tensor::zeros(num_nodes, depth + 1);
    for r in 0..num_nodes {
        for (p, wk) in probs.row_mut(r).iter_mut().zip(&w) {
            *p = wk / z;
        }
    }
    Ok(PropagationPosterior { probs })
}

/// Plain-value head parameters: one `D × 1` weight per depth and an optional `1 × (K+1)` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weights: Vec<Tensor>,
    pub bias: Option<Tensor>,
}

/// Registered head parameters (φ).
#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    weights: Vec<ParamId>,
    bias: Option<ParamId>,
}

impl Head {
    pub fn new(
        kind: HeadKind,
        depth: usize,
        repr_dim: usize,
        with_bias: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..=depth)
            .map(|k| store.add_glorot(format!("head.{k}.weight"), repr_dim, 1, rng))
            .collect();
        let bias = with_bias.then(|| store.add("head.bias", Tensor::zeros(1, depth + 1)));
        Head { kind, weights, bias }
    }

    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.weights.clone();
        ids.extend(self.bias);
        ids
    }

    pub fn params(&self, store: &ParamStore) -> HeadParams {
        HeadParams {
            weights: self.weights.iter().map(|&w| store.value(w).clone()).collect(),
            bias: self.bias.map(|b| store.value(b).clone()),
        }
    }

    /// `log q(t_n = k)` for every node, `N × (K+1)`.
    pub fn log_posterior(&self, tape: &mut Tape, store: &ParamStore, stack: &[Var]) -> Result<Var> {
        let weights: Vec<Var> = self.weights.iter().map(|&w| tape.param(store, w)).collect();
        let bias = self.bias.map(|b| tape.param(store, b));
        log_posterior_on_tape(tape, self.kind, stack, &weights, bias)
    }
}

fn scores(tape: &mut Tape, stack: &[Var], weights: &[Var], bias: Option<Var>, count: usize) -> Result<Var> {
    let cols = (0..count)
        .map(|k| tape.matmul(stack[k], weights[k]))
        .collect::<Result<Vec<_>>>()?;
    let s = tape.concat_cols(&cols)?;
    match bias {
        Some(b) if count == weights.len() => tape.add_row(s, b),
        Some(b) => {
            // quit head: the last depth has no gate, so drop the final bias entry
            let sel = tape.constant(select_first(weights.len(), count));
            let bb = tape.matmul(b, sel)?;
            tape.add_row(s, bb)
        }
        None => Ok(s),
    }
}

fn select_first(total: usize, count: usize) -> Tensor {
    let mut t = Tensor::zeros(total, count);
    for i in 0..count {
        t.set(i, i, 1.0);
    }
    t
}

pub(crate) fn log_posterior_on_tape(
    tape: &mut Tape,
    kind: HeadKind,
    stack: &[Var],
    weights: &[Var],
    bias: Option<Var>,
) -> Result<Var> {
    if stack.len() != weights.len() {
        return Err(Error::dim("head", format!("{} depths", weights.len()), stack.len()));
    }
    match kind {
        HeadKind::L2s => {
            let s = scores(tape, stack, weights, bias, weights.len())?;
            tape.row_log_softmax(s)
        }
        HeadKind::L2q => {
            let n = tape.value(stack[0]).rows();
            let depth = weights.len() - 1;
            if depth == 0 {
                return Ok(tape.constant(Tensor::zeros(n, 1)));
            }
            let gates = scores(tape, stack, weights, bias, depth)?;
            let log_quit = tape.log_sigmoid(gates)?;
            let neg = tape.scale(gates, -1.0)?;
            let log_stay = tape.log_sigmoid(neg)?;
            let pad = tape.constant(Tensor::zeros(n, 1));
            let quit = tape.concat_cols(&[log_quit, pad])?;
            let stay = tape.concat_cols(&[log_stay, pad])?;
            let survived = tape.cumsum_cols_exclusive(stay)?;
            tape.add(quit, survived)
        }
    }
}

fn stack_and_params(
    tape: &mut Tape,
    stack: &LayerStack,
    head: &HeadParams,
) -> Result<(Vec<Var>, Vec<Var>, Option<Var>)> {
    if head.weights.len() != stack.depth() + 1 {
        return Err(Error::dim(
            "head",
            format!("{} weight vectors", stack.depth() + 1),
            head.weights.len(),
        ));
    }
    let s = stack.layers().iter().map(|l| tape.constant(l.clone())).collect();
    let w = head.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let b = head.bias.as_ref().map(|b| tape.constant(b.clone()));
    Ok((s, w, b))
}

/// Select head: `q(t_n=k) ∝ exp(w_kᵀ H_{k,n})`.
pub fn l2s_posterior(stack: &LayerStack, head: &HeadParams) -> Result<PropagationPosterior> {
    let mut tape = Tape::new();
    let (s, w, b) = stack_and_params(&mut tape, stack, head)?;
    let lq = log_posterior_on_tape(&mut tape, HeadKind::L2s, &s, &w, b)?;
    PropagationPosterior::new(tape.value(lq).map(f64::exp))
}

/// Quit gates `α_{k,n} = σ(w_kᵀ H_{k,n})` for `k < K`.
pub fn l2q_quit(stack: &LayerStack, head: &HeadParams) -> Result<QuitProbabilities> {
    let mut tape = Tape::new();
    let (s, w, b) = stack_and_params(&mut tape, stack, head)?;
    let depth = stack.depth();
    if depth == 0 {
        return QuitProbabilities::new(Tensor::zeros(stack.layer(0).rows(), 0));
    }
    let g = scores(&mut tape, &s, &w, b, depth)?;
    let a = tape.sigmoid(g)?;
    QuitProbabilities::new(tape.value(a).clone())
}

/// Quit head posterior computed on the tape (log space).
pub fn l2q_posterior(stack: &LayerStack, head: &HeadParams) -> Result<PropagationPosterior> {
    let mut tape = Tape::new();
    let (s, w, b) = stack_and_params(&mut tape, stack, head)?;
    let lq = log_posterior_on_tape(&mut tape, HeadKind::L2q, &s, &w, b)?;
    PropagationPosterior::new(tape.value(lq).map(f64::exp))
}

/// Stick-breaking in product form.
pub fn stick_break(quit: &QuitProbabilities) -> PropagationPosterior {
    let a = quit.probs();
    let depth = a.cols();
    let mut probs = Tensor::zeros(a.rows(), depth + 1);
    for r in 0..a.rows() {
        let mut remaining = 1.0;
        for k in 0..depth {
            let alpha = a.get(r, k);
            probs.set(r, k, alpha * remaining);
            remaining *= 1.0 - alpha;
        }
        probs.set(r, depth, remaining);
    }
    PropagationPosterior { probs }
}

/// I.i.d. Gumbel(0, 1) noise.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let g = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let data = (0..rows * cols).map(|_| g.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized to shape")
}

fn check_temperature(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!(
            "Gumbel-Softmax temperature must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// `t̂ = softmax((log q + g) / γ)` with the noise `g` supplied.
pub fn gumbel_soft_select(posterior: &PropagationPosterior, noise: &Tensor, gamma: f64) -> Result<SoftSelection> {
    check_temperature(gamma)?;
    let lq = posterior.log_probs();
    let z = lq.zip_map(noise, |l, g| (l + g) / gamma)?;
    Ok(SoftSelection {
        probs: z.row_softmax(),
        temperature: gamma,
    })
}

pub fn gumbel_softmax_sample(
    posterior: &PropagationPosterior,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<SoftSelection> {
    check_temperature(gamma)?;
    let noise = sample_gumbel(posterior.num_nodes(), posterior.depth() + 1, rng);
    gumbel_soft_select(posterior, &noise, gamma)
}

/// `log t̂` on the tape; gradients reach `log_q` but not the noise.
pub fn log_soft_selection(tape: &mut Tape, log_q: Var, noise: &Tensor, gamma: f64) -> Result<Var> {
    check_temperature(gamma)?;
    let lq = tape.clamp_min(log_q, PROB_FLOOR.ln())?;
    let g = tape.constant(noise.clone());
    let z = tape.add(lq, g)?;
    let z = tape.scale(z, 1.0 / gamma)?;
    tape.row_log_softmax(z)
}

/// Mean over rows of `Σ_k q_k (log q_k − log p_k)`, with `log p` given per row.
pub fn kl_on_tape(tape: &mut Tape, log_q: Var, log_prior: &Tensor) -> Result<Var> {
    let q = tape.exp(log_q)?;
    let lq = tape.clamp_min(log_q, PROB_FLOOR.ln())?;
    let lp = tape.constant(log_prior.clone());
    let diff = tape.sub(lq, lp)?;
    let terms = tape.mul(q, diff)?;
    let total = tape.sum(terms)?;
    let rows = tape.value(log_q).rows();
    if rows == 0 {
        return Err(Error::Numeric("KL over zero rows".into()));
    }
    tape.scale(total, 1.0 / rows as f64)
}

/// Mean over rows of `KL(q_n ‖ p_n)`, closed form for categoricals.
pub fn kl_to_prior(posterior: &PropagationPosterior, prior: &PropagationPosterior) -> Result<f64> {
    let (q, p) = (posterior.probs(), prior.probs());
    if q.shape() != p.shape() {
        return Err(Error::dim(
            "kl_to_prior",
            format!("{:?}", q.shape()),
            format!("{:?}", p.shape()),
        ));
    }
    if q.rows() == 0 {
        return Err(Error::Numeric("KL over zero rows".into()));
    }
    let total: f64 = q
        .data()
        .iter()
        .zip(p.data())
        .map(|(&qi, &pi)| qi * (qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / q.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    /// Stack with K+1 single-feature layers; layer k holds `logits[k]` for the one node.
    fn scalar_stack(logits: &[f64]) -> (LayerStack, HeadParams) {
        let layers = logits.iter().map(|&l| Tensor::scalar(l)).collect();
        let head = HeadParams {
            weights: vec![Tensor::scalar(1.0); logits.len()],
            bias: None,
        };
        (LayerStack::new(layers).unwrap(), head)
    }

    #[test]
    fn priors() {
        approx(uniform_prior(3, 2).row(1), &[0.25; 4], 1e-15);
        approx(uniform_prior(0, 1).row(0), &[1.0], 1e-15);
        approx(
            geometric_prior(1, 1, 0.5).unwrap().row(0),
            &[2.0 / 3.0, 1.0 / 3.0],
            1e-15,
        );
        assert_eq!(
            "geometric:0.5".parse::<Prior>().unwrap(),
            Prior::Geometric { ratio: 0.5 }
        );
    }

    #[test]
    fn l2s_examples() {
        let (s, h) = scalar_stack(&[3f64.ln(), 0.0]);
        approx(l2s_posterior(&s, &h).unwrap().row(0), &[0.75, 0.25], 1e-12);
        let (s, h) = scalar_stack(&[3f64.ln() + 5.0, 5.0]);
        approx(l2s_posterior(&s, &h).unwrap().row(0), &[0.75, 0.25], 1e-12);
        let zero = HeadParams {
            weights: vec![Tensor::scalar(0.0); 2],
            bias: None,
        };
        approx(l2s_posterior(&s, &zero).unwrap().row(0), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn l2q_gates() {
        let (s, h) = scalar_stack(&[0.0, 3f64.ln(), 9.0]);
        let a = l2q_quit(&s, &h).unwrap();
        approx(a.probs().data(), &[0.5, 0.75], 1e-12);
    }

    #[test]
    fn stick_break_examples() {
        let q = stick_break(&QuitProbabilities::new(Tensor::from_rows(&[vec![0.3, 0.5]]).unwrap()).unwrap());
        approx(q.row(0), &[0.3, 0.35, 0.35], 1e-15);
        let q = stick_break(&QuitProbabilities::new(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap());
        approx(q.row(0), &[0.5, 0.25, 0.25], 1e-15);
        let q = stick_break(&QuitProbabilities::new(Tensor::from_rows(&[vec![1e-9, 1e-9]]).unwrap()).unwrap());
        assert!(q.row(0)[2] > 1.0 - 1e-8);
    }

    #[test]
    fn log_space_quit_head_matches_product_form() {
        let (s, h) = scalar_stack(&[-0.4, 1.3, 0.2, 7.0]);
        let direct = l2q_posterior(&s, &h).unwrap();
        let product = stick_break(&l2q_quit(&s, &h).unwrap());
        approx(direct.row(0), product.row(0), 1e-14);
    }

    #[test]
    fn biased_quit_head_uses_leading_bias_entries() {
        let (s, mut h) = scalar_stack(&[0.0, 0.0, 0.0]);
        h.bias = Some(Tensor::from_rows(&[vec![3f64.ln(), 0.0, 100.0]]).unwrap());
        approx(l2q_quit(&s, &h).unwrap().probs().data(), &[0.75, 0.5], 1e-12);
    }

    #[test]
    fn gumbel_temperature_limits() {
        let post = PropagationPosterior::new(Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap()).unwrap();
        let zero = Tensor::zeros(1, 3);
        let cold = gumbel_soft_select(&post, &zero, 1e-3).unwrap();
        approx(cold.probs.row(0), &[0.0, 1.0, 0.0], 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hot = gumbel_softmax_sample(&post, 1e3, &mut rng).unwrap();
        approx(hot.probs.row(0), &[1.0 / 3.0; 3], 1e-2);
        assert!(matches!(
            gumbel_softmax_sample(&post, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let u = uniform_prior(3, 1);
        assert_eq!(kl_to_prior(&u, &u).unwrap(), 0.0);
        let one_hot = PropagationPosterior::new(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!((kl_to_prior(&one_hot, &u).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(kl_to_prior(&one_hot, &uniform_prior(2, 1)).is_err());
    }
}
