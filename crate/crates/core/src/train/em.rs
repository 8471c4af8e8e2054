use rand::Rng;

use super::elbo::cross_entropy_on_tape;
use super::model::{GraphData, Model};
use super::{BilevelMode, EmTarget, TrainConfig};
use crate::autodiff::{Optimizer, ParamStore, Tape};
use crate::backbone::LayerStack;
use crate::error::{Error, Result};
use crate::head::{Head, Prior, PropagationPosterior};
use crate::tensor::{log_sum_exp, Tensor};

/// Closed-form posterior over depths, `q(k) ∝ p(y | k)`, for the rows in `mask`.
pub fn em_e_step(ll: &Tensor, mask: &[bool]) -> Result<PropagationPosterior> {
    em_e_step_with_prior(ll, mask, &Prior::Uniform)
}

/// `q(k) ∝ p(k) · p(y | k)`; with a uniform prior this is [`em_e_step`].
pub fn em_e_step_with_prior(ll: &Tensor, mask: &[bool], prior: &Prior) -> Result<PropagationPosterior> {
    if mask.len() != ll.rows() {
        return Err(Error::dim("em_e_step", ll.rows(), mask.len()));
    }
    if ll.cols() == 0 {
        return Err(Error::dim("em_e_step", "at least one depth", 0));
    }
    let log_prior = match prior {
        Prior::Uniform => vec![0.0; ll.cols()],
        p => p.log_row(ll.cols() - 1)?,
    };
    let rows: Vec<usize> = (0..ll.rows()).filter(|&r| mask[r]).collect();
    let mut q = Tensor::zeros(rows.len(), ll.cols());
    for (i, &r) in rows.iter().enumerate() {
        let z: Vec<f64> = ll.row(r).iter().zip(&log_prior).map(|(l, p)| l + p).collect();
        if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric(format!("row {r} has an invalid log-likelihood")));
        }
        if z.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Numeric(format!("row {r} has zero likelihood at every depth")));
        }
        let lse = log_sum_exp(&z);
        for (o, v) in q.row_mut(i).iter_mut().zip(&z) {
            *o = (v - lse).exp();
        }
    }
    PropagationPosterior::new(q)
}

fn gathered(stack: &LayerStack, nodes: &[usize]) -> Vec<Tensor> {
    stack
        .layers()
        .iter()
        .map(|h| {
            let mut t = Tensor::zeros(nodes.len(), h.cols());
            for (i, &n) in nodes.iter().enumerate() {
                t.row_mut(i).copy_from_slice(h.row(n));
            }
            t
        })
        .collect()
}

/// Head posterior on `nodes` for a fixed stack, `M × (K+1)`.
pub(crate) fn head_posterior(head: &Head, store: &ParamStore, stack: &LayerStack, nodes: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<_> = gathered(stack, nodes).into_iter().map(|t| tape.constant(t)).collect();
    let lq = head.log_posterior(&mut tape, store, &vars)?;
    Ok(tape.value(lq).map(f64::exp))
}

/// Fits the head to `target` by minimizing `−Σ target · log q_φ` on a fixed stack.
///
/// Returns the cross-entropy before each step and after the last.
pub fn em_fit_phi(
    head: &Head,
    store: &mut ParamStore,
    stack: &LayerStack,
    nodes: &[usize],
    target: &PropagationPosterior,
    steps: usize,
    optimizer: &mut Optimizer,
) -> Result<Vec<f64>> {
    if target.num_nodes() != nodes.len() || target.depth() != head.depth() {
        return Err(Error::dim(
            "em_fit_phi",
            format!("({}, {})", nodes.len(), head.depth() + 1),
            format!("{:?}", target.probs().shape()),
        ));
    }
    let rows = gathered(stack, nodes);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let vars: Vec<_> = rows.iter().map(|t| tape.constant(t.clone())).collect();
        let lq = head.log_posterior(&mut tape, store, &vars)?;
        let loss = cross_entropy_on_tape(&mut tape, lq, target.probs())?;
        losses.push(tape.scalar(loss));
        if step == steps {
            break;
        }
        store.zero_grad();
        tape.backward(loss, store)?;
        optimizer.step(store)?;
    }
    Ok(losses)
}

/// One backbone step on `−mean_n Σ_k q_{n,k} log p(y_n | k)` with `q` held fixed.
///
/// Returns the objective before the step.
pub fn em_m_step_theta(
    model: &mut Model,
    data: &GraphData<'_>,
    nodes: &[usize],
    q: &Tensor,
    optimizer: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<f64> {
    if q.shape() != (nodes.len(), model.depth() + 1) {
        return Err(Error::dim(
            "em_m_step_theta",
            format!("({}, {})", nodes.len(), model.depth() + 1),
            format!("{:?}", q.shape()),
        ));
    }
    let mut tape = Tape::new();
    let fwd = model.forward_nodes(&mut tape, data, nodes, true, rng)?;
    let loss = cross_entropy_on_tape(&mut tape, fwd.ll, q)?;
    let value = tape.scalar(loss);
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    optimizer.step(&mut model.store)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmReport {
    /// Head cross-entropy before and after fitting.
    pub fit_losses: Vec<f64>,
    /// Backbone objective before its step.
    pub m_loss: f64,
}

/// One EM iteration: E-step, head fit, backbone step.
///
/// In `first_order` mode the head is fitted to the closed-form posterior of the
/// validation nodes instead of the training nodes.
pub fn em_step(
    model: &mut Model,
    data: &GraphData<'_>,
    cfg: &TrainConfig,
    theta_opt: &mut Optimizer,
    phi_opt: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<EmReport> {
    let head = model
        .head
        .clone()
        .ok_or_else(|| Error::Unsupported("EM needs a propagation head".into()))?;
    let fit_nodes: &[usize] = match cfg.bilevel {
        BilevelMode::Off => &data.train,
        BilevelMode::FirstOrder => {
            if data.val.is_empty() {
                return Err(Error::Config(
                    "bilevel training needs a non-empty validation set".into(),
                ));
            }
            &data.val
        }
        BilevelMode::SecondOrder => {
            return Err(Error::Unsupported(
                "the second-order correction is only defined for the variational trainer".into(),
            ))
        }
    };
    let labels = data.graph.labels();
    let eval = model.evaluate(data)?;
    let all = |n: usize| vec![true; n];
    let ll_fit = eval.log_likelihoods(labels, fit_nodes)?;
    let q_fit = em_e_step_with_prior(&ll_fit, &all(fit_nodes.len()), &cfg.prior)?;
    let fit_losses = em_fit_phi(
        &head,
        &mut model.store,
        &eval.stack,
        fit_nodes,
        &q_fit,
        cfg.phi_steps,
        phi_opt,
    )?;
    let target = match cfg.em_target {
        EmTarget::Parametric => head_posterior(&head, &model.store, &eval.stack, &data.train)?,
        EmTarget::Nonparametric if cfg.bilevel == BilevelMode::Off => q_fit.probs().clone(),
        EmTarget::Nonparametric => {
            let ll = eval.log_likelihoods(labels, &data.train)?;
            em_e_step_with_prior(&ll, &all(data.train.len()), &cfg.prior)?
                .probs()
                .clone()
        }
    };
    let m_loss = em_m_step_theta(model, data, &data.train, &target, theta_opt, rng)?;
    Ok(EmReport { fit_losses, m_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e_step_examples() {
        let ll = Tensor::from_rows(&[vec![0.9f64.ln(), 0.6f64.ln(), 0.3f64.ln()], vec![-1.0, -1.0, -1.0]]).unwrap();
        let q = em_e_step(&ll, &[true, true]).unwrap();
        let expect = [0.5, 1.0 / 3.0, 1.0 / 6.0];
        for (a, b) in q.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for a in q.row(1) {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(em_e_step(&ll, &[false, true]).unwrap().num_nodes(), 1);
    }

    #[test]
    fn e_step_stable_for_tiny_likelihoods() {
        let ll = Tensor::from_rows(&[vec![-1000.0, -1001.0]]).unwrap();
        let q = em_e_step(&ll, &[true]).unwrap();
        assert!((q.row(0)[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn e_step_rejects_impossible_rows() {
        let ll = Tensor::from_rows(&[vec![f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert!(matches!(em_e_step(&ll, &[true]), Err(Error::Numeric(_))));
    }

    #[test]
    fn e_step_with_prior_reweights() {
        let ll = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let q = em_e_step_with_prior(&ll, &[true], &Prior::Geometric { ratio: 0.5 }).unwrap();
        assert!((q.row(0)[0] - 2.0 / 3.0).abs() < 1e-12);
    }
}
