//! Head updates on the validation objective.
//!
//! One step first moves the backbone on the training loss,
//! `θ' = θ − η_θ ∇_θ L_train(θ, φ)`, then moves the head along
//!
//! ```text
//! ∇_φ L_val(θ', φ) − η_θ · ∇²_{φ,θ} L_train(θ, φ) · v,    v = ∇_θ L_val(θ', φ)
//! ```
//!
//! where the mixed second-derivative product is replaced by a forward
//! difference of `∇_φ L_train` along `v`. The first-order variant drops that
//! correction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::elbo::{elbo_on_tape, Selection};
use super::model::{GraphData, Model};
use super::trainer::{vi_step, DROPOUT_STREAM, TRAIN_NOISE_STREAM};
use super::{BilevelMode, TrainConfig};
use crate::autodiff::{Optimizer, ParamId, Tape};
use crate::error::{Error, Result};
use crate::head::sample_gumbel;
use crate::tensor::Tensor;

/// A loss value and its gradients with respect to both parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Two deterministic losses over flat parameter vectors `θ` (lower level) and `φ` (upper level).
pub trait BilevelObjective {
    fn train(&mut self, theta: &[f64], phi: &[f64]) -> Result<LossGrad>;
    fn val(&mut self, theta: &[f64], phi: &[f64]) -> Result<LossGrad>;
}

/// `scale / ‖v‖₂`, kept within `[1e-8, 1e-2]`.
pub fn fd_step(v: &[f64], scale: f64) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 1e-2;
    }
    (scale / norm).clamp(1e-8, 1e-2)
}

fn shifted(theta: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + eps * d).collect()
}

fn check_fd_inputs(theta: &[f64], v: &[f64], eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    if theta.len() != v.len() {
        return Err(Error::dim("hypergrad_fd", theta.len(), v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("hypergradient direction is not finite".into()));
    }
    Ok(())
}

fn finish(diff: Vec<f64>) -> Result<Vec<f64>> {
    if diff.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("finite-difference hypergradient is not finite".into()));
    }
    Ok(diff)
}

/// `(∇_φ L(θ + εv, φ) − ∇_φ L(θ, φ)) / ε`, approximating `∇²_{φ,θ} L · v`.
pub fn hypergrad_fd<F>(mut phi_grad: F, theta: &[f64], phi: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    check_fd_inputs(theta, v, eps)?;
    let base = phi_grad(theta, phi)?;
    let moved = phi_grad(&shifted(theta, v, eps), phi)?;
    finish(moved.iter().zip(&base).map(|(a, b)| (a - b) / eps).collect())
}

/// Central-difference variant: `(∇_φ L(θ + εv) − ∇_φ L(θ − εv)) / 2ε`.
pub fn hypergrad_fd_central<F>(mut phi_grad: F, theta: &[f64], phi: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    check_fd_inputs(theta, v, eps)?;
    let up = phi_grad(&shifted(theta, v, eps), phi)?;
    let down = phi_grad(&shifted(theta, v, -eps), phi)?;
    finish(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiGradient {
    /// `∇_φ L_val(θ', φ)`.
    pub direct: Vec<f64>,
    /// Finite-difference estimate of `∇²_{φ,θ} L_train(θ, φ) · v`; zero in first-order mode.
    pub correction: Vec<f64>,
    /// `direct − η_θ · correction`.
    pub total: Vec<f64>,
    pub val_loss: f64,
}

/// Head gradient after the backbone moved from `theta_before` to `theta_after`.
pub fn phi_gradient<O: BilevelObjective>(
    objective: &mut O,
    theta_before: &[f64],
    theta_after: &[f64],
    phi: &[f64],
    eta_theta: f64,
    mode: BilevelMode,
    fd_scale: f64,
) -> Result<PhiGradient> {
    let val = objective.val(theta_after, phi)?;
    let correction = match mode {
        BilevelMode::Off => {
            return Err(Error::Contract(
                "phi_gradient is only defined for the bilevel modes".into(),
            ));
        }
        BilevelMode::FirstOrder => vec![0.0; phi.len()],
        BilevelMode::SecondOrder => {
            let eps = fd_step(&val.theta, fd_scale);
            hypergrad_fd(
                |t, p| Ok(objective.train(t, p)?.phi),
                theta_before,
                phi,
                &val.theta,
                eps,
            )?
        }
    };
    let total = val
        .phi
        .iter()
        .zip(&correction)
        .map(|(d, c)| d - eta_theta * c)
        .collect();
    Ok(PhiGradient {
        direct: val.phi,
        correction,
        total,
        val_loss: val.loss,
    })
}

/// Per-step random streams: dropout masks and Gumbel noise are frozen within a step.
pub(crate) fn step_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 3) | purpose);
    rng
}

const VAL_NOISE_STREAM: u64 = 3;

/// The model's relaxed negative ELBO on the training and validation nodes.
pub(crate) struct ModelObjective<'m, 'd, 'g> {
    pub model: &'m mut Model,
    pub data: &'d GraphData<'g>,
    pub cfg: &'d TrainConfig,
    pub theta_ids: Vec<ParamId>,
    pub phi_ids: Vec<ParamId>,
    pub temperature: f64,
    pub seed: u64,
    pub epoch: usize,
    train_noise: Vec<Tensor>,
    val_noise: Vec<Tensor>,
}

impl<'m, 'd, 'g> ModelObjective<'m, 'd, 'g> {
    pub fn new(model: &'m mut Model, data: &'d GraphData<'g>, cfg: &'d TrainConfig, epoch: usize) -> Self {
        let cols = model.depth() + 1;
        let draw = |rows: usize, purpose: u64| {
            let mut rng = step_rng(cfg.seed, epoch, purpose);
            (0..cfg.samples).map(|_| sample_gumbel(rows, cols, &mut rng)).collect()
        };
        ModelObjective {
            theta_ids: model.theta_ids(),
            phi_ids: model.phi_ids(),
            temperature: cfg.temperature_at(epoch),
            seed: cfg.seed,
            epoch,
            train_noise: draw(data.train.len(), TRAIN_NOISE_STREAM),
            val_noise: draw(data.val.len(), VAL_NOISE_STREAM),
            model,
            data,
            cfg,
        }
    }

    pub fn current(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.model.store.flat_values(&self.theta_ids),
            self.model.store.flat_values(&self.phi_ids),
        )
    }

    fn evaluate(&mut self, val: bool, theta: &[f64], phi: &[f64]) -> Result<LossGrad> {
        let store = &mut self.model.store;
        store.set_flat_values(&self.theta_ids, theta)?;
        store.set_flat_values(&self.phi_ids, phi)?;
        let (nodes, noise) = if val {
            (&self.data.val, &self.val_noise)
        } else {
            (&self.data.train, &self.train_noise)
        };
        if nodes.is_empty() {
            return Err(Error::Config("empty node set for a training objective".into()));
        }
        let mut rng = step_rng(self.seed, self.epoch, DROPOUT_STREAM);
        let mut tape = Tape::new();
        let fwd = self.model.forward_nodes(&mut tape, self.data, nodes, true, &mut rng)?;
        let log_q = fwd
            .log_q
            .ok_or_else(|| Error::Unsupported("the variational objective needs a propagation head".into()))?;
        let selection = Selection::Sample {
            noise,
            temperature: self.temperature,
        };
        let elbo = elbo_on_tape(&mut tape, fwd.ll, log_q, selection, &self.cfg.prior, self.cfg.kl_weight)?;
        let loss = tape.scalar(elbo.total);
        let store = &mut self.model.store;
        store.zero_grad();
        tape.backward(elbo.total, store)?;
        Ok(LossGrad {
            loss,
            theta: store.flat_grads(&self.theta_ids),
            phi: store.flat_grads(&self.phi_ids),
        })
    }
}

impl BilevelObjective for ModelObjective<'_, '_, '_> {
    fn train(&mut self, theta: &[f64], phi: &[f64]) -> Result<LossGrad> {
        self.evaluate(false, theta, phi)
    }

    fn val(&mut self, theta: &[f64], phi: &[f64]) -> Result<LossGrad> {
        self.evaluate(true, theta, phi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Relaxed negative ELBO on the training nodes before the step.
    pub train_loss: f64,
    /// Relaxed negative ELBO on the validation nodes after the backbone moved.
    pub val_loss: Option<f64>,
    pub correction: Vec<f64>,
}

/// One training step for the variational trainer in any bilevel mode.
///
/// In `off` mode both parameter groups step on the training gradient.
pub fn bilevel_step(
    model: &mut Model,
    data: &GraphData<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    theta_opt: &mut Optimizer,
    phi_opt: &mut Optimizer,
) -> Result<StepReport> {
    if cfg.bilevel != BilevelMode::Off && data.val.is_empty() {
        return Err(Error::Config(
            "bilevel training needs a non-empty validation set".into(),
        ));
    }
    if cfg.bilevel == BilevelMode::Off {
        let elbo = vi_step(model, data, cfg, epoch, theta_opt, phi_opt)?;
        return Ok(StepReport {
            train_loss: elbo.total,
            val_loss: None,
            correction: Vec::new(),
        });
    }
    let mut obj = ModelObjective::new(model, data, cfg, epoch);
    let (theta, phi) = obj.current();
    let train = obj.train(&theta, &phi)?;
    let (theta_ids, phi_ids) = (obj.theta_ids.clone(), obj.phi_ids.clone());

    let store = &mut obj.model.store;
    store.set_flat_grads(&theta_ids, &train.theta)?;
    theta_opt.step(store)?;
    let theta_after = store.flat_values(&theta_ids);
    let g = phi_gradient(
        &mut obj,
        &theta,
        &theta_after,
        &phi,
        theta_opt.lr(),
        cfg.bilevel,
        cfg.fd_scale,
    )?;
    let store = &mut obj.model.store;
    store.set_flat_values(&theta_ids, &theta_after)?;
    store.set_flat_values(&phi_ids, &phi)?;
    store.set_flat_grads(&phi_ids, &g.total)?;
    phi_opt.step(store)?;
    Ok(StepReport {
        train_loss: train.loss,
        val_loss: Some(g.val_loss),
        correction: g.correction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L = θᵀ M φ` for a fixed 3×2 matrix.
    fn bilinear_phi_grad(theta: &[f64], _phi: &[f64]) -> Result<Vec<f64>> {
        let m = [[1.0, -2.0], [0.5, 3.0], [-1.5, 0.25]];
        Ok((0..2).map(|j| (0..3).map(|i| theta[i] * m[i][j]).sum()).collect())
    }

    #[test]
    fn bilinear_mixed_derivative_is_exact() {
        let theta = [0.3, -1.0, 2.0];
        let v = [1.0, 2.0, -0.5];
        let got = hypergrad_fd(bilinear_phi_grad, &theta, &[0.0, 0.0], &v, 1e-3).unwrap();
        let expect = [1.0 + 1.0 + 0.75, -2.0 + 6.0 - 0.125];
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let got = hypergrad_fd(
            bilinear_phi_grad,
            &[1.0, 2.0, 3.0],
            &[0.0, 0.0],
            &[0.0; 3],
            fd_step(&[0.0; 3], 0.01),
        )
        .unwrap();
        assert_eq!(got, vec![0.0, 0.0]);
    }

    #[test]
    fn central_difference_agrees_on_quadratic() {
        // ∇_φ L = (θ₀² + φ₀, θ₀θ₁)
        let f = |t: &[f64], p: &[f64]| Ok(vec![t[0] * t[0] + p[0], t[0] * t[1]]);
        let theta = [0.7, -0.4];
        let v = [0.6, 0.8];
        let eps = 1e-4;
        let fwd = hypergrad_fd(f, &theta, &[0.1, 0.0], &v, eps).unwrap();
        let cen = hypergrad_fd_central(f, &theta, &[0.1, 0.0], &v, eps / 2.0).unwrap();
        for (a, b) in fwd.iter().zip(&cen) {
            assert!((a - b).abs() < 10.0 * eps);
        }
        assert!((cen[0] - 2.0 * 0.7 * 0.6).abs() < 1e-9);
    }

    #[test]
    fn step_rule() {
        assert_eq!(fd_step(&[3.0, 4.0], 0.01), 0.002);
        assert_eq!(fd_step(&[1e-9], 0.01), 1e-2);
        assert_eq!(fd_step(&[1e12], 0.01), 1e-8);
    }

    #[test]
    fn bad_step_rejected() {
        assert!(matches!(
            hypergrad_fd(bilinear_phi_grad, &[0.0; 3], &[0.0; 2], &[1.0; 3], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            hypergrad_fd(bilinear_phi_grad, &[0.0; 3], &[0.0; 2], &[f64::NAN; 3], 1e-3),
            Err(Error::Numeric(_))
        ));
    }
}
