//! Objectives and learning loops.

mod bilevel;
mod elbo;
mod em;
mod model;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::backbone::{BackboneConfig, PredictMode};
use crate::error::{Error, Result};
use crate::head::{HeadKind, Prior};

pub use bilevel::{
    bilevel_step, fd_step, hypergrad_fd, hypergrad_fd_central, phi_gradient, BilevelObjective, LossGrad, PhiGradient,
    StepReport,
};
pub use elbo::{cross_entropy_on_tape, elbo_on_tape, negative_elbo, ElboBreakdown, ElboVars, Selection};
pub use em::{em_e_step, em_e_step_with_prior, em_fit_phi, em_m_step_theta, em_step, EmReport};
pub use model::{Evaluation, GraphData, Model, NodeForward};
pub use trainer::{train, vi_step, EpochRecord, TrainHistory, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Em,
    Vi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilevelMode {
    /// Head and backbone trained jointly on the training loss.
    Off,
    /// Head trained on the validation loss, ignoring the mixed second derivative.
    #[serde(alias = "first")]
    FirstOrder,
    /// Head trained on the validation loss with the finite-difference correction.
    #[serde(alias = "second")]
    SecondOrder,
}

impl std::str::FromStr for BilevelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(BilevelMode::Off),
            "first" | "first_order" | "first-order" => Ok(BilevelMode::FirstOrder),
            "second" | "second_order" | "second-order" => Ok(BilevelMode::SecondOrder),
            _ => Err(Error::Config(format!(
                "unknown bilevel mode '{s}' (expected off, first or second)"
            ))),
        }
    }
}

/// Which posterior the EM backbone step averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmTarget {
    /// The head's output after it has been fitted.
    Parametric,
    /// The closed-form E-step posterior.
    Nonparametric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` trains the backbone alone and predicts from depth `K`.
    pub head: Option<HeadKind>,
    pub head_bias: bool,
    pub predict: PredictMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head: Some(HeadKind::L2q),
            head_bias: true,
            predict: PredictMode::Expected,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()
    }
}

/// Linear temperature schedule from the initial value to `final_temperature`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub final_temperature: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub bilevel: BilevelMode,
    pub theta_optimizer: OptimizerKind,
    pub phi_optimizer: OptimizerKind,
    pub theta_lr: f64,
    pub phi_lr: f64,
    pub weight_decay: f64,
    pub head_weight_decay: f64,
    pub prior: Prior,
    pub temperature: f64,
    pub anneal: Option<Anneal>,
    pub samples: usize,
    pub kl_weight: f64,
    /// Head fitting steps per EM iteration.
    pub phi_steps: usize,
    pub em_target: EmTarget,
    pub epochs: usize,
    pub patience: usize,
    /// Finite-difference step is `fd_scale / ‖v‖`.
    pub fd_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trainer: TrainerKind::Vi,
            bilevel: BilevelMode::FirstOrder,
            theta_optimizer: OptimizerKind::Adam,
            phi_optimizer: OptimizerKind::Adam,
            theta_lr: 0.01,
            phi_lr: 0.01,
            weight_decay: 5e-4,
            head_weight_decay: 0.0,
            prior: Prior::Uniform,
            temperature: 0.5,
            anneal: None,
            samples: 1,
            kl_weight: 1.0,
            phi_steps: 1,
            em_target: EmTarget::Parametric,
            epochs: 1000,
            patience: 100,
            fd_scale: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("theta_lr", self.theta_lr), ("phi_lr", self.phi_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, wd) in [
            ("weight_decay", self.weight_decay),
            ("head_weight_decay", self.head_weight_decay),
        ] {
            if !(wd >= 0.0) || !wd.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {wd}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(a) = &self.anneal {
            if !(a.final_temperature > 0.0) || !a.final_temperature.is_finite() {
                return Err(Error::Config("annealed temperature must be positive".into()));
            }
        }
        if self.samples == 0 {
            return Err(Error::Config("at least one Gumbel sample per step is required".into()));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(Error::Config(format!(
                "kl_weight must be non-negative, got {}",
                self.kl_weight
            )));
        }
        if !(self.fd_scale > 0.0) || !self.fd_scale.is_finite() {
            return Err(Error::Config(format!(
                "fd_scale must be positive, got {}",
                self.fd_scale
            )));
        }
        if let Prior::Geometric { ratio } = self.prior {
            if !(ratio > 0.0) || !ratio.is_finite() {
                return Err(Error::Config(format!(
                    "geometric prior ratio must be positive, got {ratio}"
                )));
            }
        }
        if self.trainer == TrainerKind::Em && self.bilevel == BilevelMode::SecondOrder {
            return Err(Error::Unsupported(
                "the second-order correction is only defined for the variational trainer".into(),
            ));
        }
        Ok(())
    }

    /// Gumbel-Softmax temperature at `epoch`.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match &self.anneal {
            Some(a) if a.epochs > 0 => {
                let t = (epoch as f64 / a.epochs as f64).min(1.0);
                self.temperature + t * (a.final_temperature - self.temperature)
            }
            Some(a) => a.final_temperature,
            None => self.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn bilevel_names() {
        assert_eq!("first".parse::<BilevelMode>().unwrap(), BilevelMode::FirstOrder);
        assert_eq!("second_order".parse::<BilevelMode>().unwrap(), BilevelMode::SecondOrder);
        assert!("third".parse::<BilevelMode>().is_err());
        let m: BilevelMode = serde_json::from_str("\"first\"").unwrap();
        assert_eq!(m, BilevelMode::FirstOrder);
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = TrainConfig {
            phi_lr: 0.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn anneal_schedule() {
        let cfg = TrainConfig {
            temperature: 1.0,
            anneal: Some(Anneal {
                final_temperature: 0.5,
                epochs: 10,
            }),
            ..Default::default()
        };
        assert_eq!(cfg.temperature_at(0), 1.0);
        assert!((cfg.temperature_at(5) - 0.75).abs() < 1e-15);
        assert_eq!(cfg.temperature_at(50), 0.5);
    }
}
