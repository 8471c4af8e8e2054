//! Run configuration shared by the library runner and the command line.

use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize};

use crate::autodiff::OptimizerKind;
use crate::backbone::{BackboneConfig, BackboneKind, PredictMode};
use crate::error::{Error, Result};
use crate::graph::{GraphFormat, SyntheticSpec};
use crate::head::{HeadKind, Prior};
use crate::train::{Anneal, BilevelMode, EmTarget, ModelConfig, TrainConfig, TrainerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    /// Fixed-depth baseline: no head, no trainer, predictions from depth `K`.
    None,
    L2s,
    L2q,
}

impl HeadChoice {
    pub fn kind(self) -> Option<HeadKind> {
        match self {
            HeadChoice::None => None,
            HeadChoice::L2s => Some(HeadKind::L2s),
            HeadChoice::L2q => Some(HeadKind::L2q),
        }
    }
}

impl std::str::FromStr for HeadChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HeadChoice::None),
            "l2s" => Ok(HeadChoice::L2s),
            "l2q" => Ok(HeadChoice::L2q),
            _ => Err(Error::Config(format!("unknown head '{s}' (expected none, l2s or l2q)"))),
        }
    }
}

/// Flat experiment configuration. Every field has a kebab-case command-line flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file; ignored when `synthetic` is set.
    pub dataset: Option<PathBuf>,
    pub format: GraphFormat,
    /// Generate the graph instead of reading it.
    pub synthetic: Option<SyntheticSpec>,
    /// Moves this fraction of the training nodes to validation when the dataset has none.
    pub val_fraction: Option<f64>,

    pub backbone: BackboneKind,
    pub alpha: f64,
    pub depth: usize,
    pub hidden: usize,
    pub repr_dim: usize,
    pub dropout: f64,
    pub encoder_layers: usize,

    pub head: HeadChoice,
    pub head_bias: bool,
    pub predict: PredictMode,

    pub trainer: TrainerKind,
    pub bilevel: BilevelMode,
    pub prior: Prior,
    pub temperature: f64,
    pub anneal: Option<Anneal>,
    pub samples: usize,
    pub kl_weight: f64,
    pub theta_optimizer: OptimizerKind,
    pub phi_optimizer: OptimizerKind,
    pub theta_lr: f64,
    pub phi_lr: f64,
    pub weight_decay: f64,
    pub head_weight_decay: f64,
    pub phi_steps: usize,
    pub em_target: EmTarget,
    pub epochs: usize,
    pub patience: usize,
    pub fd_scale: f64,

    #[serde(alias = "seed", deserialize_with = "one_or_many")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Seeds {
        One(u64),
        Many(Vec<u64>),
    }
    Ok(match Seeds::deserialize(d)? {
        Seeds::One(s) => vec![s],
        Seeds::Many(v) => v,
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            dataset: None,
            format: GraphFormat::Json,
            synthetic: None,
            val_fraction: None,
            backbone: b.kind,
            alpha: b.alpha,
            depth: b.depth,
            hidden: b.hidden,
            repr_dim: b.repr_dim,
            dropout: b.dropout,
            encoder_layers: b.encoder_layers,
            head: HeadChoice::L2q,
            head_bias: m.head_bias,
            predict: m.predict,
            trainer: t.trainer,
            bilevel: t.bilevel,
            prior: t.prior,
            temperature: t.temperature,
            anneal: t.anneal,
            samples: t.samples,
            kl_weight: t.kl_weight,
            theta_optimizer: t.theta_optimizer,
            phi_optimizer: t.phi_optimizer,
            theta_lr: t.theta_lr,
            phi_lr: t.phi_lr,
            weight_decay: t.weight_decay,
            head_weight_decay: t.head_weight_decay,
            phi_steps: t.phi_steps,
            em_target: t.em_target,
            epochs: t.epochs,
            patience: t.patience,
            fd_scale: t.fd_scale,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                kind: self.backbone,
                depth: self.depth,
                hidden: self.hidden,
                repr_dim: self.repr_dim,
                dropout: self.dropout,
                alpha: self.alpha,
                encoder_layers: self.encoder_layers,
            },
            head: self.head.kind(),
            head_bias: self.head_bias,
            predict: self.predict,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            trainer: self.trainer,
            bilevel: self.bilevel,
            theta_optimizer: self.theta_optimizer,
            phi_optimizer: self.phi_optimizer,
            theta_lr: self.theta_lr,
            phi_lr: self.phi_lr,
            weight_decay: self.weight_decay,
            head_weight_decay: self.head_weight_decay,
            prior: self.prior,
            temperature: self.temperature,
            anneal: self.anneal.clone(),
            samples: self.samples,
            kl_weight: self.kl_weight,
            phi_steps: self.phi_steps,
            em_target: self.em_target,
            epochs: self.epochs,
            patience: self.patience,
            fd_scale: self.fd_scale,
            seed,
        }
    }

    /// Checks everything that can be checked without reading the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.dataset.is_none() && self.synthetic.is_none() {
            return Err(Error::Config(
                "either a dataset path or a synthetic spec is required".into(),
            ));
        }
        if let Some(f) = self.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("val_fraction must lie in (0,1), got {f}")));
            }
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        self.model_config().validate()?;
        let mut train = self.train_config(0);
        if self.head == HeadChoice::None {
            // The baseline ignores trainer and bilevel settings.
            train.trainer = TrainerKind::Vi;
            train.bilevel = BilevelMode::Off;
        }
        train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn seed_accepts_scalar_or_list() {
        assert_eq!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seeds, vec![3]);
        assert_eq!(RunConfig::from_json(r#"{"seeds": [1, 2]}"#).unwrap().seeds, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"depht": 3}"#), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut c = RunConfig {
            dataset: Some("g.json".into()),
            ..Default::default()
        };
        c.validate().unwrap();
        c.theta_lr = 0.0;
        assert!(c.validate().is_err());
        c.theta_lr = 0.01;
        c.dataset = None;
        assert!(c.validate().is_err());
        c.dataset = Some("g.json".into());
        c.head = HeadChoice::None;
        c.trainer = TrainerKind::Em;
        c.bilevel = BilevelMode::SecondOrder;
        c.validate().unwrap();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn head_none_has_no_head() {
        let c = RunConfig {
            head: HeadChoice::None,
            ..Default::default()
        };
        assert_eq!(c.model_config().head, None);
        assert_eq!("l2q".parse::<HeadChoice>().unwrap(), HeadChoice::L2q);
    }
}
