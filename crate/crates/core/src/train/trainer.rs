use serde::{Deserialize, Serialize};

use super::bilevel::{bilevel_step, step_rng};
use super::elbo::{elbo_on_tape, ElboBreakdown, Selection};
use super::em::em_step;
use super::model::{Evaluation, GraphData, Model};
use super::{BilevelMode, TrainConfig, TrainerKind};
use crate::analysis::accuracy_on;
use crate::autodiff::checkpoint::{restore, snapshot};
use crate::autodiff::{Optimizer, Tape};
use crate::error::{Error, Result};
use crate::head::sample_gumbel;
use crate::util::Stopwatch;

pub(crate) const DROPOUT_STREAM: u64 = 1;
pub(crate) const TRAIN_NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(TrainHistory { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Epoch whose parameters were restored, if validation accuracy was tracked.
    pub best_epoch: Option<usize>,
    pub evaluation: Evaluation,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// One joint step of backbone and head on the relaxed training ELBO.
pub fn vi_step(
    model: &mut Model,
    data: &GraphData<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    theta_opt: &mut Optimizer,
    phi_opt: &mut Optimizer,
) -> Result<ElboBreakdown> {
    let cols = model.depth() + 1;
    let mut noise_rng = step_rng(cfg.seed, epoch, TRAIN_NOISE_STREAM);
    let noise: Vec<_> = (0..cfg.samples)
        .map(|_| sample_gumbel(data.train.len(), cols, &mut noise_rng))
        .collect();
    let mut rng = step_rng(cfg.seed, epoch, DROPOUT_STREAM);
    let mut tape = Tape::new();
    let fwd = model.forward_nodes(&mut tape, data, &data.train, true, &mut rng)?;
    let log_q = fwd
        .log_q
        .ok_or_else(|| Error::Unsupported("the variational trainer needs a propagation head".into()))?;
    let selection = Selection::Sample {
        noise: &noise,
        temperature: cfg.temperature_at(epoch),
    };
    let elbo = elbo_on_tape(&mut tape, fwd.ll, log_q, selection, &cfg.prior, cfg.kl_weight)?;
    let out = elbo.values(&tape);
    model.store.zero_grad();
    tape.backward(elbo.total, &mut model.store)?;
    theta_opt.step(&mut model.store)?;
    phi_opt.step(&mut model.store)?;
    Ok(out)
}

/// Depth-`K` cross-entropy step for a model without a head.
fn baseline_step(
    model: &mut Model,
    data: &GraphData<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    theta_opt: &mut Optimizer,
) -> Result<f64> {
    let mut rng = step_rng(cfg.seed, epoch, DROPOUT_STREAM);
    let mut tape = Tape::new();
    let fwd = model.forward_nodes(&mut tape, data, &data.train, true, &mut rng)?;
    let last = vec![model.depth(); data.train.len()];
    let ll = tape.pick_cols(fwd.ll, &last)?;
    let mean = tape.mean(ll)?;
    let loss = tape.scale(mean, -1.0)?;
    let value = tape.scalar(loss);
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    theta_opt.step(&mut model.store)?;
    Ok(value)
}

struct Scores {
    train_loss: f64,
    val_loss: Option<f64>,
    train_acc: f64,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
}

fn score(eval: &Evaluation, data: &GraphData<'_>, cfg: &TrainConfig) -> Result<Scores> {
    let labels = data.graph.labels();
    let pred = eval.predictions()?;
    let opt_acc = |nodes: &[usize]| -> Result<Option<f64>> {
        if nodes.is_empty() {
            Ok(None)
        } else {
            accuracy_on(&pred, labels, nodes).map(Some)
        }
    };
    Ok(Scores {
        train_loss: eval.loss(labels, &data.train, &cfg.prior)?,
        val_loss: if data.val.is_empty() {
            None
        } else {
            Some(eval.loss(labels, &data.val, &cfg.prior)?)
        },
        train_acc: accuracy_on(&pred, labels, &data.train)?,
        val_acc: opt_acc(&data.val)?,
        test_acc: opt_acc(&data.test)?,
    })
}

/// Full-batch training with early stopping on validation accuracy.
///
/// An epoch counts as an improvement when validation accuracy rises, or stays
/// equal while the validation loss falls.
/// Losses in the history are exact negative ELBOs (or the depth-`K` nll
/// without a head) in evaluation mode. The parameters of the best validation
/// epoch are restored before returning.
pub fn train(model: &mut Model, data: &GraphData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("the training mask selects no nodes".into()));
    }
    let has_head = model.head.is_some();
    if has_head && cfg.bilevel != BilevelMode::Off && data.val.is_empty() {
        return Err(Error::Config(
            "bilevel training needs a non-empty validation set".into(),
        ));
    }
    let mut theta_opt = Optimizer::new(cfg.theta_optimizer, model.theta_ids(), cfg.theta_lr, cfg.weight_decay)?;
    let mut phi_opt = Optimizer::new(cfg.phi_optimizer, model.phi_ids(), cfg.phi_lr, cfg.head_weight_decay)?;
    let watch = Stopwatch::start();
    let mut history = TrainHistory::default();
    let mut best: Option<((f64, f64), usize, Vec<_>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        match (has_head, cfg.trainer) {
            (false, _) => {
                baseline_step(model, data, cfg, epoch, &mut theta_opt)?;
            }
            (true, TrainerKind::Vi) => {
                bilevel_step(model, data, cfg, epoch, &mut theta_opt, &mut phi_opt)?;
            }
            (true, TrainerKind::Em) => {
                let mut rng = step_rng(cfg.seed, epoch, DROPOUT_STREAM);
                em_step(model, data, cfg, &mut theta_opt, &mut phi_opt, &mut rng)?;
            }
        }
        let eval = model.evaluate(data)?;
        let s = score(&eval, data, cfg)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: s.train_loss,
            val_loss: s.val_loss,
            val_acc: s.val_acc,
            test_acc: s.test_acc,
            seconds: watch.seconds(),
        });
        if let (Some(acc), Some(loss)) = (s.val_acc, s.val_loss) {
            let improved = best
                .as_ref()
                .is_none_or(|(b, _, _)| acc > b.0 || (acc == b.0 && loss < b.1));
            if improved {
                best = Some(((acc, loss), epoch, snapshot(&model.store)));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, arrays)) => {
            restore(&mut model.store, &arrays)?;
            Some(epoch)
        }
        None => None,
    };
    let evaluation = model.evaluate(data)?;
    let s = score(&evaluation, data, cfg)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        evaluation,
        train_acc: s.train_acc,
        val_acc: s.val_acc,
        test_acc: s.test_acc,
        train_loss: s.train_loss,
        val_loss: s.val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_synthetic, SyntheticSpec};
    use crate::train::ModelConfig;

    fn setup() -> (crate::graph::Graph, ModelConfig, TrainConfig) {
        let g = make_synthetic(&SyntheticSpec::two_block(2)).unwrap().graph;
        let mut m = ModelConfig::default();
        m.backbone.depth = 2;
        m.backbone.hidden = 8;
        m.backbone.repr_dim = 8;
        let t = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        (g, m, t)
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let (g, m, mut t) = setup();
        t.epochs = 0;
        let data = GraphData::new(&g);
        let mut model = Model::new(&m, g.feature_dim(), g.num_classes(), 0).unwrap();
        let before = model.store.clone();
        let out = train(&mut model, &data, &t).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(model.store, before);
    }

    #[test]
    fn history_round_trips() {
        let (g, m, t) = setup();
        let data = GraphData::new(&g);
        let mut model = Model::new(&m, g.feature_dim(), g.num_classes(), 0).unwrap();
        let out = train(&mut model, &data, &t).unwrap();
        assert_eq!(out.history.len(), 3);
        let text = out.history.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainHistory::from_jsonl(&text).unwrap().len(), 3);
    }

    #[test]
    fn bilevel_without_validation_is_a_config_error() {
        let (g, m, t) = setup();
        let n = g.num_nodes();
        let g = g
            .with_masks(
                g.mask(crate::graph::Split::Train).to_vec(),
                vec![false; n],
                vec![false; n],
            )
            .unwrap();
        let data = GraphData::new(&g);
        let mut model = Model::new(&m, g.feature_dim(), g.num_classes(), 0).unwrap();
        assert!(matches!(train(&mut model, &data, &t), Err(Error::Config(_))));
    }
}
