//! GNN encoders exposing every intermediate propagation depth.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, NormalizedAdjacency};
use crate::head::PropagationPosterior;
use crate::tensor::{argmax_first, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Appnp,
    Gcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Maximum propagation depth K.
    pub depth: usize,
    pub hidden: usize,
    /// Representation size D of every H_k.
    pub repr_dim: usize,
    pub dropout: f64,
    /// Teleport probability of the APPNP recursion.
    pub alpha: f64,
    /// Number of linear layers in the APPNP feature encoder (1 or more).
    pub encoder_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Appnp,
            depth: 10,
            hidden: 64,
            repr_dim: 64,
            dropout: 0.5,
            alpha: 0.1,
            encoder_layers: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "teleport alpha must lie in (0,1], got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.repr_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("hidden and representation sizes must be positive".into()));
        }
        if self.kind == BackboneKind::Appnp && self.encoder_layers == 0 {
            return Err(Error::Config("the APPNP encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Representations `H_0..H_K` of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Tensor>,
}

impl LayerStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::dim("LayerStack", "at least H_0", 0));
        };
        if let Some(bad) = layers.iter().find(|l| l.shape() != first.shape()) {
            return Err(Error::dim(
                "LayerStack",
                format!("{:?}", first.shape()),
                format!("{:?}", bad.shape()),
            ));
        }
        Ok(LayerStack { layers })
    }

    /// The maximum depth K (one less than the number of layers).
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, k: usize) -> &Tensor {
        &self.layers[k]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }
}

/// Trainable backbone parameters (θ), registered in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    encoder: Vec<(ParamId, ParamId)>,
    gcn_layers: Vec<ParamId>,
    classifier: (ParamId, ParamId),
}

impl Backbone {
    pub fn new(
        config: BackboneConfig,
        in_dim: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.repr_dim;
        let mut encoder = Vec::new();
        let mut gcn_layers = Vec::new();
        match config.kind {
            BackboneKind::Appnp => {
                let mut dims = vec![in_dim];
                dims.extend(std::iter::repeat_n(config.hidden, config.encoder_layers - 1));
                dims.push(d);
                for (i, w) in dims.windows(2).enumerate() {
                    let weight = store.add_glorot(format!("encoder.{i}.weight"), w[0], w[1], rng);
                    let bias = store.add(format!("encoder.{i}.bias"), Tensor::zeros(1, w[1]));
                    encoder.push((weight, bias));
                }
            }
            BackboneKind::Gcn => {
                let w0 = store.add_glorot("gcn.0.weight", in_dim, d, rng);
                let b0 = store.add("gcn.0.bias", Tensor::zeros(1, d));
                encoder.push((w0, b0));
                for k in 1..=config.depth {
                    gcn_layers.push(store.add_glorot(format!("gcn.{k}.weight"), d, d, rng));
                }
            }
        }
        let cw = store.add_glorot("classifier.weight", d, num_classes, rng);
        let cb = store.add("classifier.bias", Tensor::zeros(1, num_classes));
        Ok(Backbone {
            config,
            encoder,
            gcn_layers,
            classifier: (cw, cb),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend(&self.gcn_layers);
        ids.extend([self.classifier.0, self.classifier.1]);
        ids
    }

    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        self.classifier
    }

    /// `H_0`: the feature encoder (APPNP) or input projection (GCN).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool, rng: &mut impl Rng) -> Result<Var> {
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, &(w, b)) in self.encoder.iter().enumerate() {
            h = tape.dropout(h, self.config.dropout, rng, train)?;
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.matmul(h, wv)?;
            h = tape.add_row(h, bv)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Full stack `H_0..H_K` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        adj: &Arc<CsrMatrix>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        let h0 = self.encode(tape, store, x, train, rng)?;
        match self.config.kind {
            BackboneKind::Appnp => appnp_on_tape(tape, h0, adj, self.config.depth, self.config.alpha),
            BackboneKind::Gcn => {
                let mut layers = vec![h0];
                let mut h = h0;
                for &w in &self.gcn_layers {
                    h = tape.dropout(h, self.config.dropout, rng, train)?;
                    let agg = tape.aggregate(adj, h)?;
                    let wv = tape.param(store, w);
                    let z = tape.matmul(agg, wv)?;
                    h = tape.relu(z)?;
                    layers.push(h);
                }
                Ok(layers)
            }
        }
    }

    /// Per-node class log-probabilities from one depth's representation.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let w = tape.param(store, self.classifier.0);
        let b = tape.param(store, self.classifier.1);
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        tape.row_log_softmax(z)
    }
}

/// `H_k = (1−α)·Â·H_{k−1} + α·H_0` for `k = 1..K`.
pub fn appnp_on_tape(tape: &mut Tape, h0: Var, adj: &Arc<CsrMatrix>, depth: usize, alpha: f64) -> Result<Vec<Var>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("teleport alpha must lie in (0,1], got {alpha}")));
    }
    let teleport = tape.scale(h0, alpha)?;
    let mut layers = vec![h0];
    let mut h = h0;
    for _ in 0..depth {
        let agg = tape.aggregate(adj, h)?;
        let agg = tape.scale(agg, 1.0 - alpha)?;
        h = tape.add(agg, teleport)?;
        layers.push(h);
    }
    Ok(layers)
}

/// Value-level APPNP propagation of a fixed `H_0`.
pub fn propagate_appnp(h0: &Tensor, adj: &NormalizedAdjacency, depth: usize, alpha: f64) -> Result<LayerStack> {
    if h0.rows() != adj.num_nodes() {
        return Err(Error::dim("propagate_appnp", adj.num_nodes(), h0.rows()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h0.clone());
    let vars = appnp_on_tape(&mut tape, h, &adj.shared(), depth, alpha)?;
    LayerStack::new(vars.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Value-level GCN stack: `H_0 = X·W_0 + b_0`, `H_k = relu(Â·H_{k−1}·W_k)`.
pub fn propagate_gcn(
    x: &Tensor,
    adj: &NormalizedAdjacency,
    input: (&Tensor, &Tensor),
    weights: &[Tensor],
    depth: usize,
) -> Result<LayerStack> {
    if weights.len() != depth {
        return Err(Error::Config(format!(
            "GCN with depth {depth} needs {depth} layer weights, got {}",
            weights.len()
        )));
    }
    let mut h = x.matmul(input.0)?;
    let bias = input.1;
    if bias.shape() != (1, h.cols()) {
        return Err(Error::dim(
            "propagate_gcn",
            format!("(1, {})", h.cols()),
            format!("{:?}", bias.shape()),
        ));
    }
    for r in 0..h.rows() {
        for (v, b) in h.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    let mut layers = vec![h.clone()];
    for w in weights {
        h = adj.matrix().spmm(&h)?.matmul(w)?.map(|v| v.max(0.0));
        layers.push(h.clone());
    }
    LayerStack::new(layers)
}

/// Value-level classifier: `row_log_softmax(H·W + b)`.
pub fn classify(h: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let z = tape.matmul(hv, w)?;
    let z = tape.add_row(z, b)?;
    let out = tape.row_log_softmax(z)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// Mixture of per-depth predictions weighted by the posterior.
    Expected,
    /// Prediction of the single most probable depth (ties go to the shallowest).
    Argmax,
}

/// Class probabilities per node given per-depth class log-probabilities.
pub fn predict(per_depth_log_probs: &[Tensor], posterior: &PropagationPosterior, mode: PredictMode) -> Result<Tensor> {
    let q = posterior.probs();
    if per_depth_log_probs.len() != q.cols() {
        return Err(Error::dim(
            "predict",
            format!("{} depths", q.cols()),
            per_depth_log_probs.len(),
        ));
    }
    let (n, c) = per_depth_log_probs[0].shape();
    if q.rows() != n {
        return Err(Error::dim("predict", format!("{n} posterior rows"), q.rows()));
    }
    let mut out = Tensor::zeros(n, c);
    for i in 0..n {
        let row = q.row(i);
        match mode {
            PredictMode::Expected => {
                for (k, lp) in per_depth_log_probs.iter().enumerate() {
                    if row[k] == 0.0 {
                        continue;
                    }
                    for (o, &l) in out.row_mut(i).iter_mut().zip(lp.row(i)) {
                        *o += row[k] * l.exp();
                    }
                }
            }
            PredictMode::Argmax => {
                let k = argmax_first(row);
                for (o, &l) in out.row_mut(i).iter_mut().zip(per_depth_log_probs[k].row(i)) {
                    *o = l.exp();
                }
            }
        }
    }
    Ok(out)
}
