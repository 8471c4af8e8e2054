use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::elbo::{label_log_likelihoods, negative_elbo};
use super::ModelConfig;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::backbone::{predict, Backbone, LayerStack, PredictMode};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, CsrMatrix, Graph, Split};
use crate::head::{Head, Prior, PropagationPosterior};
use crate::tensor::Tensor;

/// A graph with its normalized adjacency and split indices.
#[derive(Clone, Debug)]
pub struct GraphData<'g> {
    pub graph: &'g Graph,
    pub adj: Arc<CsrMatrix>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Test nodes that carry a label.
    pub test: Vec<usize>,
}

impl<'g> GraphData<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        let labels = graph.labels();
        GraphData {
            graph,
            adj: normalize_adjacency(graph).shared(),
            train: graph.indices(Split::Train),
            val: graph.indices(Split::Val),
            test: graph
                .indices(Split::Test)
                .into_iter()
                .filter(|&i| labels[i].is_some())
                .collect(),
        }
    }

    pub fn nodes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub(crate) fn labels_of(&self, nodes: &[usize]) -> Result<Vec<Option<usize>>> {
        let labels = self.graph.labels();
        nodes
            .iter()
            .map(|&n| {
                labels[n]
                    .map(Some)
                    .ok_or_else(|| Error::Validation(format!("node {n} has no label")))
            })
            .collect()
    }
}

/// Tape handles for a forward pass restricted to a node subset.
#[derive(Clone, Debug)]
pub struct NodeForward {
    /// `H_0..H_K` rows of the selected nodes.
    pub stack: Vec<Var>,
    /// `log p(y_n | t_n = k)`, `M × (K+1)`.
    pub ll: Var,
    /// `log q(t_n = k)`, `M × (K+1)`; absent without a head.
    pub log_q: Option<Var>,
}

/// Backbone (θ) and optional head (φ) sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Option<Head>,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), in_dim, num_classes, &mut store, &mut rng)?;
        let head = config.head.map(|kind| {
            Head::new(
                kind,
                config.backbone.depth,
                config.backbone.repr_dim,
                config.head_bias,
                &mut store,
                &mut rng,
            )
        });
        Ok(Model {
            config: config.clone(),
            backbone,
            head,
            store,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.backbone.depth
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.head.as_ref().map(Head::param_ids).unwrap_or_default()
    }

    /// Records the forward pass and keeps only the rows in `nodes`.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        data: &GraphData<'_>,
        nodes: &[usize],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeForward> {
        let labels = data.labels_of(nodes)?;
        let labels: Vec<usize> = labels.into_iter().map(|l| l.expect("checked")).collect();
        let x = tape.constant(data.graph.features().clone());
        let full = self.backbone.forward(tape, &self.store, x, &data.adj, train, rng)?;
        let stack = full
            .iter()
            .map(|&h| tape.gather_rows(h, nodes))
            .collect::<Result<Vec<_>>>()?;
        let mut cols = Vec::with_capacity(stack.len());
        for &h in &stack {
            let lp = self.backbone.classify(tape, &self.store, h)?;
            cols.push(tape.pick_cols(lp, &labels)?);
        }
        let ll = tape.concat_cols(&cols)?;
        let log_q = match &self.head {
            Some(head) => Some(head.log_posterior(tape, &self.store, &stack)?),
            None => None,
        };
        Ok(NodeForward { stack, ll, log_q })
    }

    /// Deterministic full-graph pass with dropout disabled.
    pub fn evaluate(&self, data: &GraphData<'_>) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(data.graph.features().clone());
        let full = self
            .backbone
            .forward(&mut tape, &self.store, x, &data.adj, false, &mut rng)?;
        let mut per_depth = Vec::with_capacity(full.len());
        for &h in &full {
            let lp = self.backbone.classify(&mut tape, &self.store, h)?;
            per_depth.push(tape.value(lp).clone());
        }
        let posterior = match &self.head {
            Some(head) => {
                let lq = head.log_posterior(&mut tape, &self.store, &full)?;
                Some(PropagationPosterior::new(tape.value(lq).map(f64::exp))?)
            }
            None => None,
        };
        let stack = LayerStack::new(full.iter().map(|&h| tape.value(h).clone()).collect())?;
        Ok(Evaluation {
            per_depth,
            posterior,
            stack,
            predict: self.config.predict,
        })
    }
}

/// Outputs of a full-graph evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Class log-probabilities per depth, each `N × C`.
    pub per_depth: Vec<Tensor>,
    pub posterior: Option<PropagationPosterior>,
    pub stack: LayerStack,
    pub predict: PredictMode,
}

impl Evaluation {
    /// Class probabilities, `N × C`.
    pub fn predictions(&self) -> Result<Tensor> {
        match &self.posterior {
            Some(q) => predict(&self.per_depth, q, self.predict),
            None => Ok(self.per_depth.last().expect("depth 0 always present").map(f64::exp)),
        }
    }

    /// Exact negative ELBO over `nodes`, or the depth-`K` nll without a head.
    pub fn loss(&self, labels: &[Option<usize>], nodes: &[usize], prior: &Prior) -> Result<f64> {
        if nodes.is_empty() {
            return Err(Error::Numeric("loss over an empty node set".into()));
        }
        match &self.posterior {
            Some(q) => {
                let mut mask = vec![false; q.num_nodes()];
                for &n in nodes {
                    mask[n] = true;
                }
                Ok(negative_elbo(&self.per_depth, q, None, labels, &mask, prior)?.total)
            }
            None => {
                let last = std::slice::from_ref(self.per_depth.last().expect("depth 0 always present"));
                let ll = label_log_likelihoods(last, labels, nodes)?;
                Ok(-ll.sum() / nodes.len() as f64)
            }
        }
    }

    /// Per-depth label log-likelihoods of `nodes`, `M × (K+1)`.
    pub fn log_likelihoods(&self, labels: &[Option<usize>], nodes: &[usize]) -> Result<Tensor> {
        label_log_likelihoods(&self.per_depth, labels, nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_synthetic, SyntheticSpec};
    use crate::head::HeadKind;

    fn small() -> (Graph, ModelConfig) {
        let g = make_synthetic(&SyntheticSpec::two_block(1)).unwrap().graph;
        let mut cfg = ModelConfig::default();
        cfg.backbone.depth = 3;
        cfg.backbone.hidden = 8;
        cfg.backbone.repr_dim = 8;
        (g, cfg)
    }

    #[test]
    fn evaluation_shapes() {
        let (g, cfg) = small();
        let data = GraphData::new(&g);
        let m = Model::new(&cfg, g.feature_dim(), g.num_classes(), 0).unwrap();
        let e = m.evaluate(&data).unwrap();
        assert_eq!(e.per_depth.len(), 4);
        assert_eq!(e.posterior.as_ref().unwrap().probs().shape(), (g.num_nodes(), 4));
        let p = e.predictions().unwrap();
        for r in p.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(e.loss(g.labels(), &data.train, &Prior::Uniform).unwrap().is_finite());
    }

    #[test]
    fn node_forward_matches_evaluation() {
        let (g, mut cfg) = small();
        cfg.head = Some(HeadKind::L2s);
        let data = GraphData::new(&g);
        let m = Model::new(&cfg, g.feature_dim(), g.num_classes(), 4).unwrap();
        let e = m.evaluate(&data).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = &data.val[..5];
        let f = m.forward_nodes(&mut tape, &data, nodes, false, &mut rng).unwrap();
        let ll = e.log_likelihoods(g.labels(), nodes).unwrap();
        assert_eq!(tape.value(f.ll), &ll);
        let lq = tape.value(f.log_q.unwrap());
        for (i, &n) in nodes.iter().enumerate() {
            for k in 0..4 {
                let q = e.posterior.as_ref().unwrap().row(n)[k];
                assert!((lq.get(i, k).exp() - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn headless_model_predicts_from_last_depth() {
        let (g, mut cfg) = small();
        cfg.head = None;
        let data = GraphData::new(&g);
        let m = Model::new(&cfg, g.feature_dim(), g.num_classes(), 0).unwrap();
        assert!(m.phi_ids().is_empty());
        let e = m.evaluate(&data).unwrap();
        assert_eq!(e.predictions().unwrap(), e.per_depth[3].map(f64::exp));
    }
}
