//! Planted-partition benchmark graphs with a known best propagation depth per block.
//!
//! A block with hop target 0 draws a planted class per node, places a strong
//! bump of height `signal` on that class's feature coordinate and then labels
//! the node by the argmax of its class coordinates, so the label is a
//! deterministic function of the node's own features. Its edges follow the
//! block's homophily with respect to those labels.
//!
//! A block with hop target `h ≥ 1` draws planted classes and homophilous
//! edges in the same way, but its features carry only `signal` (zero by
//! default, i.e. pure noise) toward the planted class. Each node's label is
//! the majority planted class inside its closed `h`-hop neighborhood within
//! the block (ties resolved toward the node's own planted class).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub nodes: usize,
    /// Probability that a generated edge joins two nodes of the same class.
    pub homophily: f64,
    /// Propagation depth at which this block becomes predictable.
    pub hop: usize,
    /// Height of the class bump in the node features.
    pub signal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blocks: Vec<BlockSpec>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub avg_degree: usize,
    /// Largest admissible hop target.
    pub max_hop: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two 300-node blocks: a heterophilous features-only block and a homophilous 2-hop block.
    pub fn two_block(seed: u64) -> Self {
        SyntheticSpec {
            blocks: vec![
                BlockSpec {
                    nodes: 300,
                    homophily: 0.0,
                    hop: 0,
                    signal: 5.0,
                },
                BlockSpec {
                    nodes: 300,
                    homophily: 0.9,
                    hop: 2,
                    signal: 0.0,
                },
            ],
            feature_dim: 8,
            num_classes: 4,
            avg_degree: 8,
            max_hop: 2,
            train_fraction: 0.3,
            val_fraction: 0.2,
            seed,
        }
    }

    /// A single block; `heterophily` selects the features-only, cross-class wiring variant.
    pub fn single_block(nodes: usize, heterophily: bool, seed: u64) -> Self {
        let block = if heterophily {
            BlockSpec {
                nodes,
                homophily: 0.0,
                hop: 0,
                signal: 5.0,
            }
        } else {
            BlockSpec {
                nodes,
                homophily: 0.9,
                hop: 2,
                signal: 0.0,
            }
        };
        SyntheticSpec {
            blocks: vec![block],
            ..Self::two_block(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one block".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic spec needs at least two classes".into()));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::Config(format!(
                "feature_dim {} must be at least num_classes {}",
                self.feature_dim, self.num_classes
            )));
        }
        let fr_ok = |f: f64| (0.0..1.0).contains(&f);
        if !fr_ok(self.train_fraction) || !fr_ok(self.val_fraction) || self.train_fraction + self.val_fraction >= 1.0 {
            return Err(Error::Config(
                "train/val fractions must be non-negative and sum below 1".into(),
            ));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.hop > self.max_hop {
                return Err(Error::Config(format!(
                    "block {b}: hop target {} exceeds maximum depth {}",
                    block.hop, self.max_hop
                )));
            }
            if !(0.0..=1.0).contains(&block.homophily) {
                return Err(Error::Config(format!(
                    "block {b}: homophily {} outside [0,1]",
                    block.homophily
                )));
            }
            let needed = self.num_classes * (self.avg_degree + 1);
            if block.nodes < needed {
                return Err(Error::Config(format!(
                    "block {b}: {} nodes cannot host a {}-class neighborhood of degree {} (need {needed})",
                    block.nodes, self.num_classes, self.avg_degree
                )));
            }
            if !block.signal.is_finite() {
                return Err(Error::Config(format!("block {b}: signal must be finite")));
            }
        }
        Ok(())
    }
}

/// A generated graph plus each node's block index.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGraph {
    pub graph: Graph,
    pub block: Vec<usize>,
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n: usize = spec.blocks.iter().map(|b| b.nodes).sum();
    let c = spec.num_classes;
    let mut features = Tensor::zeros(n, spec.feature_dim);
    let mut labels = vec![0usize; n];
    let mut block_of = vec![0usize; n];
    let mut edges = Vec::new();

    let mut offset = 0;
    for (b, block) in spec.blocks.iter().enumerate() {
        let range = offset..offset + block.nodes;
        let mut planted = vec![0usize; block.nodes];
        for (j, node) in range.clone().enumerate() {
            block_of[node] = b;
            planted[j] = j % c;
            let row = features.row_mut(node);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            row[planted[j]] += block.signal;
            if block.hop == 0 {
                planted[j] = crate::tensor::argmax_first(&row[..c]);
            }
        }

        let mut by_class = vec![Vec::new(); c];
        for (j, &p) in planted.iter().enumerate() {
            by_class[p].push(j);
        }
        let mut local = Vec::new();
        let half = spec.avg_degree.div_ceil(2);
        for j in 0..block.nodes {
            for _ in 0..half {
                let same = rng.random::<f64>() < block.homophily;
                let pool: Vec<usize> = if same {
                    vec![planted[j]]
                } else {
                    (0..c).filter(|&k| k != planted[j]).collect()
                };
                let class = *pool.choose(&mut rng).expect("at least two classes");
                let candidates = &by_class[class];
                if candidates.len() < 2 && class == planted[j] {
                    continue;
                }
                let mut partner = *candidates.choose(&mut rng).expect("non-empty class");
                while partner == j {
                    partner = *candidates.choose(&mut rng).expect("non-empty class");
                }
                local.push((j, partner));
            }
        }

        if block.hop == 0 {
            for j in 0..block.nodes {
                labels[offset + j] = planted[j];
            }
        } else {
            let mut adj = vec![Vec::new(); block.nodes];
            for &(u, v) in &local {
                adj[u].push(v);
                adj[v].push(u);
            }
            for j in 0..block.nodes {
                labels[offset + j] = majority_within(j, block.hop, &adj, &planted, c);
            }
        }
        edges.extend(local.into_iter().map(|(u, v)| (u + offset, v + offset)));
        offset += block.nodes;
    }

    let (train, val, test) = stratified_masks(&labels, &block_of, spec, &mut rng);
    let graph = Graph::new(
        features,
        labels.into_iter().map(Some).collect(),
        edges,
        train,
        val,
        test,
    )?;
    Ok(SyntheticGraph { graph, block: block_of })
}

fn majority_within(start: usize, hops: usize, adj: &[Vec<usize>], planted: &[usize], classes: usize) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut frontier = vec![start];
    seen[start] = true;
    let mut counts = vec![0usize; classes];
    counts[planted[start]] += 1;
    for _ in 0..hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    counts[planted[v]] += 1;
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    let best = *counts.iter().max().expect("classes > 0");
    if counts[planted[start]] == best {
        planted[start]
    } else {
        counts.iter().position(|&k| k == best).expect("max exists")
    }
}

fn stratified_masks(
    labels: &[usize],
    block_of: &[usize],
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    use rand::seq::SliceRandom;
    let n = labels.len();
    let (mut train, mut val, mut test) = (vec![false; n], vec![false; n], vec![false; n]);
    for b in 0..spec.blocks.len() {
        for class in 0..spec.num_classes {
            let mut group: Vec<usize> = (0..n).filter(|&i| block_of[i] == b && labels[i] == class).collect();
            group.shuffle(rng);
            let n_train = (spec.train_fraction * group.len() as f64).round() as usize;
            let n_val = (spec.val_fraction * group.len() as f64).round() as usize;
            for (pos, &i) in group.iter().enumerate() {
                if pos < n_train {
                    train[i] = true;
                } else if pos < n_train + n_val {
                    val[i] = true;
                } else {
                    test[i] = true;
                }
            }
        }
    }
    (train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::save_json;

    #[test]
    fn deterministic_bytes() {
        let a = make_synthetic(&SyntheticSpec::two_block(11)).unwrap();
        let b = make_synthetic(&SyntheticSpec::two_block(11)).unwrap();
        assert_eq!(save_json(&a.graph).unwrap(), save_json(&b.graph).unwrap());
    }

    #[test]
    fn heterophilous_block_mostly_cross_class() {
        let s = make_synthetic(&SyntheticSpec::two_block(3)).unwrap();
        let labels = s.graph.labels();
        let in_a: Vec<_> = s
            .graph
            .edges()
            .iter()
            .filter(|&&(u, v)| s.block[u] == 0 && s.block[v] == 0)
            .collect();
        let same = in_a.iter().filter(|&&&(u, v)| labels[u] == labels[v]).count();
        assert!(!in_a.is_empty());
        assert!((same as f64) / (in_a.len() as f64) < 0.5);
    }

    #[test]
    fn hop_beyond_max_rejected() {
        let mut spec = SyntheticSpec::two_block(1);
        spec.blocks[1].hop = 3;
        assert!(matches!(make_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_block_rejected() {
        let mut spec = SyntheticSpec::two_block(1);
        spec.blocks[0].nodes = 5;
        assert!(matches!(make_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn features_only_block_is_label_function_of_features() {
        let s = make_synthetic(&SyntheticSpec::two_block(5)).unwrap();
        for i in 0..s.graph.num_nodes() {
            if s.block[i] == 0 {
                let row = s.graph.features().row(i);
                assert_eq!(
                    s.graph.labels()[i],
                    Some(crate::tensor::argmax_first(&row[..s.graph.num_classes()]))
                );
            }
        }
    }
}
