use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Split};
use crate::error::{Error, Result};

/// Moves a stratified `fraction` of each class's training nodes into the validation mask.
pub fn carve_validation(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0,1), got {fraction}"
        )));
    }
    if g.mask(Split::Val).iter().any(|&m| m) {
        return Err(Error::Config("graph already has validation nodes".into()));
    }
    let mut by_class = vec![Vec::new(); g.num_classes()];
    for i in g.indices(Split::Train) {
        let c = g.labels()[i].expect("train nodes are labeled");
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = g.mask(Split::Train).to_vec();
    let mut val = vec![false; g.num_nodes()];
    for (c, nodes) in by_class.iter_mut().enumerate() {
        if nodes.is_empty() {
            continue;
        }
        let take = (fraction * nodes.len() as f64).round() as usize;
        if nodes.len() < 2 || take == 0 || take >= nodes.len() {
            return Err(Error::Config(format!(
                "class {c} has {} training nodes; carving {fraction} leaves no room for both splits",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        for &i in &nodes[..take] {
            train[i] = false;
            val[i] = true;
        }
    }
    g.with_masks(train, val, g.mask(Split::Test).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn labeled(per_class: usize, classes: usize) -> Graph {
        let n = per_class * classes;
        let labels = (0..n).map(|i| Some(i % classes)).collect();
        Graph::new(
            Tensor::zeros(n, 1),
            labels,
            [],
            vec![true; n],
            vec![false; n],
            vec![false; n],
        )
        .unwrap()
    }

    #[test]
    fn stratified_counts() {
        let g = carve_validation(&labeled(20, 3), 0.25, 7).unwrap();
        for c in 0..3 {
            let count = |s| g.indices(s).iter().filter(|&&i| g.labels()[i] == Some(c)).count();
            assert_eq!(count(Split::Train), 15);
            assert_eq!(count(Split::Val), 5);
        }
    }

    #[test]
    fn extreme_fraction_rejected() {
        assert!(matches!(
            carve_validation(&labeled(20, 2), 0.999, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let g = labeled(10, 2);
        assert_eq!(
            carve_validation(&g, 0.3, 5).unwrap(),
            carve_validation(&g, 0.3, 5).unwrap()
        );
    }
}
