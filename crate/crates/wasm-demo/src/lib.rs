//! Browser bindings for three small interactive demos.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use l2p::analysis::{accuracy_on, average_posterior};
use l2p::graph::{make_synthetic, Split, SyntheticSpec};
use l2p::head::{gumbel_softmax_sample, stick_break, PropagationPosterior, QuitProbabilities};
use l2p::tensor::Tensor;
use l2p::train::{train, GraphData, Model, ModelConfig, TrainConfig};

fn js_err(e: l2p::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Stick-breaking depth distribution from quit logits, one per depth below `K`.
pub fn quit_distribution(logits: &[f64]) -> l2p::Result<Vec<f64>> {
    let alpha = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    let quit = QuitProbabilities::new(Tensor::new(1, logits.len(), alpha)?)?;
    Ok(stick_break(&quit).row(0).to_vec())
}

/// One relaxed Gumbel-Softmax draw from `probs` at the given temperature.
pub fn relaxed_sample(probs: &[f64], temperature: f64, seed: u64) -> l2p::Result<Vec<f64>> {
    let q = PropagationPosterior::new(Tensor::new(1, probs.len(), probs.to_vec())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gumbel_softmax_sample(&q, temperature, &mut rng)?.probs.row(0).to_vec())
}

/// Result of [`train_two_block`].
#[derive(Clone, Debug, PartialEq)]
pub struct DemoRun {
    pub test_accuracy: f64,
    pub block_a: Vec<f64>,
    pub block_b: Vec<f64>,
}

/// Trains a small model on a two-block graph and averages the posterior per block.
///
/// Block A is labelled by its own features and wired with the given homophily;
/// block B is labelled by its 2-hop neighborhood.
pub fn train_two_block(homophily_a: f64, depth: usize, epochs: usize, seed: u64) -> l2p::Result<DemoRun> {
    let mut spec = SyntheticSpec::two_block(seed);
    for b in &mut spec.blocks {
        b.nodes = 160;
    }
    spec.blocks[0].homophily = homophily_a;
    let sg = make_synthetic(&spec)?;
    let g = &sg.graph;
    let data = GraphData::new(g);
    let mut mc = ModelConfig::default();
    mc.backbone.depth = depth;
    mc.backbone.alpha = 0.02;
    mc.backbone.dropout = 0.0;
    let tc = TrainConfig {
        temperature: 1.0,
        kl_weight: 0.1,
        phi_lr: 0.05,
        epochs,
        patience: epochs,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&mc, g.feature_dim(), g.num_classes(), seed)?;
    let out = train(&mut model, &data, &tc)?;
    let q = out.evaluation.posterior.as_ref().expect("model has a head");
    let test = g.indices(Split::Test);
    let of_block = |b: usize| -> Vec<usize> { test.iter().copied().filter(|&i| sg.block[i] == b).collect() };
    let pred = out.evaluation.predictions()?;
    Ok(DemoRun {
        test_accuracy: accuracy_on(&pred, g.labels(), &test)?,
        block_a: average_posterior(q, Some(&of_block(0)))?,
        block_b: average_posterior(q, Some(&of_block(1)))?,
    })
}

#[wasm_bindgen(js_name = quitDistribution)]
pub fn quit_distribution_js(logits: Vec<f64>) -> Result<Vec<f64>, JsError> {
    quit_distribution(&logits).map_err(js_err)
}

#[wasm_bindgen(js_name = relaxedSample)]
pub fn relaxed_sample_js(probs: Vec<f64>, temperature: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    relaxed_sample(&probs, temperature, u64::from(seed)).map_err(js_err)
}

/// Flattened as `[test_accuracy, block A posterior.., block B posterior..]`.
#[wasm_bindgen(js_name = trainTwoBlock)]
pub fn train_two_block_js(homophily_a: f64, depth: u32, epochs: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    let run = train_two_block(homophily_a, depth as usize, epochs as usize, u64::from(seed)).map_err(js_err)?;
    let mut out = vec![run.test_accuracy];
    out.extend(run.block_a);
    out.extend(run.block_b);
    Ok(out)
}
