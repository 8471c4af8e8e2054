//! Multi-seed runs, layer sweeps and their on-disk reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{average_posterior, export_posteriors, graph_correlation, mean_std, parse_posteriors};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{carve_validation, load_graph, make_synthetic, Graph, Split};
use crate::head::PropagationPosterior;
use crate::train::{train, GraphData, Model, TrainOutcome};
use crate::util::{write_atomic, Stopwatch};

/// Reads or generates the graph named by the config and carves a validation split if asked.
pub fn load_dataset(cfg: &RunConfig) -> Result<Graph> {
    let g = match (&cfg.synthetic, &cfg.dataset) {
        (Some(spec), _) => make_synthetic(spec)?.graph,
        (None, Some(path)) => load_graph(path, cfg.format)?,
        (None, None) => {
            return Err(Error::Config(
                "either a dataset path or a synthetic spec is required".into(),
            ))
        }
    };
    match cfg.val_fraction {
        Some(f) if g.indices(Split::Val).is_empty() => carve_validation(&g, f, 0),
        _ => Ok(g),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent below two seeds.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Summary { mean, std })
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config: RunConfig,
    pub per_seed: Vec<SeedResult>,
    pub test_acc: Option<Summary>,
    pub val_acc: Option<Summary>,
}

/// Contents of `timing.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_seconds: f64,
    pub per_seed_seconds: Vec<(u64, f64)>,
}

/// One trained seed.
pub struct SeedRun {
    pub result: SeedResult,
    pub model: Model,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

pub fn train_seed(cfg: &RunConfig, graph: &Graph, seed: u64) -> Result<SeedRun> {
    let watch = Stopwatch::start();
    let data = GraphData::new(graph);
    let mut model = Model::new(&cfg.model_config(), graph.feature_dim(), graph.num_classes(), seed)?;
    let outcome = train(&mut model, &data, &cfg.train_config(seed))?;
    let result = SeedResult {
        seed,
        train_acc: outcome.train_acc,
        val_acc: outcome.val_acc,
        test_acc: outcome.test_acc,
        train_loss: outcome.train_loss,
        val_loss: outcome.val_loss,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
    };
    Ok(SeedRun {
        result,
        model,
        outcome,
        seconds: watch.seconds(),
    })
}

/// Trains every seed, fanning out over threads when the `parallel` feature is on.
pub fn run_seeds(cfg: &RunConfig, graph: &Graph) -> Result<Vec<SeedRun>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cfg.seeds.par_iter().map(|&s| train_seed(cfg, graph, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cfg.seeds.iter().map(|&s| train_seed(cfg, graph, s)).collect()
    }
}

pub fn summarize(cfg: &RunConfig, runs: &[SeedRun]) -> MetricsReport {
    let per_seed: Vec<SeedResult> = runs.iter().map(|r| r.result.clone()).collect();
    let tests: Vec<f64> = per_seed.iter().filter_map(|r| r.test_acc).collect();
    let vals: Vec<f64> = per_seed.iter().filter_map(|r| r.val_acc).collect();
    MetricsReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        per_seed,
        test_acc: Summary::of(&tests),
        val_acc: Summary::of(&vals),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains all seeds and writes `metrics.json`, `timing.json` and one history file per seed.
pub fn run(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let watch = Stopwatch::start();
    let graph = load_dataset(cfg)?;
    let runs = run_seeds(cfg, &graph)?;
    let report = summarize(cfg, &runs);
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    for r in &runs {
        let name = format!("history_seed{}.jsonl", r.result.seed);
        write_atomic(&dir.join(name), r.outcome.history.to_jsonl()?.as_bytes())?;
    }
    write_atomic(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let timing = TimingReport {
        total_seconds: watch.seconds(),
        per_seed_seconds: runs.iter().map(|r| (r.result.seed, r.seconds)).collect(),
    };
    write_atomic(
        &dir.join("timing.json"),
        serde_json::to_string_pretty(&timing)?.as_bytes(),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Test accuracy across seeds for each maximum depth in `depths`.
pub fn layer_sweep(cfg: &RunConfig, depths: &[usize]) -> Result<Vec<SweepRow>> {
    if depths.is_empty() {
        return Err(Error::Config("the depth list is empty".into()));
    }
    cfg.validate()?;
    let graph = load_dataset(cfg)?;
    let mut rows = Vec::with_capacity(depths.len());
    for &k in depths {
        let c = RunConfig {
            depth: k,
            ..cfg.clone()
        };
        let runs = run_seeds(&c, &graph)?;
        let tests: Vec<f64> = runs.iter().filter_map(|r| r.result.test_acc).collect();
        let s = Summary::of(&tests).ok_or_else(|| Error::Config("the dataset has no labeled test nodes".into()))?;
        rows.push(SweepRow {
            depth: k,
            mean: s.mean,
            std: s.std,
        });
    }
    Ok(rows)
}

/// `K,mean,std` with an empty `std` field below two seeds.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,mean,std\n");
    for r in rows {
        let std = r.std.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.depth, r.mean, std));
    }
    out
}

/// Trains the first seed and returns its posterior over all nodes.
pub fn train_posterior(cfg: &RunConfig) -> Result<PropagationPosterior> {
    cfg.validate()?;
    if cfg.head.kind().is_none() {
        return Err(Error::Unsupported(
            "posteriors need a propagation head (head = none)".into(),
        ));
    }
    let graph = load_dataset(cfg)?;
    let run = train_seed(cfg, &graph, cfg.seeds[0])?;
    Ok(run.outcome.evaluation.posterior.expect("a head is present"))
}

pub fn export_posteriors_csv(cfg: &RunConfig) -> Result<String> {
    Ok(export_posteriors(&train_posterior(cfg)?))
}

/// Cosine-similarity matrix between the average posteriors stored in posterior CSV files.
///
/// The output CSV has a header of file stems and one row per file.
pub fn correlate_files(paths: &[impl AsRef<Path>]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Config("no posterior files given".into()));
    }
    let mut names = Vec::new();
    let mut averages = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let rows = parse_posteriors(&text).map_err(|e| Error::Parse {
            path: p.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        if rows.is_empty() {
            return Err(Error::Validation(format!("{} has no posterior rows", p.display())));
        }
        let cols = rows[0].2.len();
        let mut t = crate::tensor::Tensor::zeros(rows.len(), cols);
        for (i, (_, _, q)) in rows.iter().enumerate() {
            t.row_mut(i).copy_from_slice(q);
        }
        let q = PropagationPosterior::new(t).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
        averages.push(average_posterior(&q, None)?);
        names.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string());
    }
    let m = graph_correlation(&averages)?;
    let mut out = String::from("graph");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, n) in names.iter().enumerate() {
        out.push_str(n);
        for j in 0..names.len() {
            out.push_str(&format!(",{}", m.get(i, j)));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SyntheticSpec;

    fn tiny() -> RunConfig {
        RunConfig {
            synthetic: Some(SyntheticSpec::two_block(0)),
            depth: 2,
            hidden: 8,
            repr_dim: 8,
            epochs: 3,
            seeds: vec![1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn report_has_one_entry_per_seed() {
        let runs = run_seeds(&tiny(), &load_dataset(&tiny()).unwrap()).unwrap();
        let r = summarize(&tiny(), &runs);
        assert_eq!(r.per_seed.len(), 2);
        assert!(r.test_acc.unwrap().std.is_some());
    }

    #[test]
    fn single_seed_has_no_std() {
        assert_eq!(Summary::of(&[0.5]).unwrap().std, None);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn sweep_rows() {
        let rows = layer_sweep(
            &RunConfig {
                seeds: vec![0],
                ..tiny()
            },
            &[2],
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("K,mean,std\n2,"));
        assert!(csv.ends_with(",\n"));
    }

    #[test]
    fn headless_posterior_is_unsupported() {
        let c = RunConfig {
            head: crate::config::HeadChoice::None,
            ..tiny()
        };
        assert!(matches!(export_posteriors_csv(&c), Err(Error::Unsupported(_))));
    }
}
