use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use l2p::autodiff::{gradient_suite, OptimizerKind};
use l2p::backbone::{BackboneKind, PredictMode};
use l2p::config::{HeadChoice, RunConfig};
use l2p::experiment::{correlate_files, export_posteriors_csv, layer_sweep, run, sweep_csv};
use l2p::graph::{make_synthetic, save_graph, GraphFormat, SyntheticSpec};
use l2p::head::Prior;
use l2p::train::{Anneal, BilevelMode, EmTarget, TrainerKind};
use l2p::util::write_atomic;
use l2p::{Error, Result};

#[derive(Parser)]
#[command(
    name = "l2p",
    version,
    about = "Learn per-node propagation depths for graph neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write metrics.json, timing.json and per-seed histories.
    Run(RunArgs),
    /// Test accuracy against the maximum depth, as CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated depths.
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the first seed and write its per-node posterior as CSV.
    ExportPosteriors {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity between the average posteriors of several exported CSV files.
    Correlate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic benchmark graph in the JSON container format.
    MakeSynthetic {
        /// two-block, heterophily or homophily, or a JSON spec file.
        #[arg(long, default_value = "two-block")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write `node,block` rows here.
        #[arg(long)]
        blocks_out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation, head and backbone.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn enum_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn anneal_value(s: &str) -> std::result::Result<Anneal, String> {
    let (t, e) = s.split_once(':').ok_or("expected FINAL_TEMPERATURE:EPOCHS")?;
    Ok(Anneal {
        final_temperature: t.parse().map_err(|_| format!("bad temperature '{t}'"))?,
        epochs: e.parse().map_err(|_| format!("bad epoch count '{e}'"))?,
    })
}

/// Config file plus per-field overrides.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    format: Option<GraphFormat>,
    /// two-block, heterophily or homophily, or a JSON spec file.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, value_parser = enum_value::<BackboneKind>)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    repr_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    head: Option<HeadChoice>,
    #[arg(long)]
    head_bias: Option<bool>,
    #[arg(long, value_parser = enum_value::<PredictMode>)]
    predict: Option<PredictMode>,
    #[arg(long, value_parser = enum_value::<TrainerKind>)]
    trainer: Option<TrainerKind>,
    #[arg(long)]
    bilevel: Option<BilevelMode>,
    /// uniform or geometric:RATIO
    #[arg(long)]
    prior: Option<Prior>,
    #[arg(long)]
    temperature: Option<f64>,
    /// FINAL_TEMPERATURE:EPOCHS
    #[arg(long, value_parser = anneal_value)]
    anneal: Option<Anneal>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long, value_parser = enum_value::<OptimizerKind>)]
    theta_optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = enum_value::<OptimizerKind>)]
    phi_optimizer: Option<OptimizerKind>,
    #[arg(long)]
    theta_lr: Option<f64>,
    #[arg(long)]
    phi_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    head_weight_decay: Option<f64>,
    #[arg(long)]
    phi_steps: Option<usize>,
    #[arg(long, value_parser = enum_value::<EmTarget>)]
    em_target: Option<EmTarget>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    fd_scale: Option<f64>,
    /// One seed or a comma-separated list.
    #[arg(long, alias = "seeds", value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn synthetic_spec(name: &str, seed: u64) -> Result<SyntheticSpec> {
    match name {
        "two-block" | "two_block" => Ok(SyntheticSpec::two_block(seed)),
        "heterophily" => Ok(SyntheticSpec::single_block(600, true, seed)),
        "homophily" => Ok(SyntheticSpec::single_block(600, false, seed)),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("synthetic spec '{path}': {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("synthetic spec '{path}': {e}")))
        }
    }
}

macro_rules! override_fields {
    ($cfg:ident, $args:ident: $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        override_fields!(cfg, self: format, backbone, alpha, depth, hidden, repr_dim, dropout, encoder_layers,
            head, head_bias, predict, trainer, bilevel, prior, temperature, samples, kl_weight,
            theta_optimizer, phi_optimizer, theta_lr, phi_lr, weight_decay, head_weight_decay, phi_steps,
            em_target, epochs, patience, fd_scale, output_dir);
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
            cfg.synthetic = None;
        }
        if let Some(f) = self.val_fraction {
            cfg.val_fraction = Some(f);
        }
        if let Some(a) = &self.anneal {
            cfg.anneal = Some(a.clone());
        }
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(name) = &self.synthetic {
            let seed = cfg.synthetic.as_ref().map_or(0, |s| s.seed);
            cfg.synthetic = Some(synthetic_spec(name, seed)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("L2P_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("L2P_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let report = run(&cfg)?;
            match report.test_acc {
                Some(s) => println!(
                    "test accuracy {:.4} ± {} over {} seed(s); reports in {}",
                    s.mean,
                    s.std.map_or("n/a".into(), |v| format!("{v:.4}")),
                    report.per_seed.len(),
                    cfg.output_dir.display()
                ),
                None => println!("no labeled test nodes; reports in {}", cfg.output_dir.display()),
            }
        }
        Command::Sweep { run, depths, out } => {
            let cfg = run.resolve()?;
            emit(out.as_deref(), &sweep_csv(&layer_sweep(&cfg, &depths)?))?;
        }
        Command::ExportPosteriors { run, out } => {
            let cfg = run.resolve()?;
            emit(out.as_deref(), &export_posteriors_csv(&cfg)?)?;
        }
        Command::Correlate { files, out } => {
            emit(out.as_deref(), &correlate_files(&files)?)?;
        }
        Command::MakeSynthetic {
            preset,
            seed,
            out,
            blocks_out,
        } => {
            let mut spec = synthetic_spec(&preset, seed)?;
            spec.seed = seed;
            let sg = make_synthetic(&spec)?;
            save_graph(&sg.graph, &out)?;
            if let Some(p) = blocks_out {
                let mut text = String::from("node,block\n");
                for (i, b) in sg.block.iter().enumerate() {
                    text.push_str(&format!("{i},{b}\n"));
                }
                write_atomic(&p, text.as_bytes())?;
            }
        }
        Command::GradCheck { seeds, eps, tolerance } => {
            let mut worst: Vec<(&'static str, f64)> = Vec::new();
            for seed in 0..seeds {
                for case in gradient_suite(seed, eps)? {
                    match worst.iter_mut().find(|(n, _)| *n == case.name) {
                        Some(w) => w.1 = w.1.max(case.worst),
                        None => worst.push((case.name, case.worst)),
                    }
                }
            }
            let mut failed = 0;
            for (name, w) in &worst {
                let ok = *w < tolerance;
                failed += usize::from(!ok);
                println!("{:<24} {:.3e} {}", name, w, if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient check(s) above {tolerance}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("l2p: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
