//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bayesopt::{bo_optimize, BoConfig, SearchSpace};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::margins::{estimate_input_margin, margin_report, MarginNormalizer, ProbeConfig};
use crate::model::{Checkpoint, ModelParams};
use crate::numerics::RngState;
use crate::selftest;
use crate::stats::{self, battery, BatteryConfig, PredictionSet};
use crate::synthdata::{generate_bags, load_dataset, save_dataset, split_bags, BagSpec, PatchBag};
use crate::trainer::{evaluate, forward_all, train, EvalReport, TrainConfig};

pub const MANIFEST_KIND: &str = "marginlab-manifest";
const PROBE_STREAM: u64 = 4;
const TUNE_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: BagSpec,
    /// Load bags from this NDJSON file instead of generating them.
    pub dataset_path: Option<PathBuf>,
    pub n_train: usize,
    pub train: TrainConfig,
    pub loss_modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    pub bo: BoConfig,
    /// Also tune the contrastive temperature.
    pub tune_tau: bool,
    pub n_boot: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: BagSpec::default(),
            dataset_path: None,
            n_train: 250,
            train: TrainConfig::default(),
            loss_modes: LossMode::ALL.to_vec(),
            seeds: (0..5).collect(),
            probe: ProbeConfig::default(),
            bo: BoConfig::default(),
            tune_tau: false,
            n_boot: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.loss_modes.is_empty() {
            return Err(Error::Config("loss_modes must be non-empty".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be >= 1".into()));
        }
        if self.bo.n_init == 0 {
            return Err(Error::Config("bo.n_init must be >= 1".into()));
        }
        if !(self.probe.tol > 0.0) {
            return Err(Error::Config("probe.tol must be > 0".into()));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be >= 1".into()));
        }
        self.train.validate()?;
        if self.dataset_path.is_none() {
            self.dataset.validate()?;
            if self.dataset.n_classes != self.train.n_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the model {}",
                    self.dataset.n_classes, self.train.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Reads a config file, or the `config` entry of a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text)?;
        if v.get("kind").and_then(Value::as_str) == Some(MANIFEST_KIND) {
            v = v
                .get_mut("config")
                .map(Value::take)
                .ok_or_else(|| Error::Config("manifest has no config".into()))?;
        }
        Ok(serde_json::from_value(v)?)
    }

    fn bags(&self) -> Result<Vec<PatchBag>> {
        match &self.dataset_path {
            Some(p) => load_dataset(p),
            None => generate_bags(&self.dataset),
        }
    }

    fn split(&self) -> Result<(Vec<PatchBag>, Vec<PatchBag>)> {
        split_bags(self.bags()?, self.n_train)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "marginlab",
    version,
    about = "Margin-consistent MIL experiments on synthetic patch bags"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// JSON config file, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    loss_mode: Option<LossMode>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate,
    /// Train one model and write its checkpoint and run log.
    Train,
    /// Bayesian optimization of the margin and perturbation hyperparameters.
    Tune,
    /// Per-bag margin table for a checkpoint on the validation split.
    Margins {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Statistical battery on prediction CSVs; the first file is the baseline.
    Stats {
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
    },
    /// Train every loss mode on every seed.
    Ablate,
    /// Run the built-in example checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Tune => "tune",
            Command::Margins { .. } => "margins",
            Command::Evaluate { .. } => "evaluate",
            Command::Stats { .. } => "stats",
            Command::Ablate => "ablate",
            Command::Selftest => "selftest",
        }
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
        cfg.train.seed = s;
        cfg.dataset.seed = s;
    }
    if let Some(m) = g.loss_mode {
        cfg.train.loss_mode = m;
        cfg.loss_modes = vec![m];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    let out = &cli.global.out;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let (artifacts, code) = match &cli.command {
        Command::Generate => (cmd_generate(&cfg, out)?, 0),
        Command::Train => (cmd_train(&cfg, out)?, 0),
        Command::Tune => (cmd_tune(&cfg, out)?, 0),
        Command::Margins { checkpoint } => (cmd_margins(&cfg, checkpoint, out)?, 0),
        Command::Evaluate { checkpoint } => (cmd_evaluate(&cfg, checkpoint, out)?, 0),
        Command::Stats { predictions } => (cmd_stats(&cfg, predictions, out)?, 0),
        Command::Ablate => (cmd_ablate(&cfg, out)?, 0),
        Command::Selftest => cmd_selftest(out)?,
    };
    write_manifest(out, &cli.command, &cfg, &artifacts)?;
    Ok(code)
}

fn write_manifest(
    out: &Path,
    cmd: &Command,
    cfg: &ExperimentConfig,
    artifacts: &[String],
) -> Result<()> {
    let inputs = match cmd {
        Command::Margins { checkpoint } | Command::Evaluate { checkpoint } => {
            json!({ "checkpoint": checkpoint })
        }
        Command::Stats { predictions } => json!({ "predictions": predictions }),
        _ => json!({}),
    };
    let manifest = json!({
        "kind": MANIFEST_KIND,
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cmd.name(),
        "seeds": cfg.seeds,
        "inputs": inputs,
        "config": cfg,
        "artifacts": artifacts,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn log_header() -> Value {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    json!({ "timestamp_unix": secs, "version": env!("CARGO_PKG_VERSION") })
}

fn prediction_set(report: &EvalReport, first_id: usize) -> PredictionSet {
    PredictionSet {
        bag_ids: (first_id..first_id + report.labels.len()).collect(),
        labels: report.labels.clone(),
        preds: report.predictions.clone(),
        scores: report.scores.clone(),
    }
}

fn write_predictions(path: &Path, set: &PredictionSet) -> Result<()> {
    set.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    save_dataset(&out.join("dataset.ndjson"), &cfg.bags()?)?;
    Ok(vec!["dataset.ndjson".into()])
}

/// Train one run into `dir`: checkpoint, run log and validation predictions.
fn train_run(
    train_cfg: &TrainConfig,
    cfg: &ExperimentConfig,
    dataset: &BagSpec,
    dir: &Path,
) -> Result<PredictionSet> {
    let run_cfg = ExperimentConfig {
        dataset: dataset.clone(),
        ..cfg.clone()
    };
    let (tr, va) = run_cfg.split()?;
    let (params, history) = train(train_cfg, &tr, &va)?;
    Checkpoint::new(params.clone()).save(&dir.join("checkpoint.json"))?;
    history.save_ndjson(&dir.join("run_log.ndjson"), &log_header())?;
    let set = prediction_set(&evaluate(&params, &va)?, tr.len());
    write_predictions(&dir.join("predictions.csv"), &set)?;
    Ok(set)
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let set = train_run(&cfg.train, cfg, &cfg.dataset, out)?;
    println!("validation accuracy {:.4}", set.accuracy());
    Ok(vec![
        "checkpoint.json".into(),
        "run_log.ndjson".into(),
        "predictions.csv".into(),
    ])
}

fn cmd_tune(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let (tr, va) = cfg.split()?;
    let space = SearchSpace::margin_box(cfg.tune_tau);
    let objective = |x: &[f64]| {
        let mut t = cfg.train.clone();
        t.margin_params.gamma = x[0];
        t.margin_params.tau_m = x[1];
        t.margin_params.kappa = x[2];
        t.loss_weights.alpha = x[3];
        t.loss_weights.beta = x[4];
        if let Some(tau) = x.get(5) {
            t.loss_weights.tau_con = *tau;
        }
        match train(&t, &tr, &va) {
            Ok((_, h)) => -h.best_val_accuracy,
            Err(_) => f64::NAN,
        }
    };
    let mut rng = RngState::with_stream(cfg.train.seed, TUNE_STREAM);
    let state = bo_optimize(objective, space.clone(), cfg.bo, &mut rng)?;
    state.write_trace_csv(&out.join("tune_trace.csv"))?;
    let (best, value) = state
        .best_point()
        .ok_or_else(|| Error::Evaluation("no finite objective value".into()))?;
    let named: serde_json::Map<String, Value> = space
        .dims
        .iter()
        .zip(&best)
        .map(|(d, v)| (d.name.clone(), json!(v)))
        .collect();
    write_json(
        &out.join("tune_result.json"),
        &json!({ "best_point": named, "best_value": value, "best_val_accuracy": -value }),
    )?;
    println!("best validation accuracy {:.4}", -value);
    Ok(vec!["tune_trace.csv".into(), "tune_result.json".into()])
}

fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(Checkpoint::load(path)?.params)
}

fn cmd_margins(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<String>> {
    let params = load_params(checkpoint)?;
    let (tr, va) = cfg.split()?;
    let train_d_out = forward_all(&params, &tr)?
        .iter()
        .map(|f| crate::margins::logit_margin(&f.logits).map(|m| m.1))
        .collect::<Result<Vec<_>>>()?;
    let normalizer = MarginNormalizer::fit(&train_d_out);
    let base = RngState::with_stream(cfg.train.seed, PROBE_STREAM);
    let rows = va
        .par_iter()
        .enumerate()
        .map(|(i, bag)| {
            let f = crate::model::forward(&bag.patches, &params)?;
            let mut rep = margin_report(
                &f.logits,
                &f.embedding,
                &params,
                cfg.train.feature_norm,
                &normalizer,
                &cfg.train.margin_params,
            )?;
            let mut rng = base.derive(i as u64);
            rep.d_in_estimate = Some(estimate_input_margin(
                &params,
                &bag.patches,
                &cfg.probe,
                &mut rng,
            )?);
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("margins.csv"))?);
    writeln!(f, "bag_id,predicted,label,d_out,d_feat,d_in_estimate,omega")?;
    for (i, (rep, bag)) in rows.iter().zip(&va).enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            tr.len() + i,
            rep.predicted,
            bag.label,
            rep.d_out,
            rep.d_feat,
            rep.d_in_estimate.unwrap_or(f64::NAN),
            rep.omega
        )?;
    }
    f.flush()?;
    Ok(vec!["margins.csv".into()])
}

fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<String>> {
    let params = load_params(checkpoint)?;
    let (tr, va) = cfg.split()?;
    let report = evaluate(&params, &va)?;
    let set = prediction_set(&report, tr.len());
    write_predictions(&out.join("predictions.csv"), &set)?;
    let confusion: Vec<Vec<u64>> = report
        .confusion
        .iter()
        .map(|r| r.iter().map(|c| *c as u64).collect())
        .collect();
    write_json(
        &out.join("eval.json"),
        &json!({
            "accuracy": report.accuracy,
            "n": report.labels.len(),
            "confusion": confusion,
            "per_class": stats::per_class_metrics(&confusion)?,
        }),
    )?;
    println!("accuracy {:.4}", report.accuracy);
    Ok(vec!["eval.json".into(), "predictions.csv".into()])
}

fn cmd_stats(cfg: &ExperimentConfig, paths: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let mut sets = Vec::with_capacity(paths.len());
    for p in paths {
        let f = std::fs::File::open(p)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))?;
        sets.push((
            p.display().to_string(),
            PredictionSet::read_csv(std::io::BufReader::new(f))?,
        ));
    }
    let bc = BatteryConfig {
        n_boot: cfg.n_boot,
        seed: cfg.seeds[0],
        ..BatteryConfig::default()
    };
    write_json(&out.join("stats.json"), &battery(&sets, &bc)?)?;
    Ok(vec!["stats.json".into()])
}

fn run_dir_name(mode: LossMode, seed: u64) -> String {
    format!("{}_seed{seed}", mode.name())
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let jobs: Vec<(LossMode, u64)> = cfg
        .loss_modes
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let runs_dir = out.join("runs");
    let results = jobs
        .par_iter()
        .map(|(mode, seed)| {
            let dir = runs_dir.join(run_dir_name(*mode, *seed));
            std::fs::create_dir_all(&dir)?;
            let t = TrainConfig {
                loss_mode: *mode,
                seed: *seed,
                ..cfg.train.clone()
            };
            let dataset = BagSpec {
                seed: *seed,
                ..cfg.dataset.clone()
            };
            train_run(&t, cfg, &dataset, &dir).map(|s| s.accuracy())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("ablation.csv"))?);
    writeln!(f, "mode,n_seeds,mean_accuracy,std_accuracy")?;
    let mut artifacts = vec!["ablation.csv".to_string()];
    for (k, mode) in cfg.loss_modes.iter().enumerate() {
        let acc = &results[k * cfg.seeds.len()..(k + 1) * cfg.seeds.len()];
        writeln!(
            f,
            "{},{},{},{}",
            mode.name(),
            acc.len(),
            stats::mean(acc),
            stats::std_dev(acc)
        )?;
        println!(
            "{:<10} {:.4} ± {:.4}",
            mode.name(),
            stats::mean(acc),
            stats::std_dev(acc)
        );
    }
    f.flush()?;
    for (mode, seed) in &jobs {
        for name in ["checkpoint.json", "run_log.ndjson", "predictions.csv"] {
            artifacts.push(format!("runs/{}/{name}", run_dir_name(*mode, *seed)));
        }
    }
    Ok(artifacts)
}

fn cmd_selftest(out: &Path) -> Result<(Vec<String>, i32)> {
    let outcomes = selftest::run_all();
    for o in &outcomes {
        match (&o.passed, &o.detail) {
            (true, _) => println!("PASS {}", o.name),
            (false, Some(d)) => println!("FAIL {}: {d}", o.name),
            (false, None) => println!("FAIL {}", o.name),
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    write_json(&out.join("selftest.json"), &outcomes)?;
    Ok((
        vec!["selftest.json".into()],
        if failed == 0 { 0 } else { 2 },
    ))
}
