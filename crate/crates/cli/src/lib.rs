//! `unist` subcommands. Every command writes `config.json` and `version.json`
//! into its output directory next to its results.

pub mod config;
pub mod error;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use unist_core::attribution::{road_importance, write_importance, BaselineKind, RoadImportance};
use unist_core::checkpoint::Checkpoint;
use unist_core::datagen::{generate_corpus, SyntheticSpec};
use unist_core::dataset_io::{format_sig9, load_corpus, write_corpus, Corpus, SplitHint};
use unist_core::metrics::MetricReport;
use unist_core::model::{Model, Variant};
use unist_core::training::{evaluate, fit, fit_normalizer, window_count, ResolvedSplit, Segment, TrainError};

pub use config::RunConfig;
pub use error::CliError;

/// Windows sampled per scenario by `attribute`.
pub const ATTRIBUTION_WINDOWS: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "unist", version, about = "Spatio-temporal traffic forecasting on scenario topologies")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "UNIST_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn key(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Zeros,
    Mean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario corpus.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted override, e.g. `train.epochs=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        split: SplitName,
        /// Score only the last forecast step.
        #[arg(long)]
        final_step_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecasts for every window of one scenario.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all six variants and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// RMSE across held-out topologies and the intact network.
    Scenarios {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Road importance by integrated gradients.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum, default_value = "zeros")]
        baseline: BaselineArg,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { spec, out } => cmd_generate(&spec, &out),
        Command::Train {
            config,
            corpus,
            out,
            seed,
            overrides,
        } => cmd_train(&config, &corpus, &out, seed, &overrides),
        Command::Eval {
            checkpoint,
            corpus,
            split,
            final_step_only,
            out,
        } => cmd_eval(&checkpoint, &corpus, split, final_step_only, &out),
        Command::Predict {
            checkpoint,
            corpus,
            scenario,
            out,
        } => cmd_predict(&checkpoint, &corpus, &scenario, &out),
        Command::Ablate {
            config,
            corpus,
            out,
            seeds,
        } => cmd_ablate(&config, &corpus, &out, seeds),
        Command::Scenarios { checkpoint, corpus, out } => cmd_scenarios(&checkpoint, &corpus, &out),
        Command::Attribute {
            checkpoint,
            corpus,
            scenario,
            baseline,
            steps,
            out,
        } => cmd_attribute(&checkpoint, &corpus, &scenario, baseline, steps, &out),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Creates `out` and writes `config.json` plus `version.json`.
fn prepare_out(out: &Path, config: &Value) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join("config.json"), to_json(config))?;
    let version = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": unist_core::checkpoint::VERSION,
        "manifest_format": unist_core::dataset_io::MANIFEST_VERSION,
    });
    write_file(&out.join("version.json"), to_json(&version))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Header fields of a checkpoint plus the command's own arguments.
fn checkpoint_config(ckpt: &Checkpoint, path: &Path, corpus: &Path, extra: Value) -> Value {
    let mut v = json!({
        "checkpoint": path.display().to_string(),
        "corpus": corpus.display().to_string(),
        "variant": ckpt.model.variant(),
        "model": ckpt.model.config(),
        "normalizer": ckpt.normalizer,
        "best_epoch": ckpt.best_epoch,
    });
    config::merge(&mut v, extra);
    v
}

/// Rejects a model whose node count or feature width differs from the corpus.
pub fn check_compatible(config: &RunConfig, corpus: &Corpus) -> Result<(), CliError> {
    let n = corpus
        .num_nodes()
        .ok_or_else(|| CliError::Data("corpus has no scenarios".into()))?;
    if config.model.num_nodes != n {
        return Err(CliError::Config(format!(
            "model.num_nodes is {} but the corpus has {n} nodes",
            config.model.num_nodes
        )));
    }
    let d = corpus.scenarios[0].graph.feature_dim();
    if config.model.feature_dim != d {
        return Err(CliError::Config(format!(
            "model.feature_dim is {} but the corpus graphs carry {d} static features",
            config.model.feature_dim
        )));
    }
    Ok(())
}

pub fn cmd_generate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    let corpus = generate_corpus(&spec)?;
    prepare_out(out, &serde_json::to_value(&spec).expect("spec serializes"))?;
    write_corpus(&corpus, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub num_params: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
    pub split: ResolvedSplit,
}

/// Resolves the split and trains one model. Shared by `train` and `ablate`.
fn train_one(
    config: &RunConfig,
    corpus: &Corpus,
    history_out: Option<&mut dyn std::io::Write>,
) -> Result<(Checkpoint, TrainSummary), (CliError, Option<Checkpoint>)> {
    let m = &config.model;
    let split = config
        .split
        .resolve(corpus, m.history, m.horizon)
        .map_err(|e| (CliError::from(e), None))?;
    let model = Model::new(m.clone(), config.variant, config.train.seed).map_err(|e| (e.into(), None))?;
    let num_params = model.count_params();
    match fit(model, corpus, &config.train, &split, history_out) {
        Ok(t) => {
            let best_val_loss = t.history.iter().find(|r| r.epoch == t.best_epoch).and_then(|r| r.val_loss);
            let summary = TrainSummary {
                variant: config.variant,
                seed: config.train.seed,
                num_params,
                epochs_run: t.history.len(),
                best_epoch: t.best_epoch,
                best_val_loss,
                final_train_loss: t.history.last().map_or(f64::NAN, |r| r.train_loss),
                split: split.clone(),
            };
            let ckpt = Checkpoint {
                model: t.model,
                normalizer: t.normalizer,
                split: Some(split),
                best_epoch: t.best_epoch,
            };
            Ok((ckpt, summary))
        }
        Err(TrainError::Diverged { epoch, loss, last_good }) => {
            let normalizer = fit_normalizer(corpus, &split.train, m.history, m.horizon, config.train.normalization);
            let ckpt = Checkpoint {
                model: *last_good,
                normalizer,
                split: Some(split),
                best_epoch: epoch.saturating_sub(1),
            };
            let err = CliError::Numerical(format!("training diverged at epoch {epoch} (loss {loss})"));
            Err((err, Some(ckpt)))
        }
        Err(e) => Err((e.into(), None)),
    }
}

pub fn cmd_train(
    config_path: &Path,
    corpus_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<(), CliError> {
    let config = RunConfig::resolve(Some(config_path), overrides, seed)?;
    let corpus = load_corpus(corpus_dir)?;
    check_compatible(&config, &corpus)?;
    prepare_out(out, &serde_json::to_value(&config).expect("config serializes"))?;
    let history_path = out.join("history.jsonl");
    let mut history = fs::File::create(&history_path).map_err(|e| CliError::io(&history_path, e))?;
    match train_one(&config, &corpus, Some(&mut history)) {
        Ok((ckpt, summary)) => {
            ckpt.save(&out.join("model.ckpt"))?;
            write_file(&out.join("summary.json"), to_json(&summary))
        }
        Err((err, last_good)) => {
            if let Some(ckpt) = last_good {
                ckpt.save(&out.join("last_good.ckpt"))?;
            }
            Err(err)
        }
    }
}

/// The checkpoint's stored split, or the default split of `corpus`.
fn split_of(ckpt: &Checkpoint, corpus: &Corpus) -> Result<ResolvedSplit, CliError> {
    match &ckpt.split {
        Some(s) => Ok(s.clone()),
        None => {
            let c = ckpt.model.config();
            Ok(unist_core::training::SplitSpec::default().resolve(corpus, c.history, c.horizon)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub split: &'static str,
    pub final_step_only: bool,
    pub scenarios: Vec<String>,
    pub windows: usize,
    pub model: MetricReport,
    pub persistence: MetricReport,
}

pub fn cmd_eval(
    ckpt_path: &Path,
    corpus_dir: &Path,
    split: SplitName,
    final_step_only: bool,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = load_corpus(corpus_dir)?;
    let resolved = split_of(&ckpt, &corpus)?;
    let segments = resolved.part(split.key()).expect("known split");
    let e = evaluate(&ckpt.model, &ckpt.normalizer, &corpus, segments, final_step_only)?;
    let output = EvalOutput {
        split: split.key(),
        final_step_only,
        scenarios: segments.iter().map(|s| s.scenario.clone()).collect(),
        windows: e.truth.shape()[0],
        model: e.report()?,
        persistence: e.persistence_report()?,
    };
    let cfg = checkpoint_config(
        &ckpt,
        ckpt_path,
        corpus_dir,
        json!({ "split": split.key(), "final_step_only": final_step_only }),
    );
    prepare_out(out, &cfg)?;
    write_file(&out.join("metrics.json"), to_json(&output))
}

/// One CSV per tensor: `step,horizon,node_0..`, where `step` is the time index
/// of the forecast target and `horizon` counts from 1.
fn forecast_csv(t: &unist_core::tensor::Tensor, history: usize) -> String {
    let s = t.shape();
    let (b, hp, n) = (s[0], s[1], s[2]);
    let mut out = String::from("step,horizon");
    for i in 0..n {
        write!(out, ",node_{i}").expect("write to string");
    }
    out.push('\n');
    for w in 0..b {
        for k in 0..hp {
            write!(out, "{},{}", w + history + k, k + 1).expect("write to string");
            for v in &t.data()[(w * hp + k) * n..(w * hp + k + 1) * n] {
                write!(out, ",{}", format_sig9(*v)).expect("write to string");
            }
            out.push('\n');
        }
    }
    out
}

pub fn cmd_predict(ckpt_path: &Path, corpus_dir: &Path, scenario: &str, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = load_corpus(corpus_dir)?;
    let s = corpus
        .scenario(scenario)
        .ok_or_else(|| CliError::Data(format!("unknown scenario `{scenario}`")))?;
    let c = ckpt.model.config();
    let count = window_count(s.num_steps(), c.history, c.horizon)?;
    let seg = Segment {
        scenario: scenario.to_string(),
        start: 0,
        end: count,
    };
    let e = evaluate(&ckpt.model, &ckpt.normalizer, &corpus, &[seg], false)?;
    prepare_out(out, &checkpoint_config(&ckpt, ckpt_path, corpus_dir, json!({ "scenario": scenario })))?;
    write_file(&out.join("prediction.csv"), forecast_csv(&e.prediction, c.history))?;
    write_file(&out.join("truth.csv"), forecast_csv(&e.truth, c.history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: &'static str,
    pub seeds: Vec<u64>,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    pub median_rmse: f64,
    pub median_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub split: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>10}  {:>10}  per-seed RMSE\n", "variant", "RMSE", "MAE");
        for r in &self.rows {
            let per: Vec<String> = r.rmse.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(
                s,
                "{:<width$}  {:>10.4}  {:>10.4}  {}",
                r.label,
                r.median_rmse,
                r.median_mae,
                per.join(" ")
            )
            .expect("write to string");
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains every variant for seeds `base, base+1, ..` and scores the test split.
/// Jobs run in parallel; each is deterministic on its own, so the table does
/// not depend on the thread count.
pub fn ablation_table(config: &RunConfig, corpus: &Corpus, seeds: usize) -> Result<AblationTable, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = config.train.seed;
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| (0..seeds as u64).map(move |i| (v, base + i)))
        .collect();
    let results: Vec<Result<(f64, f64), CliError>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mut c = config.clone();
            c.variant = variant;
            c.train.seed = seed;
            let (ckpt, summary) = train_one(&c, corpus, None).map_err(|(e, _)| e)?;
            let e = evaluate(&ckpt.model, &ckpt.normalizer, corpus, &summary.split.test, false)?;
            let r = e.report()?;
            Ok((r.rmse, r.mae))
        })
        .collect();
    let mut rows = Vec::new();
    let mut it = jobs.iter().zip(results);
    for &variant in &Variant::ALL {
        let mut row = AblationRow {
            variant,
            label: variant.label(),
            seeds: Vec::new(),
            rmse: Vec::new(),
            mae: Vec::new(),
            median_rmse: 0.0,
            median_mae: 0.0,
        };
        for _ in 0..seeds {
            let (&(_, seed), res) = it.next().expect("one result per job");
            let (rmse, mae) = res?;
            row.seeds.push(seed);
            row.rmse.push(rmse);
            row.mae.push(mae);
        }
        row.median_rmse = median(&row.rmse);
        row.median_mae = median(&row.mae);
        rows.push(row);
    }
    Ok(AblationTable { split: "test", rows })
}

pub fn cmd_ablate(config_path: &Path, corpus_dir: &Path, out: &Path, seeds: usize) -> Result<(), CliError> {
    let config = RunConfig::resolve(Some(config_path), &[], None)?;
    let corpus = load_corpus(corpus_dir)?;
    check_compatible(&config, &corpus)?;
    let table = ablation_table(&config, &corpus, seeds)?;
    let mut cfg = serde_json::to_value(&config).expect("config serializes");
    cfg["seeds"] = json!(seeds);
    prepare_out(out, &cfg)?;
    write_file(&out.join("ablation.json"), to_json(&table))?;
    write_file(&out.join("ablation.txt"), table.to_text())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub id: String,
    pub removed_edges: Vec<(usize, usize)>,
    pub rmse: f64,
    pub mae: f64,
    pub mape_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioTable {
    /// Window indices `[start, end)` scored in every scenario.
    pub windows: (usize, usize),
    pub intact: ScenarioRow,
    pub held_out: Vec<ScenarioRow>,
    /// `max − min` RMSE over the intact and held-out rows.
    pub spread: f64,
    pub spread_ratio: f64,
}

/// Scores the held-out scenarios and the intact one on a shared window range:
/// the intact scenario's validation windows when it was trained on, else all
/// windows.
pub fn scenario_table(ckpt: &Checkpoint, corpus: &Corpus) -> Result<ScenarioTable, CliError> {
    let intact = corpus
        .scenarios
        .iter()
        .find(|s| s.removed_edges.is_empty())
        .ok_or_else(|| CliError::Data("corpus has no intact scenario (empty removed_edges)".into()))?;
    let held: Vec<_> = corpus.with_hint(SplitHint::Test).collect();
    if held.is_empty() {
        return Err(CliError::Data("corpus has no held-out (test) scenarios".into()));
    }
    let c = ckpt.model.config();
    let mut all = vec![intact];
    all.extend(held.iter().copied().filter(|s| s.id != intact.id));
    let mut count = usize::MAX;
    for s in &all {
        count = count.min(window_count(s.num_steps(), c.history, c.horizon)?);
    }
    let range = ckpt
        .split
        .as_ref()
        .and_then(|sp| sp.val.iter().find(|seg| seg.scenario == intact.id))
        .map(|seg| (seg.start.min(count), seg.end.min(count)))
        .filter(|(a, b)| a < b)
        .unwrap_or((0, count));
    let score = |s: &unist_core::dataset_io::ScenarioDataset| -> Result<ScenarioRow, CliError> {
        let seg = Segment {
            scenario: s.id.clone(),
            start: range.0,
            end: range.1,
        };
        let r = evaluate(&ckpt.model, &ckpt.normalizer, corpus, &[seg], false)?.report()?;
        Ok(ScenarioRow {
            id: s.id.clone(),
            removed_edges: s.removed_edges.clone(),
            rmse: r.rmse,
            mae: r.mae,
            mape_percent: r.mape_percent,
        })
    };
    let intact_row = score(intact)?;
    let held_out = held.iter().map(|s| score(s)).collect::<Result<Vec<_>, _>>()?;
    let rmses: Vec<f64> = std::iter::once(intact_row.rmse).chain(held_out.iter().map(|r| r.rmse)).collect();
    let spread = rmses.iter().cloned().fold(f64::MIN, f64::max) - rmses.iter().cloned().fold(f64::MAX, f64::min);
    Ok(ScenarioTable {
        windows: range,
        spread_ratio: spread / intact_row.rmse,
        intact: intact_row,
        held_out,
        spread,
    })
}

pub fn cmd_scenarios(ckpt_path: &Path, corpus_dir: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = load_corpus(corpus_dir)?;
    let table = scenario_table(&ckpt, &corpus)?;
    prepare_out(out, &checkpoint_config(&ckpt, ckpt_path, corpus_dir, json!({})))?;
    write_file(&out.join("scenarios.json"), to_json(&table))?;
    let mut txt = format!("{:<12}  {:>10}  {:>10}  removed\n", "scenario", "RMSE", "MAE");
    for r in std::iter::once(&table.intact).chain(&table.held_out) {
        writeln!(txt, "{:<12}  {:>10.4}  {:>10.4}  {:?}", r.id, r.rmse, r.mae, r.removed_edges).expect("write");
    }
    writeln!(txt, "spread {:.4} ({:.1}% of intact)", table.spread, 100.0 * table.spread_ratio).expect("write");
    write_file(&out.join("scenarios.txt"), txt)
}

fn delta_csv(intact: &RoadImportance, disrupted: &RoadImportance) -> String {
    let mut s = String::from("node_id,intact,disrupted,delta\n");
    for (i, (a, b)) in intact.importance.iter().zip(&disrupted.importance).enumerate() {
        writeln!(s, "{i},{},{},{}", format_sig9(*a), format_sig9(*b), format_sig9(b - a)).expect("write");
    }
    s
}

pub fn cmd_attribute(
    ckpt_path: &Path,
    corpus_dir: &Path,
    scenario: &str,
    baseline: BaselineArg,
    steps: usize,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let corpus = load_corpus(corpus_dir)?;
    let s = corpus
        .scenario(scenario)
        .ok_or_else(|| CliError::Data(format!("unknown scenario `{scenario}`")))?;
    let kind = match baseline {
        BaselineArg::Zeros => BaselineKind::Zeros,
        BaselineArg::Mean => BaselineKind::TrainMean,
    };
    let imp = road_importance(&ckpt.model, &ckpt.normalizer, s, kind, steps, ATTRIBUTION_WINDOWS)?;
    let cfg = checkpoint_config(
        &ckpt,
        ckpt_path,
        corpus_dir,
        json!({ "scenario": scenario, "baseline": kind, "steps": steps, "windows": ATTRIBUTION_WINDOWS }),
    );
    prepare_out(out, &cfg)?;
    write_importance(&imp, out)?;
    let intact = corpus.scenarios.iter().find(|x| x.removed_edges.is_empty());
    if let (false, Some(intact)) = (s.removed_edges.is_empty(), intact) {
        let base = road_importance(&ckpt.model, &ckpt.normalizer, intact, kind, steps, ATTRIBUTION_WINDOWS)?;
        write_file(&out.join("importance_delta.csv"), delta_csv(&base, &imp))?;
    }
    Ok(())
}
