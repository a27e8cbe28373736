//! Command-line interface.
//!
//! Exit codes: 0 success, 2 parse or configuration errors, 3 I/O errors,
//! 4 non-finite loss, 5 checkpoint mismatch, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{class_counts, kfold, load_samples, read_manifest, stratified_split, REFERENCE_PERCENT};
use crate::error::{Error, Result};
use crate::heatmap::{read_detections_jsonl, render_heatmap, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::metrics::{accuracy_report, evaluate, format_table, parse_confusion_json, ConfusionMatrix, MetricsJson};
use crate::pipeline::{history_csv, predict_batch, train, Model, ModelConfig, Sample, TrainConfig};
use crate::synth::{counts_from_percentages, synth_dataset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "dscx", version, about = "Driving-scene complexity classifier")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one frame of a detection JSONL file as a 16-bit PGM heat map.
    Heatmap(HeatmapArgs),
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train on a manifest (stratified train/validation split).
    Train(TrainArgs),
    /// Evaluate a checkpoint, run k-fold cross-validation, or report on a
    /// precomputed confusion matrix.
    Eval(EvalArgs),
    /// Write per-sample class probabilities.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Detection JSONL file (box coordinates in heat-map pixels).
    #[arg(long)]
    pub detections: PathBuf,
    /// Frame number to render; the first record when omitted.
    #[arg(long)]
    pub frame: Option<i64>,
    #[arg(long, default_value_t = DEFAULT_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = DEFAULT_HEIGHT)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total samples, split by the reference class proportions.
    #[arg(long, default_value_t = 1000, conflicts_with = "counts")]
    pub total: usize,
    /// Explicit per-class counts, e.g. `10,10,10,10,10`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only samples recorded while the vehicle was driving.
    #[arg(long)]
    pub moving_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Best-validation checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    /// Every sample in the manifest.
    All,
    /// The validation part of the seeded train/validation split.
    Validate,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report on this confusion matrix (bare 5x5 JSON array or metrics
    /// JSON) instead of evaluating a model.
    #[arg(long, conflicts_with_all = ["manifest", "checkpoint", "kfold"])]
    pub confusion: Option<PathBuf>,
    #[arg(long, required_unless_present = "confusion")]
    pub manifest: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["confusion", "kfold"])]
    pub checkpoint: Option<PathBuf>,
    /// Train and evaluate a fresh model on each of k stratified folds.
    #[arg(long)]
    pub kfold: Option<usize>,
    #[arg(long, value_enum, default_value_t = EvalSplit::All)]
    pub split: EvalSplit,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub moving_only: bool,
    /// Metrics JSON output.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    #[default]
    Default,
    Miniature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSize {
    pub width: usize,
    pub height: usize,
}

/// TOML run configuration. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub class_weights: bool,
    pub target_val_acc: Option<f64>,
    pub max_steps: Option<usize>,
    pub train_fraction: f64,
    pub model: ModelPreset,
    /// Heat-map resolution for the default model.
    pub heatmap: Option<HeatmapSize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            class_weights: t.class_weights,
            target_val_acc: t.target_val_acc,
            max_steps: t.max_steps,
            train_fraction: 0.8,
            model: ModelPreset::Default,
            heatmap: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            class_weights: self.class_weights,
            target_val_acc: self.target_val_acc,
            max_steps: self.max_steps,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match (self.model, self.heatmap) {
            (ModelPreset::Default, None) => Ok(ModelConfig::default()),
            (ModelPreset::Default, Some(s)) => Ok(ModelConfig::for_heatmap(s.width, s.height)),
            (ModelPreset::Miniature, None) => Ok(ModelConfig::miniature()),
            (ModelPreset::Miniature, Some(_)) => Err(Error::Config(
                "heatmap resolution cannot be combined with the miniature model".into(),
            )),
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Config(_) | Error::InvalidLabel(_) => 2,
        Error::Io { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::CheckpointMismatch(_) => 5,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Heatmap(a) => cmd_heatmap(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

fn cmd_heatmap(a: &HeatmapArgs) -> Result<()> {
    let frames = read_detections_jsonl(&a.detections)?;
    let boxes = match a.frame {
        Some(n) => frames
            .iter()
            .find(|f| f.frame == n)
            .map(|f| f.boxes.clone())
            .ok_or_else(|| Error::parse(&a.detections, format!("no record for frame {n}")))?,
        None => frames.first().map(|f| f.boxes.clone()).unwrap_or_default(),
    };
    let map = render_heatmap(&boxes, a.width, a.height);
    map.write_pgm(&a.out)?;
    println!("{}", map.total_intensity());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let counts = match &a.counts {
        Some(c) => <[usize; 5]>::try_from(c.as_slice())
            .map_err(|_| Error::Config(format!("--counts needs 5 values, got {}", c.len())))?,
        None => counts_from_percentages(a.total, &REFERENCE_PERCENT),
    };
    let cfg = SynthConfig {
        counts,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let m = synth_dataset(&cfg, &a.out)?;
    println!("wrote {} samples, class counts {:?}", m.entries.len(), counts);
    Ok(())
}

/// Samples of a manifest after the moving filter, with their ids.
fn load_dataset(manifest: &Path, moving_only: bool, window_len: usize) -> Result<(Vec<Sample>, Vec<String>)> {
    let m = read_manifest(manifest)?;
    let (samples, kept) = load_samples(&m, window_len);
    let mut out = Vec::new();
    let mut ids = Vec::new();
    for (s, i) in samples.into_iter().zip(kept) {
        if moving_only && !s.moving {
            continue;
        }
        ids.push(m.entries[i].sample_id.clone());
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    info!("loaded {} samples, class counts {:?}", out.len(), class_counts(&labels(&out)));
    Ok((out, ids))
}

fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.data.config.as_deref(), a.data.seed)?;
    let model_cfg = cfg.model_config()?;
    let (samples, _) = load_dataset(&a.data.manifest, a.data.moving_only, model_cfg.dynamics.window_len)?;
    let split = stratified_split(&labels(&samples), cfg.train_fraction, cfg.seed)?;
    let (train_set, val_set) = (pick(&samples, &split.train), pick(&samples, &split.validate));
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let report = train(&mut model, &train_set, &val_set, &cfg.train_config(), Some(&a.out))?;
    let history = a
        .history
        .clone()
        .unwrap_or_else(|| a.out.with_extension("history.csv"));
    std::fs::write(&history, history_csv(&report.history)).map_err(|e| Error::io(&history, e))?;
    println!(
        "trained {} epochs ({} steps); best validation accuracy {:.4} at epoch {}",
        report.history.len(),
        report.steps,
        report.best_val_acc,
        report.best_epoch.unwrap_or(0)
    );
    Ok(())
}

fn report_and_write(cm: &ConfusionMatrix, out: Option<&Path>) -> Result<MetricsJson> {
    let report = accuracy_report(cm)?;
    print!("{}", format_table(cm, &report));
    let json = MetricsJson::new(cm, &report);
    if let Some(p) = out {
        json.write(p)?;
    }
    Ok(json)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if let Some(p) = &a.confusion {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let cm = parse_confusion_json(&text, p)?;
        report_and_write(&cm, a.metrics.as_deref())?;
        return Ok(());
    }
    let cfg = RunConfig::load(a.config.as_deref(), a.seed)?;
    let model_cfg = cfg.model_config()?;
    let manifest = a.manifest.as_deref().expect("clap requires --manifest");
    let (samples, _) = load_dataset(manifest, a.moving_only, model_cfg.dynamics.window_len)?;

    if let Some(k) = a.kfold {
        let folds = kfold(&labels(&samples), k, cfg.seed)?;
        let mut pooled = ConfusionMatrix::default();
        let mut accs = Vec::new();
        for (i, fold) in folds.iter().enumerate() {
            let (tr, va) = (pick(&samples, &fold.train), pick(&samples, &fold.validate));
            let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
            train(&mut model, &tr, &va, &cfg.train_config(), None)?;
            let cm = evaluate(&model, &va);
            let acc = accuracy_report(&cm)?.overall;
            println!("fold {}: accuracy {:.4} ({} samples)", i + 1, acc, va.len());
            accs.push(acc);
            pooled.merge(&cm);
        }
        report_and_write(&pooled, a.metrics.as_deref())?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("mean {k}-fold accuracy: {:.2}%", mean * 100.0);
        return Ok(());
    }

    let checkpoint = a.checkpoint.as_deref().expect("clap requires --checkpoint");
    let mut model = Model::new(model_cfg, cfg.seed)?;
    model.load(checkpoint)?;
    let target = match a.split {
        EvalSplit::All => samples,
        EvalSplit::Validate => {
            let split = stratified_split(&labels(&samples), cfg.train_fraction, cfg.seed)?;
            pick(&samples, &split.validate)
        }
    };
    let cm = evaluate(&model, &target);
    report_and_write(&cm, a.metrics.as_deref())?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = RunConfig::load(a.data.config.as_deref(), a.data.seed)?;
    let model_cfg = cfg.model_config()?;
    let (samples, ids) = load_dataset(&a.data.manifest, a.data.moving_only, model_cfg.dynamics.window_len)?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    model.load(&a.checkpoint)?;
    let mut out = String::from("sample_id,predicted_class,p0,p1,p2,p3,p4\n");
    for (id, p) in ids.iter().zip(predict_batch(&model, &samples)) {
        match p {
            Ok(p) => {
                let probs: Vec<String> = p.probabilities.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("{id},{},{}\n", p.predicted_class, probs.join(",")));
            }
            Err(e) => warn!("prediction failed for {id}: {e}"),
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, out).map_err(|e| Error::io(p, e))?,
        None => print!("{out}"),
    }
    Ok(())
}
