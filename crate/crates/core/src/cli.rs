//! The `edgeq` command line: train, distill, quantize, calibrate, infer,
//! evaluate, report, synth and verify.
//!
//! Every command writes its artifacts, then a one-line JSON summary to
//! stdout. Human-readable tables go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{load_image, scan_dataset, stratified_split, synth_dataset, DatasetIndex, LabeledImages, SplitRounding};
use crate::eval::{render_comparison, render_report, Comparison, MetricsReport, ModelSummary};
use crate::graph_opt::optimize;
use crate::model::tmf::{self, TmfModel};
use crate::model::{Checkpoint, Graph};
use crate::quant::{calibrate, quantize_f16, quantize_int8, to_f16_graph, CalibrationStats};
use crate::runtime::{Activation, ExecutionMode, Fixtures, Session, FIXTURE_TOLERANCE};
use crate::train::{three_stage_train, KdConfig, ModelSpec, TrainConfig, TrainError};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 100;
/// Image size of the built-in training configurations.
pub const DEFAULT_IMAGE_SIZE: usize = 32;

const BATCH: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "edgeq", version, about = "Compress, quantize and run small CNN image classifiers")]
pub struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier with the staged schedule.
    Train(TrainArgs),
    /// Train a student against a teacher's softened outputs.
    Distill(DistillArgs),
    /// Convert a checkpoint to an F16 or INT8 deployment graph.
    Quantize(QuantizeArgs),
    /// Record activation ranges over sample images.
    Calibrate(CalibrateArgs),
    /// Classify one image.
    Infer(InferArgs),
    /// Score a model on a labelled image folder.
    Evaluate(EvaluateArgs),
    /// Compare a baseline and a quantized model.
    Report(ReportArgs),
    /// Generate a synthetic labelled image dataset.
    Synth(SynthArgs),
    /// Check a model against forward-pass fixtures recorded elsewhere.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training configuration; the built-in desk schedule if omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantMode {
    F16,
    Int8,
}

#[derive(Args, Debug)]
pub struct CalibrationArgs {
    /// Image folder sampled for activation ranges.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
    pub calib_samples: usize,
    /// Ranges previously written by `calibrate`.
    #[arg(long, conflicts_with = "calib")]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: QuantMode,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short = 'n', default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    F32,
    F16,
    Int8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    /// The validation half of the stratified split `train` uses.
    Validation,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::F32)]
    pub mode: EvalMode,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub quantized: PathBuf,
    #[arg(long)]
    pub baseline_report: PathBuf,
    #[arg(long)]
    pub quantized_report: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Write fixtures from this model's own logits instead of checking.
    #[arg(long)]
    pub record: bool,
    /// Random inputs to record.
    #[arg(long, default_value_t = 8, requires = "record")]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on a usage error, 1 on failure.
pub fn dispatch<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match with_threads(cli.threads, || run(cli.command, stderr)) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(_threads: Option<usize>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f()
}

/// Runs one command and returns its JSON summary.
pub fn run(command: Command, log: &mut (dyn Write + Send)) -> Result<serde_json::Value> {
    match command {
        Command::Train(a) => train(&a, None, None),
        Command::Distill(a) => {
            let teacher = read_model(&a.teacher)?.into_graph();
            train(&a.train, Some(&teacher), Some((a.temperature, a.alpha)))
        }
        Command::Quantize(a) => quantize(&a),
        Command::Calibrate(a) => {
            let graph = deployment_graph(read_model(&a.model)?);
            let stats = calibration_from_dir(&graph, &a.data, a.samples, a.seed)?;
            fs::write(&a.out, serde_json::to_string_pretty(&stats)?).with_context(|| a.out.display().to_string())?;
            Ok(json!({ "command": "calibrate", "out": a.out, "samples": stats.count, "edges": stats.ranges.len() }))
        }
        Command::Infer(a) => infer(&a),
        Command::Verify(a) => verify(&a),
        Command::Evaluate(a) => evaluate(&a, log),
        Command::Report(a) => report(&a, log),
        Command::Synth(a) => {
            synth_dataset(&a.out, a.classes, a.per_class, a.size, a.seed)?;
            Ok(json!({
                "command": "synth",
                "out": a.out,
                "classes": a.classes,
                "per_class": a.per_class,
                "size": a.size,
                "seed": a.seed,
            }))
        }
    }
}

fn read_model(path: &Path) -> Result<TmfModel> {
    tmf::read_file(path).with_context(|| format!("reading {}", path.display()))
}

/// Optimized inference graph of a checkpoint; graphs pass through unchanged.
fn deployment_graph(model: TmfModel) -> Graph {
    match model {
        TmfModel::Checkpoint(c) => optimize(&c),
        TmfModel::Graph(g) => g,
    }
}

fn write_tmf(path: &Path, model: &TmfModel) -> Result<usize> {
    tmf::write_file(path, model).with_context(|| format!("writing {}", path.display()))
}

fn training_config(a: &TrainArgs, distill: bool) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None if distill => TrainConfig {
            model: ModelSpec { arch: "densenet".into(), preset: "desk-student".into(), width: 1.0 },
            ..TrainConfig::desk(DEFAULT_IMAGE_SIZE)
        },
        None => TrainConfig::desk(DEFAULT_IMAGE_SIZE),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    cfg.check()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, teacher: Option<&Graph>, kd: Option<(Option<f64>, Option<f64>)>) -> Result<serde_json::Value> {
    let mut cfg = training_config(a, teacher.is_some())?;
    if let Some((temperature, alpha)) = kd {
        let base = cfg.kd.unwrap_or_default();
        let kd = KdConfig { temperature: temperature.unwrap_or(base.temperature), alpha: alpha.unwrap_or(base.alpha) };
        kd.check()?;
        cfg.kd = Some(kd);
    }
    if let Some(t) = teacher {
        let size = cfg.image_size;
        if t.input_shape != [size, size, 3] {
            bail!("teacher expects {:?} inputs but training runs at {size}x{size}x3", t.input_shape);
        }
    }
    let index = scan_dataset(&a.data)?;
    let (train_idx, val_idx) = stratified_split(&index, cfg.validation_fraction, cfg.seed, SplitRounding::Floor)?;
    let train_set = LabeledImages::load(&train_idx, cfg.image_size)?;
    let val_set = LabeledImages::load(&val_idx, cfg.image_size)?;

    let mut graph = cfg.model.build(index.num_classes(), cfg.image_size, cfg.seed)?;
    graph.class_names = index.class_names.clone();
    let out = a.out.clone();
    let mut on_best = |c: &Checkpoint| -> Result<(), TrainError> {
        tmf::write_file(&out, &TmfModel::Checkpoint(c.clone()))
            .map(|_| ())
            .map_err(|e| TrainError::Callback(e.to_string()))
    };
    let outcome = three_stage_train(&graph, &train_set, &val_set, &cfg, teacher, &mut on_best)?;
    let bytes = write_tmf(&a.out, &TmfModel::Checkpoint(outcome.checkpoint))?;
    let h = &outcome.history;
    Ok(json!({
        "command": if teacher.is_some() { "distill" } else { "train" },
        "out": a.out,
        "bytes": bytes,
        "seed": cfg.seed,
        "train_samples": train_set.len(),
        "validation_samples": val_set.len(),
        "best": h.best(),
        "stage_best_epochs": h.stage_best,
        "epochs": h.epochs,
    }))
}

/// Up to `n` images of `dir`, drawn in a seeded order, as batches sized
/// for `graph`.
fn sample_batches(graph: &Graph, dir: &Path, n: usize, seed: u64) -> Result<Vec<Activation<f32>>> {
    let mut index = scan_dataset(dir)?;
    index.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    index.entries.truncate(n);
    let [h, w, c] = graph.input_shape;
    if h != w || c != 3 {
        bail!("model input {:?} is not a square RGB image", graph.input_shape);
    }
    let set = LabeledImages::load(&index, h)?;
    Ok(set.eval_batches(BATCH).map(|(x, _)| x).collect())
}

fn calibration_from_dir(graph: &Graph, dir: &Path, n: usize, seed: u64) -> Result<CalibrationStats> {
    Ok(calibrate(graph, sample_batches(graph, dir, n, seed)?, n)?)
}

fn calibration(graph: &Graph, a: &CalibrationArgs, seed: u64) -> Result<CalibrationStats> {
    match (&a.calib, &a.stats) {
        (Some(dir), _) => calibration_from_dir(graph, dir, a.calib_samples, seed),
        (None, Some(p)) => Ok(serde_json::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?),
        (None, None) => Ok(CalibrationStats::default()),
    }
}

fn int8_graph(float: &Graph, a: &CalibrationArgs, seed: u64) -> Result<Graph> {
    let stats = calibration(float, a, seed)?;
    quantize_int8(float, &stats).context("INT8 needs activation ranges: pass --calib DIR or --stats FILE")
}

fn quantize(a: &QuantizeArgs) -> Result<serde_json::Value> {
    let ckpt = read_model(&a.input)?.into_checkpoint();
    let graph = match a.mode {
        QuantMode::F16 => quantize_f16(&ckpt)?,
        QuantMode::Int8 => int8_graph(&optimize(&ckpt), &a.calibration, a.seed)?,
    };
    let payload = graph.weight_payload_bytes();
    let out_bytes = write_tmf(&a.out, &TmfModel::Graph(graph))?;
    let in_bytes = fs::metadata(&a.input)?.len();
    Ok(json!({
        "command": "quantize",
        "mode": a.mode.to_possible_value().map(|v| v.get_name().to_string()),
        "out": a.out,
        "original_bytes": in_bytes,
        "quantized_bytes": out_bytes,
        "compression_ratio": in_bytes as f64 / out_bytes as f64,
        "weight_payload_bytes": payload,
    }))
}

fn infer(a: &InferArgs) -> Result<serde_json::Value> {
    let graph = deployment_graph(read_model(&a.model)?);
    let [h, w, c] = graph.input_shape;
    if h != w || c != 3 {
        bail!("model input {:?} is not a square RGB image", graph.input_shape);
    }
    let x = load_image(&a.image, h)?;
    let out = Session::auto(&graph)?.run(&Activation::new(vec![1, h, w, c], x))?;
    let probs = out.probabilities.data;
    let best = out.logits.argmax_rows()[0];
    Ok(json!({
        "command": "infer",
        "image": a.image,
        "class": graph.class_names.get(best),
        "class_index": best,
        "class_names": graph.class_names,
        "probabilities": probs,
    }))
}

fn verify(a: &VerifyArgs) -> Result<serde_json::Value> {
    let graph = deployment_graph(read_model(&a.model)?);
    if a.record {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let len = graph.input_shape.iter().product();
        let inputs = (0..a.count).map(|_| (0..len).map(|_| rng.gen::<f32>()).collect()).collect();
        let f = Fixtures::record(&graph, inputs)?;
        fs::write(&a.fixtures, f.to_json()).with_context(|| a.fixtures.display().to_string())?;
        return Ok(json!({ "command": "verify", "recorded": f.inputs.len(), "fixtures": a.fixtures }));
    }
    let fixtures = Fixtures::read_file(&a.fixtures).with_context(|| format!("reading {}", a.fixtures.display()))?;
    let check = fixtures.check(&graph)?;
    if !check.passes() {
        bail!("max abs logit difference {:.3e} exceeds {:e}", check.max_abs_diff, FIXTURE_TOLERANCE);
    }
    Ok(json!({ "command": "verify", "fixtures": check.count, "max_abs_diff": check.max_abs_diff }))
}

/// The graph to score in `mode`, converting a float model when needed.
fn graph_for_mode(model: TmfModel, mode: EvalMode, calib: &CalibrationArgs, seed: u64) -> Result<Graph> {
    let g = deployment_graph(model);
    let have = ExecutionMode::detect(&g);
    Ok(match (mode, have) {
        (EvalMode::F32, ExecutionMode::Fp32)
        | (EvalMode::F16, ExecutionMode::Fp16Weights)
        | (EvalMode::Int8, ExecutionMode::Int8) => g,
        (EvalMode::F16, ExecutionMode::Fp32) => to_f16_graph(&g)?,
        (EvalMode::Int8, ExecutionMode::Fp32) => int8_graph(&g, calib, seed)?,
        (mode, have) => bail!("cannot evaluate a {have:?} model in {mode:?} mode"),
    })
}

fn evaluation_index(a: &EvaluateArgs) -> Result<DatasetIndex> {
    let index = scan_dataset(&a.data)?;
    Ok(match a.split {
        Split::All => index,
        Split::Validation => stratified_split(&index, a.validation_fraction, a.seed, SplitRounding::Floor)?.1,
    })
}

fn evaluate(a: &EvaluateArgs, log: &mut dyn Write) -> Result<serde_json::Value> {
    let graph = graph_for_mode(read_model(&a.model)?, a.mode, &a.calibration, a.seed)?;
    let index = evaluation_index(a)?;
    if index.num_classes() != graph.num_classes() {
        bail!("model has {} classes, dataset has {}", graph.num_classes(), index.num_classes());
    }
    let set = LabeledImages::load(&index, graph.input_shape[0])?;
    let session = Session::auto(&graph)?;
    let mut predicted = Vec::with_capacity(set.len());
    for (x, _) in set.eval_batches(BATCH) {
        predicted.extend(session.run(&x)?.logits.argmax_rows());
    }
    let report = MetricsReport::from_predictions(&set.labels, &predicted, &set.class_names)?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).with_context(|| p.display().to_string())?;
    }
    if let Some(p) = &a.confusion {
        let f = fs::File::create(p).with_context(|| p.display().to_string())?;
        report.confusion.write_csv(f)?;
    }
    write!(log, "{}", render_report(&report))?;
    Ok(json!({
        "command": "evaluate",
        "mode": format!("{:?}", session.mode()).to_lowercase(),
        "samples": set.len(),
        "accuracy": report.accuracy,
        "macro_f1": report.macro_avg.f1,
        "weighted_f1": report.weighted_avg.f1,
        "report": a.report,
        "confusion": a.confusion,
    }))
}

fn column_label(path: &Path) -> Result<&'static str> {
    Ok(match ExecutionMode::detect(read_model(path)?.graph()) {
        ExecutionMode::Fp32 => "FP32",
        ExecutionMode::Fp16Weights => "FP16",
        ExecutionMode::Int8 => "INT8",
    })
}

fn report(a: &ReportArgs, log: &mut dyn Write) -> Result<serde_json::Value> {
    let load = |p: &Path| -> Result<MetricsReport> {
        Ok(MetricsReport::from_json(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?)
    };
    let (ra, rb) = (load(&a.baseline_report)?, load(&a.quantized_report)?);
    let (la, lb) = (column_label(&a.original)?, column_label(&a.quantized)?);
    let size = |p: &Path| fs::metadata(p).map(|m| m.len()).with_context(|| p.display().to_string());
    let baseline = ModelSummary { label: la, report: &ra, size_bytes: size(&a.original)? };
    let quantized = ModelSummary { label: lb, report: &rb, size_bytes: size(&a.quantized)? };
    let table = render_comparison(baseline, quantized);
    write!(log, "{table}")?;
    Ok(json!({ "command": "report", "comparison": Comparison::new(baseline, quantized), "table": table }))
}
