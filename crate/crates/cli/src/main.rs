//! `nulog`: train, parse, evaluate and detect from the command line.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 usage or configuration error,
//! 4 validation error.

mod manifest;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nulog_core::anomaly::{
    default_sweep, delta_sweep, run_supervised_study, run_unsupervised_study, write_verdicts_csv,
    AnomalyConfig, StudyOutcome,
};
use nulog_core::evaluation::{evaluate, write_report_csv, write_robustness_csv, EvaluationReport};
use nulog_core::extraction::{
    parse_corpus, read_parsed_csv, write_parsed_csv, write_templates_csv, ParsedMessage,
};
use nulog_core::ingest::{load_config, load_labeled_bgl, load_loghub_csv, DatasetConfig, LogRecord};
use nulog_core::model::{train_with, ModelConfig, TrainOptions, DEFAULT_SEED};
use nulog_core::persistence::{load_model, save_model};
use nulog_core::tokenizer::{compute_frame_length, frame, Tokenizer, Vocabulary};
use nulog_core::{Error, Result};

use manifest::{sidecar, ModelSummary, RunManifest};

#[derive(Parser)]
#[command(name = "nulog", version, about = "Self-supervised log parsing and anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a log sample and save the archive.
    Train(TrainArgs),
    /// Extract templates with a trained model.
    Parse(ParseArgs),
    /// Score parsed output against ground truth.
    Eval(EvalArgs),
    /// Flag anomalous messages in a labeled log.
    Detect(DetectArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// TOML dataset configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in dataset settings (e.g. HDFS, BGL).
    #[arg(long)]
    dataset: Option<String>,
}

impl DatasetArgs {
    fn resolve(&self) -> Result<Option<DatasetConfig>> {
        if let Some(path) = &self.config {
            return load_config(path).map(Some);
        }
        match &self.dataset {
            Some(name) => DatasetConfig::builtin(name)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("unknown dataset {name:?}"))),
            None => Ok(None),
        }
    }

    fn require(&self) -> Result<DatasetConfig> {
        self.resolve()?
            .ok_or_else(|| Error::Config("one of --config or --dataset is required".into()))
    }
}

#[derive(Args)]
struct ArchArgs {
    /// Embedding width.
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl ArchArgs {
    fn model_config(&self, vocab: usize, frame_length: usize, epochs: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            batch_size: self.batch_size,
            epochs,
            seed,
            ..ModelConfig::new(vocab, frame_length).with_width(self.width, self.heads)
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Structured log CSV with a Content column.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, env = "NULOG_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<u32>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Top-ε cutoff; defaults to the value stored with the model.
    #[arg(long)]
    epsilon: Option<u32>,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Parsed CSV; repeat together with --truth for several datasets.
    #[arg(long, required = true)]
    parsed: Vec<PathBuf>,
    /// Ground-truth structured CSV with EventId and EventTemplate.
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Unsupervised,
    Supervised,
}

#[derive(Args)]
struct DetectArgs {
    /// Raw BGL log, or a structured CSV with a Label column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    epsilon: Option<u32>,
    #[arg(long, default_value_t = nulog_core::anomaly::DEFAULT_DELTA)]
    delta: f64,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Leading share of the log to use.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = nulog_core::anomaly::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 2)]
    finetune_epochs: usize,
    #[arg(long, env = "NULOG_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    arch: ArchArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Csv(c) if c.is_io_error() => 2,
        Error::Config(_) | Error::Schema(_) | Error::Usage(_) => 3,
        _ => 4,
    }
}

fn tokenize_all(records: &[LogRecord], tokenizer: &Tokenizer) -> Vec<Vec<String>> {
    records.iter().map(|r| tokenizer.tokenize(&r.content)).collect()
}

fn train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let config = args.dataset.require()?;
    let records = load_loghub_csv(&args.data)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{} contains no messages", args.data.display())));
    }
    let tokenizer = Tokenizer::new(&config.tokenization_filter)?;
    let tokens = tokenize_all(&records, &tokenizer);
    let vocab = Vocabulary::build(&tokens)?;
    let payload = match config.frame_length_override {
        Some(m) => m as usize,
        None => compute_frame_length(&tokens)?,
    };
    let epochs = args.epochs.unwrap_or(config.epochs) as usize;
    let model_config = args.arch.model_config(vocab.len(), payload + 1, epochs, args.seed);
    let seqs: Vec<_> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| frame(i, t, payload, &vocab))
        .collect();
    log::info!(
        "training on {} messages, vocabulary {}, frame length {}",
        seqs.len(),
        vocab.len(),
        payload + 1
    );
    let trained = train_with(&seqs, &model_config, &TrainOptions::default())?;
    save_model(&trained.state, &vocab, &args.out_model)?;

    let manifest_path = sidecar(&args.out_model, "manifest.json");
    let mut m = RunManifest::new("train", &config, args.seed);
    m.model = Some(ModelSummary {
        d: model_config.d,
        heads: model_config.heads,
        blocks: model_config.blocks,
        frame_length: model_config.frame_length,
        vocab_size: model_config.vocab_size,
        batch_size: model_config.batch_size,
    });
    m.set("epochs", epochs);
    m.set("epoch_losses", &trained.epoch_losses);
    m.inputs.push(args.data.clone());
    m.outputs = vec![args.out_model.clone(), manifest_path.clone()];
    m.elapsed_seconds = started.elapsed().as_secs_f64();
    m.write(&manifest_path)
}

fn parse(args: &ParseArgs) -> Result<()> {
    let started = Instant::now();
    let (state, vocab, model_config) = load_model(&args.model)?;
    let stored = sidecar(&args.model, "manifest.json");
    let mut config = match args.dataset.resolve()? {
        Some(c) => c,
        None if stored.exists() => RunManifest::read(&stored)?.config,
        None => {
            return Err(Error::Config(format!(
                "no dataset configuration given and {} does not exist",
                stored.display()
            )))
        }
    };
    if let Some(eps) = args.epsilon {
        config.epsilon = eps;
    }
    config.validate()?;
    let records = load_loghub_csv(&args.data)?;
    let (parsed, store) = parse_corpus(&records, &state, &vocab, &config)?;
    write_parsed_csv(&args.out, &records, &parsed)?;
    let templates_path = sidecar(&args.out, "templates.csv");
    write_templates_csv(&templates_path, &store)?;
    log::info!("{} messages, {} templates", parsed.len(), store.len());

    let manifest_path = sidecar(&args.out, "manifest.json");
    let mut m = RunManifest::new("parse", &config, model_config.seed);
    m.set("epsilon", config.epsilon);
    m.set("templates", store.len());
    m.inputs = vec![args.data.clone(), args.model.clone()];
    m.outputs = vec![args.out.clone(), templates_path, manifest_path.clone()];
    m.elapsed_seconds = started.elapsed().as_secs_f64();
    m.write(&manifest_path)
}

/// Joins parsed rows to truth records by line id; both sides must cover
/// the same ids.
fn align(parsed_path: &Path, truth: &[LogRecord]) -> Result<Vec<ParsedMessage>> {
    let rows = read_parsed_csv(parsed_path)?;
    let index: HashMap<u64, usize> = truth.iter().enumerate().map(|(i, r)| (r.line_id, i)).collect();
    if index.len() != truth.len() {
        return Err(Error::Validation("ground truth repeats a line id".into()));
    }
    if rows.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} parsed rows for {} ground-truth lines",
            rows.len(),
            truth.len()
        )));
    }
    let mut seen = vec![false; truth.len()];
    rows.into_iter()
        .map(|row| {
            let &i = index.get(&row.line_id).ok_or_else(|| {
                Error::Validation(format!("line {} has no ground truth", row.line_id))
            })?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("line {} parsed twice", row.line_id)));
            }
            Ok(ParsedMessage {
                message_index: i,
                variables: row.variable_list()?,
                template: row.template,
                template_id: row.template_id,
            })
        })
        .collect()
}

fn eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    if args.parsed.len() != args.truth.len() {
        return Err(Error::Usage(format!(
            "{} --parsed files for {} --truth files",
            args.parsed.len(),
            args.truth.len()
        )));
    }
    let explicit = args.dataset.resolve()?;
    let mut reports: Vec<EvaluationReport> = Vec::new();
    for (parsed_path, truth_path) in args.parsed.iter().zip(&args.truth) {
        let stored = sidecar(parsed_path, "manifest.json");
        let config = match &explicit {
            Some(c) => c.clone(),
            None if stored.exists() => RunManifest::read(&stored)?.config,
            None => DatasetConfig::new(
                &parsed_path.file_stem().unwrap_or_default().to_string_lossy(),
                "([ ])",
                1,
                1,
            ),
        };
        let tokenizer = Tokenizer::new(&config.tokenization_filter)?;
        let truth = load_loghub_csv(truth_path)?;
        let parsed = align(parsed_path, &truth)?;
        let report = evaluate(&config.name, &parsed, &truth, &tokenizer)?;
        log::info!(
            "{}: PA {:.4}, edit distance {:.3}",
            report.dataset,
            report.parsing_accuracy,
            report.mean_edit_distance
        );
        reports.push(report);
    }
    write_report_csv(&args.out, &reports)?;
    let robustness = sidecar(&args.out, "robustness.csv");
    let scores: Vec<(String, f64)> = reports
        .iter()
        .map(|r| (r.dataset.clone(), r.parsing_accuracy))
        .collect();
    write_robustness_csv(&robustness, &scores)?;

    let manifest_path = sidecar(&args.out, "manifest.json");
    let name = if reports.len() == 1 { reports[0].dataset.clone() } else { "batch".into() };
    let mut m = RunManifest::new("eval", &DatasetConfig::new(&name, "([ ])", 1, 1), 0);
    m.dataset = name;
    m.inputs = args.parsed.iter().chain(&args.truth).cloned().collect();
    m.outputs = vec![args.out.clone(), robustness, manifest_path.clone()];
    m.elapsed_seconds = started.elapsed().as_secs_f64();
    m.write(&manifest_path)
}

fn load_labeled(path: &Path, fraction: f64) -> Result<Vec<LogRecord>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return load_labeled_bgl(path, fraction);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut records = load_loghub_csv(path)?;
    if records.iter().any(|r| r.anomaly_label.is_none()) {
        return Err(Error::Schema(format!("{} has no Label column", path.display())));
    }
    let keep = ((records.len() as f64) * fraction + 1e-9).floor() as usize;
    records.truncate(keep);
    Ok(records)
}

fn write_metrics(path: &Path, mode: &str, outcome: &StudyOutcome, sweep: Option<&[(f64, nulog_core::anomaly::DetectionMetrics)]>) -> Result<()> {
    let mut report = serde_json::json!({
        "mode": mode,
        "test_messages": outcome.verdicts.len(),
        "accuracy": outcome.metrics.accuracy,
        "precision": outcome.metrics.precision,
        "recall": outcome.metrics.recall,
        "f1": outcome.metrics.f1,
    });
    if let Some(sweep) = sweep {
        report["delta_sweep"] = sweep
            .iter()
            .map(|(d, m)| serde_json::json!({ "delta": d, "metrics": m }))
            .collect();
    }
    let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn detect(args: &DetectArgs) -> Result<()> {
    let started = Instant::now();
    let config = args
        .dataset
        .resolve()?
        .unwrap_or_else(|| DatasetConfig::builtin("BGL").expect("built-in"));
    let epsilon = args.epsilon.unwrap_or(config.epsilon) as usize;
    let study = AnomalyConfig {
        epsilon,
        delta: args.delta,
        train_fraction: args.train_fraction,
        epochs_unsupervised: args.pretrain_epochs,
        epochs_finetune: args.finetune_epochs,
        seed: args.seed,
    };
    study.validate()?;
    let records = load_labeled(&args.data, args.fraction)?;
    let tokenizer = Tokenizer::new(&config.tokenization_filter)?;
    let arch = args.arch.model_config(0, 0, 0, args.seed);
    let (mode, outcome) = match args.mode {
        Mode::Unsupervised => ("unsupervised", run_unsupervised_study(&records, &tokenizer, &arch, &study)?),
        Mode::Supervised => ("supervised", run_supervised_study(&records, &tokenizer, &arch, &study)?),
    };
    let sweep = match args.mode {
        Mode::Unsupervised => Some(delta_sweep(&outcome.scores, &outcome.labels, &default_sweep())?),
        Mode::Supervised => None,
    };
    write_verdicts_csv(&args.out, &records, &outcome)?;
    let metrics_path = sidecar(&args.out, "metrics.json");
    write_metrics(&metrics_path, mode, &outcome, sweep.as_deref())?;
    log::info!(
        "{mode}: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}",
        outcome.metrics.accuracy,
        outcome.metrics.precision,
        outcome.metrics.recall,
        outcome.metrics.f1
    );

    let manifest_path = sidecar(&args.out, "manifest.json");
    let mut m = RunManifest::new("detect", &config, args.seed);
    m.set("mode", mode);
    m.set("anomaly", study);
    m.set("fraction", args.fraction);
    m.set("width", args.arch.width);
    m.inputs.push(args.data.clone());
    m.outputs = vec![args.out.clone(), metrics_path, manifest_path.clone()];
    m.elapsed_seconds = started.elapsed().as_secs_f64();
    m.write(&manifest_path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Parse(a) => parse(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
