//! `tage`: train, evaluate, predict, generate and inspect corpora.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::{Deserialize, Serialize};

use tage_core::corpus::{corpus_stats, read_corpus, write_corpus, AnnotatedInstruction, Split};
use tage_core::decoder::DecodeLimits;
use tage_core::encoder::EncoderPreset;
use tage_core::eval::{score, EvalInstance};
use tage_core::inference::{predict, predict_tokens, PredictionRecord};
use tage_core::model::TagModel;
use tage_core::synth::generate_synthetic_corpus;
use tage_core::train::{evaluate, train, StopReason, TrainOptions, TrainingConfig};
use tage_core::vocab::{LabelConfig, LabelVocabularies};
use tage_core::Error;

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "tage", version, about = "Task and argument extraction with object grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes a checkpoint, an epoch log and a manifest.
    Train(TrainArgs),
    /// Score predictions against gold, or a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Predict tasks for one text or every instruction of a corpus.
    Predict(PredictArgs),
    /// Write a synthetic corpus.
    Generate(GenerateArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "encoder-preset")]
    encoder_preset: Option<String>,
    #[arg(long = "max-tasks")]
    max_tasks: Option<usize>,
    #[arg(long = "max-args")]
    max_args: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Separate dev corpus; otherwise the corpus `dev` split is used.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Predictions (prediction or corpus JSON lines).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Gold annotations (corpus or prediction JSON lines).
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    size: usize,
    /// Leave the split field unset instead of assigning 80/10/10.
    #[arg(long)]
    no_splits: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
}

/// On-disk run configuration shared by every command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    labels: Option<PathBuf>,
    corpus: Option<PathBuf>,
    dev: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    training: TrainingConfig,
}

/// Failure categories, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    MissingFile(String),
    InvalidData(String),
    Mismatch(String),
    Checkpoint(String),
    Config(String),
    Diverged(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::MissingFile(_) => 3,
            Failure::InvalidData(_) => 4,
            Failure::Mismatch(_) => 5,
            Failure::Checkpoint(_) => 6,
            Failure::Config(_) => 7,
            Failure::Diverged(_) => 8,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::MissingFile(_) => "missing_file",
            Failure::InvalidData(_) => "invalid_data",
            Failure::Mismatch(_) => "checkpoint_mismatch",
            Failure::Checkpoint(_) => "checkpoint",
            Failure::Config(_) => "config",
            Failure::Diverged(_) => "diverged",
            Failure::Other(_) => "error",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::MissingFile(m)
            | Failure::InvalidData(m)
            | Failure::Mismatch(m)
            | Failure::Checkpoint(m)
            | Failure::Config(m)
            | Failure::Diverged(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::MissingFile(m),
            Error::MalformedLine { .. }
            | Error::InvalidInstruction { .. }
            | Error::UnknownLabel { .. }
            | Error::TooLong { .. }
            | Error::EmptyInput(_)
            | Error::LengthMismatch { .. }
            | Error::Json(_) => Failure::InvalidData(m),
            Error::CheckpointMismatch(_) => Failure::Mismatch(m),
            Error::Checkpoint(_) => Failure::Checkpoint(m),
            Error::Config(_) => Failure::Config(m),
            Error::Diverged { .. } => Failure::Diverged(m),
            _ => Failure::Other(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path, role: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingFile(format!("{role} `{}` does not exist", path.display())))
    }
}

fn load_run_config(common: &Common) -> CliResult<RunConfig> {
    let mut rc = match &common.config {
        Some(path) => {
            require_file(path, "config")?;
            let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            let mut rc: RunConfig =
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut rc.labels, &mut rc.corpus, &mut rc.dev, &mut rc.checkpoint, &mut rc.out]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            rc
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &common.corpus {
        rc.corpus = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        rc.checkpoint = Some(p.clone());
    }
    if let Some(p) = &common.out {
        rc.out = Some(p.clone());
    }
    if let Some(seed) = common.seed {
        rc.training.seed = seed;
    }
    if let Some(name) = &common.encoder_preset {
        rc.training.encoder.preset = EncoderPreset::parse(name).map_err(Failure::from)?;
    }
    if let Some(n) = common.max_tasks {
        rc.training.limits.max_tasks = n;
    }
    if let Some(n) = common.max_args {
        rc.training.limits.max_args = n;
    }
    rc.training.limits.validate()?;
    Ok(rc)
}

fn labels(rc: &RunConfig) -> CliResult<LabelVocabularies> {
    match &rc.labels {
        Some(path) => {
            require_file(path, "label config")?;
            Ok(LabelVocabularies::from_config(&LabelConfig::load(path)?)?)
        }
        None => Ok(LabelVocabularies::default()),
    }
}

fn corpus_path(rc: &RunConfig) -> CliResult<&PathBuf> {
    let path = rc
        .corpus
        .as_ref()
        .ok_or_else(|| Failure::Usage("a corpus is required (--corpus or config `corpus`)".into()))?;
    require_file(path, "corpus")?;
    Ok(path)
}

fn checkpoint_path(rc: &RunConfig) -> CliResult<&PathBuf> {
    let path = rc
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Usage("a checkpoint is required (--checkpoint or config `checkpoint`)".into()))?;
    require_file(path, "checkpoint")?;
    Ok(path)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

/// Writes `manifest.json` into `dir`: command, arguments, configuration,
/// seed and code version.
fn write_manifest(dir: &Path, command: &str, rc: &RunConfig, extra: serde_json::Value) -> CliResult<()> {
    let manifest = serde_json::json!({
        "command": command,
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": rc.training.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": rc,
        "details": extra,
        "created_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    write_text(&dir.join(MANIFEST), &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))
}

fn select_split(corpus: &[AnnotatedInstruction], split: Split) -> Vec<AnnotatedInstruction> {
    corpus.iter().filter(|i| i.split == Some(split)).cloned().collect()
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let mut rc = load_run_config(&args.common)?;
    if let Some(n) = args.epochs {
        rc.training.max_epochs = n;
        rc.training.patience = rc.training.patience.min(n);
    }
    if let Some(p) = &args.dev {
        rc.dev = Some(p.clone());
    }
    let labels = labels(&rc)?;
    let corpus = read_corpus(corpus_path(&rc)?, Some(&labels))?;
    let (train_set, dev_set) = match &rc.dev {
        Some(dev) => {
            require_file(dev, "dev corpus")?;
            let train_set = if corpus.iter().any(|i| i.split.is_some()) {
                select_split(&corpus, Split::Train)
            } else {
                corpus.clone()
            };
            (train_set, read_corpus(dev, Some(&labels))?)
        }
        None if corpus.iter().any(|i| i.split.is_some()) => {
            (select_split(&corpus, Split::Train), select_split(&corpus, Split::Dev))
        }
        None => {
            warn!("corpus has no split annotation; using every instruction for training and dev");
            (corpus.clone(), corpus.clone())
        }
    };
    let out = rc.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    ensure_dir(&out)?;
    let options = TrainOptions {
        log_path: Some(out.join("train_log.jsonl")),
        checkpoint_path: Some(out.join("model.safetensors")),
    };
    let outcome = train(&rc.training, labels, &train_set, &dev_set, &options)?;
    let details = serde_json::json!({
        "train_instructions": train_set.len(),
        "dev_instructions": dev_set.len(),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "stop": outcome.stop,
        "parameters": outcome.model.parameter_count(),
    });
    write_manifest(&out, "train", &rc, details.clone())?;
    emit(&(serde_json::to_string(&details).expect("json") + "\n"));
    if let StopReason::Diverged { epoch } = outcome.stop {
        return Err(Failure::Diverged(format!(
            "non-finite loss at epoch {epoch}; best checkpoint kept at {}",
            out.join("model.safetensors").display()
        )));
    }
    Ok(())
}

/// A line of a corpus file or a prediction file.
#[derive(Deserialize)]
#[serde(untagged)]
enum UnitLine {
    Prediction(PredictionRecord),
    Annotated(AnnotatedInstruction),
}

fn read_units(path: &Path) -> CliResult<Vec<EvalInstance>> {
    require_file(path, "input")?;
    let file = std::fs::File::open(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::from(Error::io(path, e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let unit: UnitLine = serde_json::from_str(&line)
            .map_err(|e| Failure::InvalidData(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(match unit {
            UnitLine::Prediction(p) => p.to_eval(),
            UnitLine::Annotated(a) => EvalInstance::from_annotated(&a),
        });
    }
    Ok(out)
}

fn run_eval(args: &EvalArgs) -> CliResult<()> {
    let rc = load_run_config(&args.common)?;
    let (report, details) = match (&args.pred, &args.gold) {
        (Some(pred), Some(gold)) => {
            let report = score(&read_units(pred)?, &read_units(gold)?)?;
            (report, serde_json::json!({"pred": pred, "gold": gold}))
        }
        (None, None) => {
            let ckpt = checkpoint_path(&rc)?;
            let labels = labels(&rc)?;
            let (model, _) = TagModel::load_expecting(ckpt, &labels)?;
            let mut corpus = read_corpus(corpus_path(&rc)?, Some(&labels))?;
            if corpus.iter().any(|i| i.split == Some(Split::Test)) {
                corpus = select_split(&corpus, Split::Test);
            }
            let (report, _) = evaluate(&model, &corpus, rc.training.limits)?;
            (report, serde_json::json!({"checkpoint": ckpt, "instructions": corpus.len()}))
        }
        _ => return Err(Failure::Usage("--pred and --gold must be given together".into())),
    };
    let text = report.to_text();
    match &rc.out {
        Some(dir) => {
            ensure_dir(dir)?;
            write_text(&dir.join("report.txt"), &text)?;
            let json = serde_json::to_string_pretty(&report.to_json()).expect("json") + "\n";
            write_text(&dir.join("report.json"), &json)?;
            write_manifest(dir, "eval", &rc, details)?;
        }
        None => emit(&text),
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> CliResult<()> {
    let rc = load_run_config(&args.common)?;
    let labels = labels(&rc)?;
    let (model, _) = TagModel::load_expecting(checkpoint_path(&rc)?, &labels)?;
    let limits: DecodeLimits = rc.training.limits;
    if let Some(text) = &args.text {
        let record = predict(&model, text, limits)?;
        let json = serde_json::to_string_pretty(&record.tasks).expect("json");
        match &rc.out {
            Some(dir) => {
                ensure_dir(dir)?;
                write_text(&dir.join("prediction.json"), &(json + "\n"))?;
                write_manifest(dir, "predict", &rc, serde_json::json!({"text": text}))?;
            }
            None => emit(&(json + "\n")),
        }
        return Ok(());
    }
    let corpus = read_corpus(corpus_path(&rc)?, None)?;
    let tokens: Vec<Vec<String>> = corpus.into_iter().map(|i| i.tokens).collect();
    let results = predict_tokens(&model, &tokens, limits)?;
    let mut lines = String::new();
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(record) => lines.push_str(&(serde_json::to_string(&record).expect("json") + "\n")),
            Err(e) => {
                failed += 1;
                eprintln!("warning: instruction {}: {e}", i + 1);
                let empty = PredictionRecord {
                    tokens: tokens[i].clone(),
                    tasks: Vec::new(),
                    objects: Vec::new(),
                };
                lines.push_str(&(serde_json::to_string(&empty).expect("json") + "\n"));
            }
        }
    }
    match &rc.out {
        Some(dir) => {
            ensure_dir(dir)?;
            write_text(&dir.join("predictions.jsonl"), &lines)?;
            write_manifest(dir, "predict", &rc, serde_json::json!({"instructions": tokens.len(), "failed": failed}))?;
        }
        None => emit(&lines),
    }
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> CliResult<()> {
    let rc = load_run_config(&args.common)?;
    let mut corpus = generate_synthetic_corpus(rc.training.seed, args.size);
    if !args.no_splits {
        let n = corpus.len();
        let dev_from = n * 8 / 10;
        let test_from = n * 9 / 10;
        for (i, inst) in corpus.iter_mut().enumerate() {
            inst.split = Some(if i < dev_from {
                Split::Train
            } else if i < test_from {
                Split::Dev
            } else {
                Split::Test
            });
        }
    }
    let mut buf = Vec::new();
    write_corpus(&mut buf, &corpus).expect("write to memory");
    match &rc.out {
        Some(dir) => {
            ensure_dir(dir)?;
            std::fs::write(dir.join("corpus.jsonl"), &buf).map_err(|e| Failure::from(Error::io(dir, e)))?;
            write_manifest(dir, "generate", &rc, serde_json::json!({"size": args.size}))?;
        }
        None => emit(&String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn run_stats(args: &StatsArgs) -> CliResult<()> {
    let rc = load_run_config(&args.common)?;
    let labels = labels(&rc)?;
    let corpus = read_corpus(corpus_path(&rc)?, Some(&labels))?;
    let stats = corpus_stats(&corpus);
    match &rc.out {
        Some(dir) => {
            ensure_dir(dir)?;
            write_text(&dir.join("stats.txt"), &stats.to_table())?;
            write_manifest(dir, "stats", &rc, serde_json::json!({"instructions": corpus.len()}))?;
        }
        None => emit(&stats.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(Failure::Usage(String::new()).code());
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Generate(a) => run_generate(a),
        Command::Stats(a) => run_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind(), f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
