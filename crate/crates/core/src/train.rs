//! Joint training loop with dev-set early stopping.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedInstruction;
use crate::decoder::DecodeLimits;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{score, EvalInstance, EvalReport};
use crate::inference::{predict_tokens, PredictionRecord};
use crate::loss::LossBreakdown;
use crate::model::{ModelConfig, Precision, TagModel};
use crate::vocab::LabelVocabularies;

const BACKWARD_STACK: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub limits: DecodeLimits,
    /// Global gradient-norm ceiling; off by default.
    pub clip_norm: Option<f64>,
    /// Stop as soon as the monitored dev F1 reaches this value.
    pub target_f1: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            encoder: EncoderConfig::default(),
            limits: DecodeLimits::default(),
            clip_norm: None,
            target_f1: None,
            precision: Precision::F32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        self.limits.validate()
    }

    pub fn model_config(&self, labels: &LabelVocabularies) -> ModelConfig {
        let mut config = ModelConfig::new(self.encoder.clone(), labels, self.limits, self.seed);
        config.precision = self.precision;
        config
    }
}

/// Tracks the best dev score; dev loss breaks ties so progress is seen
/// while strict F1 is still flat.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it is a new best.
    pub fn observe(&mut self, metric: f64, loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((m, l)) => metric > m || (metric == m && loss < l),
        };
        if improved {
            self.best = Some((metric, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best.map(|(m, _)| m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub tasks_f1: f64,
    pub args_f1: f64,
    pub combined_f1: f64,
    pub combined_grounded_f1: f64,
}

impl From<&EvalReport> for DevScores {
    fn from(r: &EvalReport) -> Self {
        Self {
            tasks_f1: r.tasks.f1,
            args_f1: r.args.f1,
            combined_f1: r.combined.f1,
            combined_grounded_f1: r.combined_grounded.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub dev_loss: f64,
    pub dev: DevScores,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// JSON-lines log, one record per epoch.
    pub log_path: Option<PathBuf>,
    /// Written whenever the dev score improves.
    pub checkpoint_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    /// Holds the best weights seen.
    pub model: TagModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

/// Runs `backward` on a thread with a large stack; graph traversal is
/// recursive and decoding graphs are deep.
pub fn backward(loss: &Tensor) -> Result<GradStore> {
    let grads = std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(BACKWARD_STACK)
            .spawn_scoped(s, || loss.backward())
            .expect("spawn backward thread")
            .join()
            .expect("backward thread panicked")
    })?;
    Ok(grads)
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(())
}

/// Predicts and scores a corpus. Instructions that cannot be encoded count
/// as empty predictions.
pub fn evaluate(
    model: &TagModel,
    corpus: &[AnnotatedInstruction],
    limits: DecodeLimits,
) -> Result<(EvalReport, Vec<Option<PredictionRecord>>)> {
    let tokens: Vec<Vec<String>> = corpus.iter().map(|i| i.tokens.clone()).collect();
    let preds: Vec<Option<PredictionRecord>> = predict_tokens(model, &tokens, limits)?
        .into_iter()
        .map(|r| r.ok())
        .collect();
    let pred_units: Vec<EvalInstance> = preds
        .iter()
        .map(|p| p.as_ref().map(PredictionRecord::to_eval).unwrap_or_default())
        .collect();
    let gold_units: Vec<EvalInstance> = corpus.iter().map(EvalInstance::from_annotated).collect();
    Ok((score(&pred_units, &gold_units)?, preds))
}

fn mean_loss(model: &TagModel, corpus: &[AnnotatedInstruction], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in corpus.chunks(batch_size) {
        let batch: Vec<&AnnotatedInstruction> = chunk.iter().collect();
        total += model.loss(&batch)?.breakdown.total * chunk.len() as f64;
    }
    Ok(total / corpus.len() as f64)
}

fn append_log(path: &PathBuf, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

pub fn train(
    config: &TrainingConfig,
    labels: LabelVocabularies,
    train_set: &[AnnotatedInstruction],
    dev_set: &[AnnotatedInstruction],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::EmptyInput("training and dev splits must be nonempty".into()));
    }
    let model = TagModel::for_corpus(config.model_config(&labels), labels, train_set)?;
    train_model(config, model, train_set, dev_set, options)
}

/// Trains an already built model.
pub fn train_model(
    config: &TrainingConfig,
    model: TagModel,
    train_set: &[AnnotatedInstruction],
    dev_set: &[AnnotatedInstruction],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vars = model.trainable_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    if let Some(path) = &options.log_path {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, "").map_err(|e| Error::io(path, e))?;
    }

    let mut stopper = EarlyStopping::new(config.patience);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best = None;
    let mut best_epoch = None;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&AnnotatedInstruction> = chunk.iter().map(|&i| &train_set[i]).collect();
            let out = model.loss(&batch)?;
            if !out.breakdown.is_finite() {
                warn!("non-finite loss in epoch {epoch}; keeping the best weights so far");
                stop = StopReason::Diverged { epoch };
                break 'epochs;
            }
            let mut grads = backward(&out.total)?;
            if let Some(max) = config.clip_norm {
                clip_gradients(&mut grads, &vars, max)?;
            }
            opt.step(&grads)?;
            let w = chunk.len() as f64;
            sums.task += out.breakdown.task * w;
            sums.arg += out.breakdown.arg * w;
            sums.grounding += out.breakdown.grounding * w;
            sums.total += out.breakdown.total * w;
            sums.clamped += out.breakdown.clamped;
        }
        let n = train_set.len() as f64;
        let train_loss = LossBreakdown {
            task: sums.task / n,
            arg: sums.arg / n,
            grounding: sums.grounding / n,
            total: sums.total / n,
            clamped: sums.clamped,
        };

        let (report, _) = evaluate(&model, dev_set, config.limits)?;
        let dev_loss = mean_loss(&model, dev_set, config.batch_size)?;
        let dev = DevScores::from(&report);
        let improved = stopper.observe(dev.combined_grounded_f1, dev_loss);
        let record = EpochRecord {
            epoch,
            train: train_loss,
            dev_loss,
            dev,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4} dev loss {:.4} dev F1 {:.3}{}",
            train_loss.total,
            dev_loss,
            dev.combined_grounded_f1,
            if improved { " *" } else { "" }
        );
        if let Some(path) = &options.log_path {
            append_log(path, &record)?;
        }
        history.push(record);
        if improved {
            best = Some(model.store().snapshot()?);
            best_epoch = Some(epoch);
            if let Some(path) = &options.checkpoint_path {
                model.save(path, &serde_json::to_value(&history)?)?;
            }
        }
        if config.target_f1.is_some_and(|t| dev.combined_grounded_f1 >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }

    if let Some(best) = best {
        model
            .store()
            .assign(&best)
            .map_err(|e| Error::Checkpoint(format!("restoring best weights: {e}")))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stop,
    })
}
