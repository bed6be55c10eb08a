//! Text in, grounded tasks out.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedInstruction, ArgumentRecord, TaskRecord};
use crate::decoder::DecodeLimits;
use crate::encoder::word_tokenize;
use crate::error::{Error, Result};
use crate::eval::{EvalArg, EvalInstance, EvalTask};
use crate::grounding::assign_grounding;
use crate::model::{RawPrediction, TagModel};
use crate::vocab::VocabKind;

const BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub text: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedArg {
    pub text: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    pub object: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedTask {
    pub task: SpanLabel,
    pub args: Vec<PredictedArg>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMention {
    pub start: usize,
    pub end: usize,
    pub class: String,
}

/// Prediction for one instruction, also the line format of prediction
/// files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub tasks: Vec<PredictedTask>,
    #[serde(default)]
    pub objects: Vec<ObjectMention>,
}

/// `<task span, task type, relation, argument span, object>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedPentuple {
    pub task: SpanLabel,
    pub relation: String,
    pub argument: (String, usize, usize),
    pub object: Option<String>,
}

impl PredictedTask {
    pub fn pentuples(&self) -> Vec<GroundedPentuple> {
        self.args
            .iter()
            .map(|a| GroundedPentuple {
                task: self.task.clone(),
                relation: a.label.clone(),
                argument: (a.text.clone(), a.start, a.end),
                object: a.object.clone(),
            })
            .collect()
    }
}

impl PredictionRecord {
    pub fn from_raw(tokens: Vec<String>, raw: &RawPrediction, model: &TagModel) -> Result<Self> {
        let labels = model.labels();
        let text = |s: usize, e: usize| tokens[s..=e].join(" ");
        let tasks = raw
            .tasks
            .iter()
            .map(|t| {
                Ok(PredictedTask {
                    task: SpanLabel {
                        text: text(t.start, t.end),
                        start: t.start,
                        end: t.end,
                        label: labels.decode(VocabKind::Task, t.class)?.to_string(),
                    },
                    args: t
                        .args
                        .iter()
                        .map(|a| {
                            let object = assign_grounding(a.start, a.end, &raw.objects)
                                .map(|c| labels.decode(VocabKind::Object, c).map(str::to_string))
                                .transpose()?;
                            Ok(PredictedArg {
                                text: text(a.start, a.end),
                                start: a.start,
                                end: a.end,
                                label: labels.decode(VocabKind::Argument, a.class)?.to_string(),
                                object,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let objects = raw
            .objects
            .iter()
            .map(|o| {
                Ok(ObjectMention {
                    start: o.start,
                    end: o.end,
                    class: labels.decode(VocabKind::Object, o.class)?.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { tokens, tasks, objects })
    }

    pub fn pentuples(&self) -> Vec<GroundedPentuple> {
        self.tasks.iter().flat_map(PredictedTask::pentuples).collect()
    }

    /// Corpus form: tasks with arguments and BIO tags from the objects.
    /// Tasks are stably sorted into surface order, as the corpus requires.
    pub fn to_annotated(&self) -> AnnotatedInstruction {
        let mut inst = AnnotatedInstruction::unannotated(self.tokens.clone());
        for o in &self.objects {
            for i in o.start..=o.end {
                let prefix = if i == o.start { "B" } else { "I" };
                inst.bio[i] = format!("{prefix}-{}", o.class);
            }
        }
        inst.tasks = self
            .tasks
            .iter()
            .map(|t| TaskRecord {
                start: t.task.start,
                end: t.task.end,
                task_type: t.task.label.clone(),
                args: t
                    .args
                    .iter()
                    .map(|a| ArgumentRecord::new(a.start, a.end, a.label.clone()))
                    .collect(),
            })
            .collect();
        inst.tasks.sort_by_key(|t| t.start);
        inst
    }

    pub fn to_eval(&self) -> EvalInstance {
        EvalInstance {
            tasks: self
                .tasks
                .iter()
                .map(|t| EvalTask {
                    start: t.task.start,
                    end: t.task.end,
                    task_type: t.task.label.clone(),
                    args: t
                        .args
                        .iter()
                        .map(|a| EvalArg {
                            start: a.start,
                            end: a.end,
                            arg_type: a.label.clone(),
                            object: a.object.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Predicts one raw instruction.
pub fn predict(model: &TagModel, text: &str, limits: DecodeLimits) -> Result<PredictionRecord> {
    let tokens = word_tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput("instruction text is empty".into()));
    }
    predict_tokens(model, &[tokens], limits)?.pop().expect("one result")
}

/// Predicts pre-tokenised instructions in mini-batches. Inputs that cannot
/// be encoded fail individually.
pub fn predict_tokens(
    model: &TagModel,
    batch: &[Vec<String>],
    limits: DecodeLimits,
) -> Result<Vec<Result<PredictionRecord>>> {
    let mut results: Vec<Option<Result<PredictionRecord>>> = batch.iter().map(|_| None).collect();
    let mut ok = Vec::new();
    for (i, tokens) in batch.iter().enumerate() {
        match model.encoder().tokenize_align(tokens) {
            Ok(_) => ok.push(i),
            Err(Error::TooLong { len, max, .. }) => {
                results[i] = Some(Err(Error::TooLong {
                    id: format!("input {i}"),
                    len,
                    max,
                }))
            }
            Err(e) => results[i] = Some(Err(e)),
        }
    }
    for chunk in ok.chunks(BATCH) {
        let tokens: Vec<&[String]> = chunk.iter().map(|&i| batch[i].as_slice()).collect();
        let raw = model.decode(&tokens, limits)?;
        for (&i, raw) in chunk.iter().zip(&raw) {
            results[i] = Some(PredictionRecord::from_raw(batch[i].clone(), raw, model));
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every input handled")).collect())
}

/// Predicts raw texts, keeping order; one failure never fails the batch.
pub fn predict_batch(model: &TagModel, texts: &[&str], limits: DecodeLimits) -> Vec<Result<PredictionRecord>> {
    let tokens: Vec<Vec<String>> = texts.iter().map(|t| word_tokenize(t)).collect();
    let mut results: Vec<Option<Result<PredictionRecord>>> = texts.iter().map(|_| None).collect();
    let mut keep = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.is_empty() {
            results[i] = Some(Err(Error::EmptyInput(format!("input {i} is empty"))));
        } else {
            keep.push(i);
        }
    }
    let batch: Vec<Vec<String>> = keep.iter().map(|&i| tokens[i].clone()).collect();
    match predict_tokens(model, &batch, limits) {
        Ok(out) => {
            for (&i, r) in keep.iter().zip(out) {
                results[i] = Some(r);
            }
        }
        Err(e) => {
            let msg = e.to_string();
            for &i in &keep {
                results[i] = Some(Err(Error::Checkpoint(msg.clone())));
            }
        }
    }
    results.into_iter().map(|r| r.expect("every input handled")).collect()
}
