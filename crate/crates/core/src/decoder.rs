//! Nested auto-regressive decoding of tasks and their arguments.
//!
//! The outer decoder emits one task per step (span + type) until it emits
//! EOS. After each task, the inner decoder emits that task's arguments the
//! same way, starting from a fresh state. Both decoders feed back the sum of
//! the representations they have already emitted.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedInstruction;
use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::nn::{embedding, linear, log_softmax_last, AdditiveAttention, LstmCell, LstmState, Params};
use crate::span::{greedy_select, SpanContext, SpanDetector, SpanPrediction};
use crate::vocab::{LabelVocabularies, VocabKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_tasks: usize,
    pub max_args: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self {
            max_tasks: 8,
            max_args: 8,
        }
    }
}

impl DecodeLimits {
    pub fn new(max_tasks: usize, max_args: usize) -> Result<Self> {
        let limits = Self { max_tasks, max_args };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tasks == 0 || self.max_args == 0 {
            return Err(Error::Config("decode limits must be at least 1".into()));
        }
        Ok(())
    }
}

/// Widths and class counts of the decoder. Class counts include EOS, which
/// is always the last class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub hidden: usize,
    pub span_hidden: usize,
    pub type_dim: usize,
    pub task_classes: usize,
    pub arg_classes: usize,
    pub bio_tags: usize,
}

impl DecoderShape {
    /// Defaults derived from the encoder width `d`: decoder state `d`,
    /// span vectors `d` wide, type embeddings `d / 4`.
    pub fn for_encoder(d: usize, labels: &LabelVocabularies) -> Self {
        Self {
            hidden: d,
            span_hidden: (d / 4).max(1),
            type_dim: (d / 4).max(1),
            task_classes: labels.num_task_classes(),
            arg_classes: labels.num_arg_classes(),
            bio_tags: labels.num_bio_tags(),
        }
    }

    pub fn span_dim(&self) -> usize {
        4 * self.span_hidden
    }

    /// Width of a fed-back task or argument representation.
    pub fn item_dim(&self) -> usize {
        self.span_dim() + self.type_dim
    }

    pub fn task_eos(&self) -> usize {
        self.task_classes - 1
    }

    pub fn arg_eos(&self) -> usize {
        self.arg_classes - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoldArg {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTask {
    pub start: usize,
    pub end: usize,
    pub class: usize,
    /// Surface order.
    pub args: Vec<GoldArg>,
}

/// Index form of an instruction's tasks, arguments sorted by start.
pub fn gold_structure(inst: &AnnotatedInstruction, labels: &LabelVocabularies) -> Result<Vec<GoldTask>> {
    inst.tasks
        .iter()
        .map(|t| {
            Ok(GoldTask {
                start: t.start,
                end: t.end,
                class: labels.encode(VocabKind::Task, &t.task_type)?,
                args: t
                    .args_in_surface_order()
                    .into_iter()
                    .map(|a| {
                        Ok(GoldArg {
                            start: a.start,
                            end: a.end,
                            class: labels.encode(VocabKind::Argument, &a.arg_type)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Gold target of one decoding step for one instruction. EOS steps have no
/// span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTarget {
    pub span: Option<(usize, usize)>,
    pub class: usize,
}

/// Log-distributions of one batched decoding step with per-row targets;
/// `None` marks rows that have no step here.
#[derive(Debug, Clone)]
pub struct StepDistributions {
    pub start_log: Tensor,
    pub end_log: Tensor,
    pub type_log: Tensor,
    pub targets: Vec<Option<StepTarget>>,
}

impl StepDistributions {
    /// Builds a step from explicit probabilities, one row per instruction.
    pub fn from_probs(
        start: &[Vec<f64>],
        end: &[Vec<f64>],
        types: &[Vec<f64>],
        targets: Vec<Option<StepTarget>>,
        dtype: DType,
    ) -> Result<Self> {
        let to_log = |rows: &[Vec<f64>]| -> Result<Tensor> {
            let width = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
            Ok(Tensor::from_vec(flat, (rows.len(), width), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self {
            start_log: to_log(start)?,
            end_log: to_log(end)?,
            type_log: to_log(types)?,
            targets,
        })
    }
}

/// Everything recorded by a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub task_steps: Vec<StepDistributions>,
    pub arg_steps: Vec<StepDistributions>,
    /// Fed-back task representation per task step, `[B, item_dim]`.
    pub task_vectors: Vec<Tensor>,
    /// Sum of earlier task representations entering each task step.
    pub task_sums: Vec<Tensor>,
    /// Attention weights of each task step, `[B, N]`.
    pub task_attention: Vec<Tensor>,
    /// `(task index, argument attention context [B, d])` per argument step.
    pub arg_contexts: Vec<(usize, Tensor)>,
    /// Argument-sum entering each argument step, with its task index.
    pub arg_sums: Vec<(usize, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedArg {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedTask {
    pub start: usize,
    pub end: usize,
    pub class: usize,
    pub args: Vec<DecodedArg>,
}

struct BatchContext<'a> {
    enc: &'a EncoderStates,
    task_keys: Tensor,
    arg_keys: Tensor,
    task_span: SpanContext,
    arg_span: SpanContext,
}

struct Advance {
    state: LstmState,
    context: Tensor,
    attention: Tensor,
    span: SpanPrediction,
}

pub struct NestedDecoder {
    shape: DecoderShape,
    task_attention: AdditiveAttention,
    task_cell: LstmCell,
    task_span: SpanDetector,
    task_type: Linear,
    task_embedding: Embedding,
    arg_attention: AdditiveAttention,
    arg_cell: LstmCell,
    arg_span: SpanDetector,
    arg_type: Linear,
    arg_embedding: Embedding,
}

impl NestedDecoder {
    pub fn new(p: &Params, enc_dim: usize, shape: DecoderShape) -> Result<Self> {
        let d = shape.hidden;
        let t = p.pp("task");
        let a = p.pp("arg");
        let item = shape.item_dim();
        Ok(Self {
            task_attention: AdditiveAttention::new(&t.pp("attention"), enc_dim, d, d)?,
            task_cell: LstmCell::new(&t.pp("cell"), enc_dim + item, d)?,
            task_span: SpanDetector::new(&t.pp("span"), d, enc_dim, 0, shape.span_hidden)?,
            task_type: linear(&t.pp("type"), shape.span_dim() + d, shape.task_classes)?,
            task_embedding: embedding(&t.pp("type_embedding"), shape.task_classes - 1, shape.type_dim, 1.0)?,
            arg_attention: AdditiveAttention::new(&a.pp("attention"), enc_dim, 2 * d, d)?,
            arg_cell: LstmCell::new(&a.pp("cell"), d + enc_dim + item, d)?,
            arg_span: SpanDetector::new(&a.pp("span"), d, enc_dim, shape.bio_tags, shape.span_hidden)?,
            arg_type: linear(&a.pp("type"), shape.span_dim() + d, shape.arg_classes)?,
            arg_embedding: embedding(&a.pp("type_embedding"), shape.arg_classes - 1, shape.type_dim, 1.0)?,
            shape,
        })
    }

    pub fn shape(&self) -> &DecoderShape {
        &self.shape
    }

    fn context<'a>(&self, enc: &'a EncoderStates, grounding: &Tensor) -> Result<BatchContext<'a>> {
        Ok(BatchContext {
            enc,
            task_keys: self.task_attention.project_keys(&enc.vectors)?,
            arg_keys: self.arg_attention.project_keys(&enc.vectors)?,
            task_span: self.task_span.context(enc, None)?,
            arg_span: self.arg_span.context(enc, Some(grounding))?,
        })
    }

    fn zeros(&self, rows: usize, width: usize, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros((rows, width), like.dtype(), like.device())?)
    }

    fn task_advance(&self, ctx: &BatchContext, state: &LstmState, sum: &Tensor) -> Result<Advance> {
        let (context, attention) =
            self.task_attention
                .attend(&state.h, &ctx.task_keys, &ctx.enc.vectors, &ctx.enc.mask)?;
        let input = Tensor::cat(&[&context, sum], 1)?;
        let state = self.task_cell.step(&input, state)?;
        let span = self.task_span.detect(&ctx.task_span, &state.h)?;
        Ok(Advance {
            state,
            context,
            attention,
            span,
        })
    }

    fn arg_advance(
        &self,
        ctx: &BatchContext,
        state: &LstmState,
        task_h: &Tensor,
        sum: &Tensor,
    ) -> Result<Advance> {
        let query = Tensor::cat(&[&state.h, task_h], 1)?;
        let (context, attention) =
            self.arg_attention
                .attend(&query, &ctx.arg_keys, &ctx.enc.vectors, &ctx.enc.mask)?;
        let input = Tensor::cat(&[task_h, &context, sum], 1)?;
        let state = self.arg_cell.step(&input, state)?;
        let span = self.arg_span.detect(&ctx.arg_span, &state.h)?;
        Ok(Advance {
            state,
            context,
            attention,
            span,
        })
    }

    fn classify(head: &Linear, span_vector: &Tensor, h: &Tensor) -> Result<Tensor> {
        Ok(log_softmax_last(&head.forward(&Tensor::cat(&[span_vector, h], 1)?)?)?)
    }

    /// `[span_vector ; type embedding]`, zeroed on rows where `feed` is false.
    fn item_vector(
        table: &Embedding,
        span_vector: &Tensor,
        classes: &[usize],
        feed: &[bool],
    ) -> Result<Tensor> {
        let device = span_vector.device();
        let ids: Vec<u32> = classes
            .iter()
            .zip(feed)
            .map(|(&c, &f)| if f { c as u32 } else { 0 })
            .collect();
        let ids = Tensor::from_vec(ids, classes.len(), device)?;
        let emb = table.forward(&ids)?;
        let mask: Vec<f32> = feed.iter().map(|&f| f32::from(u8::from(f))).collect();
        let mask = Tensor::from_vec(mask, (feed.len(), 1), device)?.to_dtype(span_vector.dtype())?;
        Ok(Tensor::cat(&[span_vector, &emb], 1)?.broadcast_mul(&mask)?)
    }

    /// Teacher-forced pass: gold spans and types are fed back; every step's
    /// distributions are recorded for the loss.
    pub fn teacher_forced(
        &self,
        enc: &EncoderStates,
        grounding: &Tensor,
        gold: &[Vec<GoldTask>],
    ) -> Result<TeacherTrace> {
        let b = enc.batch_size();
        if gold.len() != b {
            return Err(Error::LengthMismatch {
                predictions: b,
                golds: gold.len(),
            });
        }
        let ctx = self.context(enc, grounding)?;
        let x = &enc.vectors;
        let d = self.shape.hidden;
        let item = self.shape.item_dim();
        let task_eos = self.shape.task_eos();
        let arg_eos = self.shape.arg_eos();

        let mut trace = TeacherTrace {
            task_steps: Vec::new(),
            arg_steps: Vec::new(),
            task_vectors: Vec::new(),
            task_sums: Vec::new(),
            task_attention: Vec::new(),
            arg_contexts: Vec::new(),
            arg_sums: Vec::new(),
        };
        let mut state = LstmState::zeros(b, d, x.dtype(), x.device())?;
        let mut sum = self.zeros(b, item, x)?;
        let task_steps = gold.iter().map(Vec::len).max().unwrap_or(0) + 1;
        for j in 0..task_steps {
            trace.task_sums.push(sum.clone());
            let adv = self.task_advance(&ctx, &state, &sum)?;
            let type_log = Self::classify(&self.task_type, &adv.span.soft_vector()?, &adv.state.h)?;

            let targets: Vec<Option<StepTarget>> = gold
                .iter()
                .map(|tasks| match j.cmp(&tasks.len()) {
                    std::cmp::Ordering::Less => Some(StepTarget {
                        span: Some((tasks[j].start, tasks[j].end)),
                        class: tasks[j].class,
                    }),
                    std::cmp::Ordering::Equal => Some(StepTarget {
                        span: None,
                        class: task_eos,
                    }),
                    std::cmp::Ordering::Greater => None,
                })
                .collect();
            let (starts, ends, classes, feed) = feed_back(&targets);
            let u = adv.span.hard_vector(&starts, &ends)?;
            let bj = Self::item_vector(&self.task_embedding, &u, &classes, &feed)?;
            trace.task_vectors.push(bj.clone());
            trace.task_attention.push(adv.attention.clone());
            trace.task_steps.push(StepDistributions {
                start_log: adv.span.start_log.clone(),
                end_log: adv.span.end_log.clone(),
                type_log,
                targets,
            });

            if feed.iter().any(|&f| f) {
                self.teacher_forced_args(&ctx, j, &adv.state.h, gold, arg_eos, &mut trace)?;
            }
            sum = (sum + bj)?;
            state = adv.state;
        }
        Ok(trace)
    }

    fn teacher_forced_args(
        &self,
        ctx: &BatchContext,
        j: usize,
        task_h: &Tensor,
        gold: &[Vec<GoldTask>],
        arg_eos: usize,
        trace: &mut TeacherTrace,
    ) -> Result<()> {
        let b = gold.len();
        let x = &ctx.enc.vectors;
        let args_of = |r: usize| gold[r].get(j).map(|t| &t.args);
        let steps = (0..b).filter_map(args_of).map(Vec::len).max().unwrap_or(0) + 1;
        let mut state = LstmState::zeros(b, self.shape.hidden, x.dtype(), x.device())?;
        let mut sum = self.zeros(b, self.shape.item_dim(), x)?;
        for k in 0..steps {
            trace.arg_sums.push((j, sum.clone()));
            let adv = self.arg_advance(ctx, &state, task_h, &sum)?;
            let type_log = Self::classify(&self.arg_type, &adv.span.soft_vector()?, &adv.state.h)?;
            let targets: Vec<Option<StepTarget>> = (0..b)
                .map(|r| {
                    args_of(r).and_then(|args| match k.cmp(&args.len()) {
                        std::cmp::Ordering::Less => Some(StepTarget {
                            span: Some((args[k].start, args[k].end)),
                            class: args[k].class,
                        }),
                        std::cmp::Ordering::Equal => Some(StepTarget {
                            span: None,
                            class: arg_eos,
                        }),
                        std::cmp::Ordering::Greater => None,
                    })
                })
                .collect();
            let (starts, ends, classes, feed) = feed_back(&targets);
            let p = adv.span.hard_vector(&starts, &ends)?;
            let c = Self::item_vector(&self.arg_embedding, &p, &classes, &feed)?;
            trace.arg_contexts.push((j, adv.context.clone()));
            trace.arg_steps.push(StepDistributions {
                start_log: adv.span.start_log.clone(),
                end_log: adv.span.end_log.clone(),
                type_log,
                targets,
            });
            sum = (sum + c)?;
            state = adv.state;
        }
        Ok(())
    }

    /// Greedy decoding for a batch, stopping each instruction at EOS or the
    /// limits.
    pub fn greedy(
        &self,
        enc: &EncoderStates,
        grounding: &Tensor,
        limits: DecodeLimits,
    ) -> Result<Vec<Vec<DecodedTask>>> {
        limits.validate()?;
        let ctx = self.context(enc, grounding)?;
        let x = &enc.vectors;
        let b = enc.batch_size();
        let d = self.shape.hidden;
        let task_eos = self.shape.task_eos();

        let mut out: Vec<Vec<DecodedTask>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut state = LstmState::zeros(b, d, x.dtype(), x.device())?;
        let mut sum = self.zeros(b, self.shape.item_dim(), x)?;
        for _ in 0..limits.max_tasks {
            if done.iter().all(|&f| f) {
                break;
            }
            let adv = self.task_advance(&ctx, &state, &sum)?;
            let (starts, ends) = select_spans(&adv.span, &enc.lengths, &done)?;
            let u = adv.span.hard_vector(&starts, &ends)?;
            let classes = argmax_rows(&Self::classify(&self.task_type, &u, &adv.state.h)?)?;
            let mut feed = vec![false; b];
            for r in 0..b {
                if done[r] {
                    continue;
                }
                if classes[r] == task_eos {
                    done[r] = true;
                } else {
                    feed[r] = true;
                    out[r].push(DecodedTask {
                        start: starts[r],
                        end: ends[r],
                        class: classes[r],
                        args: Vec::new(),
                    });
                }
            }
            if feed.iter().any(|&f| f) {
                let args = self.greedy_args(&ctx, &adv.state.h, &feed, limits.max_args)?;
                for (r, args) in args.into_iter().enumerate() {
                    if feed[r] {
                        out[r].last_mut().expect("task pushed").args = args;
                    }
                }
            }
            let bj = Self::item_vector(&self.task_embedding, &u, &classes, &feed)?;
            sum = (sum + bj)?;
            state = adv.state;
        }
        Ok(out)
    }

    fn greedy_args(
        &self,
        ctx: &BatchContext,
        task_h: &Tensor,
        active: &[bool],
        max_args: usize,
    ) -> Result<Vec<Vec<DecodedArg>>> {
        let b = active.len();
        let x = &ctx.enc.vectors;
        let arg_eos = self.shape.arg_eos();
        let mut out = vec![Vec::new(); b];
        let mut done: Vec<bool> = active.iter().map(|&a| !a).collect();
        let mut state = LstmState::zeros(b, self.shape.hidden, x.dtype(), x.device())?;
        let mut sum = self.zeros(b, self.shape.item_dim(), x)?;
        for _ in 0..max_args {
            if done.iter().all(|&f| f) {
                break;
            }
            let adv = self.arg_advance(ctx, &state, task_h, &sum)?;
            let (starts, ends) = select_spans(&adv.span, &ctx.enc.lengths, &done)?;
            let p = adv.span.hard_vector(&starts, &ends)?;
            let classes = argmax_rows(&Self::classify(&self.arg_type, &p, &adv.state.h)?)?;
            let mut feed = vec![false; b];
            for r in 0..b {
                if done[r] {
                    continue;
                }
                if classes[r] == arg_eos {
                    done[r] = true;
                } else {
                    feed[r] = true;
                    out[r].push(DecodedArg {
                        start: starts[r],
                        end: ends[r],
                        class: classes[r],
                    });
                }
            }
            let c = Self::item_vector(&self.arg_embedding, &p, &classes, &feed)?;
            sum = (sum + c)?;
            state = adv.state;
        }
        Ok(out)
    }
}

type FeedBack = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<bool>);

fn feed_back(targets: &[Option<StepTarget>]) -> FeedBack {
    let mut starts = Vec::with_capacity(targets.len());
    let mut ends = Vec::with_capacity(targets.len());
    let mut classes = Vec::with_capacity(targets.len());
    let mut feed = Vec::with_capacity(targets.len());
    for t in targets {
        match t {
            Some(StepTarget {
                span: Some((s, e)),
                class,
            }) => {
                starts.push(*s);
                ends.push(*e);
                classes.push(*class);
                feed.push(true);
            }
            _ => {
                starts.push(0);
                ends.push(0);
                classes.push(0);
                feed.push(false);
            }
        }
    }
    (starts, ends, classes, feed)
}

fn host_rows(log: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(log.exp()?.to_dtype(DType::F64)?.to_vec2()?)
}

fn select_spans(span: &SpanPrediction, lengths: &[usize], skip: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    let start = host_rows(&span.start_log)?;
    let end = host_rows(&span.end_log)?;
    let mut starts = vec![0; lengths.len()];
    let mut ends = vec![0; lengths.len()];
    for (r, &len) in lengths.iter().enumerate() {
        if !skip[r] {
            (starts[r], ends[r]) = greedy_select(&start[r][..len], &end[r][..len])?;
        }
    }
    Ok((starts, ends))
}

fn argmax_rows(log: &Tensor) -> Result<Vec<usize>> {
    Ok(log
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|i| i as usize)
        .collect())
}
