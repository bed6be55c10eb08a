//! Negative log-likelihood objectives for tasks, arguments and grounding.
//!
//! Per instruction, the task loss averages `-(ln s + ln e + ln c)` over its
//! task steps and the argument loss averages the same quantity over all of
//! its argument steps; EOS steps contribute only the type term. The
//! grounding loss averages `-ln g` of the gold tag over tokens. The batch
//! loss is the mean over instructions of the three summed.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::StepDistributions;
use crate::error::{Error, Result};

/// Gold probabilities are floored here before taking logs.
pub const MIN_PROB: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub arg: f64,
    pub grounding: f64,
    pub total: f64,
    /// Gold probabilities that had to be floored at [`MIN_PROB`].
    pub clamped: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.task.is_finite() && self.arg.is_finite() && self.grounding.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceLoss {
    pub task: f64,
    pub arg: f64,
    pub grounding: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar to differentiate.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub per_instance: Vec<InstanceLoss>,
}

fn floor_log() -> f64 {
    MIN_PROB.ln()
}

fn one_hot(rows: usize, width: usize, hits: impl Iterator<Item = (usize, usize)>, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f64; rows * width];
    for (r, c) in hits {
        if c >= width {
            return Err(Error::IndexOutOfRange {
                kind: "gold index",
                index: c,
                size: width,
            });
        }
        v[r * width + c] = 1.0;
    }
    Ok(Tensor::from_vec(v, (rows, width), like.device())?.to_dtype(like.dtype())?)
}

/// Gold log-probability per row (`[B]`), floored; also the count floored.
fn gather(log: &Tensor, hits: &[(usize, usize)]) -> Result<(Tensor, usize)> {
    let (rows, width) = log.dims2()?;
    let mask = one_hot(rows, width, hits.iter().copied(), log)?;
    let floored = log.maximum(floor_log())?;
    let picked = (floored * mask)?.sum(1)?;
    let host: Vec<f64> = picked.to_dtype(DType::F64)?.to_vec1()?;
    let clamped = hits.iter().filter(|(r, _)| host[*r] <= floor_log()).count();
    Ok((picked, clamped))
}

/// Per-row NLL of one step and the number of rows that have a step here.
fn step_nll(step: &StepDistributions) -> Result<(Tensor, usize)> {
    let mut spans_s = Vec::new();
    let mut spans_e = Vec::new();
    let mut types = Vec::new();
    for (r, t) in step.targets.iter().enumerate() {
        if let Some(t) = t {
            types.push((r, t.class));
            if let Some((s, e)) = t.span {
                spans_s.push((r, s));
                spans_e.push((r, e));
            }
        }
    }
    let (s, c1) = gather(&step.start_log, &spans_s)?;
    let (e, c2) = gather(&step.end_log, &spans_e)?;
    let (c, c3) = gather(&step.type_log, &types)?;
    Ok(((s + e + c)?.neg()?, c1 + c2 + c3))
}

/// Per-row mean NLL over the rows' active steps, `[B]`.
fn sequence_loss(steps: &[StepDistributions], batch: usize, like: &Tensor) -> Result<(Tensor, usize)> {
    let mut counts = vec![0usize; batch];
    let mut terms = Vec::with_capacity(steps.len());
    let mut clamped = 0;
    for step in steps {
        if step.targets.len() != batch {
            return Err(Error::LengthMismatch {
                predictions: step.targets.len(),
                golds: batch,
            });
        }
        for (r, t) in step.targets.iter().enumerate() {
            counts[r] += usize::from(t.is_some());
        }
        let (nll, c) = step_nll(step)?;
        clamped += c;
        terms.push(nll);
    }
    if terms.is_empty() {
        return Ok((Tensor::zeros(batch, like.dtype(), like.device())?, 0));
    }
    let total = Tensor::stack(&terms, 0)?.sum(0)?;
    let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let inv = Tensor::from_vec(inv, batch, like.device())?.to_dtype(like.dtype())?;
    Ok(((total * inv)?, clamped))
}

/// Per-row mean over tokens of the gold tag's NLL. `log_probs` is
/// `[B, N, K]`; `gold_tags[r]` holds one tag index per real token.
pub fn grounding_loss(log_probs: &Tensor, gold_tags: &[Vec<usize>]) -> Result<(Tensor, usize)> {
    let (b, n, k) = log_probs.dims3()?;
    if gold_tags.len() != b {
        return Err(Error::LengthMismatch {
            predictions: b,
            golds: gold_tags.len(),
        });
    }
    let flat = log_probs.reshape((b * n, k))?;
    let hits: Vec<(usize, usize)> = gold_tags
        .iter()
        .enumerate()
        .flat_map(|(r, tags)| tags.iter().enumerate().map(move |(i, &t)| (r * n + i, t)))
        .collect();
    let (picked, clamped) = gather(&flat, &hits)?;
    let summed = picked.reshape((b, n))?.sum(1)?;
    let inv: Vec<f64> = gold_tags
        .iter()
        .map(|t| if t.is_empty() { 0.0 } else { 1.0 / t.len() as f64 })
        .collect();
    let inv = Tensor::from_vec(inv, b, log_probs.device())?.to_dtype(log_probs.dtype())?;
    Ok(((summed * inv)?.neg()?, clamped))
}

pub fn compute_losses(
    task_steps: &[StepDistributions],
    arg_steps: &[StepDistributions],
    grounding_log_probs: &Tensor,
    gold_tags: &[Vec<usize>],
) -> Result<LossOutput> {
    let batch = gold_tags.len();
    if batch == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let like = grounding_log_probs;
    let (lt, c1) = sequence_loss(task_steps, batch, like)?;
    let (la, c2) = sequence_loss(arg_steps, batch, like)?;
    let (lg, c3) = grounding_loss(grounding_log_probs, gold_tags)?;
    let total = ((&lt + &la)? + &lg)?.mean_all()?;

    let host = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1()?) };
    let (ht, ha, hg) = (host(&lt)?, host(&la)?, host(&lg)?);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / batch as f64;
    let per_instance = (0..batch)
        .map(|r| InstanceLoss {
            task: ht[r],
            arg: ha[r],
            grounding: hg[r],
        })
        .collect();
    let breakdown = LossBreakdown {
        task: mean(&ht),
        arg: mean(&ha),
        grounding: mean(&hg),
        total: total.to_dtype(DType::F64)?.to_scalar()?,
        clamped: c1 + c2 + c3,
    };
    Ok(LossOutput {
        total,
        breakdown,
        per_instance,
    })
}
