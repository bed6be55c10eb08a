//! Object grounding by per-token BIO tagging.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderStates;
use crate::error::Result;
use crate::nn::{linear, log_softmax_last, Params};

/// A decoded object phrase; `class` indexes the object vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpan {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

pub struct GroundingHead {
    proj: Linear,
    num_tags: usize,
}

/// Tag distributions for a batch: `[B, N, K]`.
#[derive(Debug, Clone)]
pub struct GroundingOutput {
    pub log_probs: Tensor,
    pub probs: Tensor,
}

impl GroundingOutput {
    /// Row-wise tag probabilities of one instruction, unpadded.
    pub fn distributions(&self, i: usize, len: usize) -> Result<Vec<Vec<f64>>> {
        let rows = self.probs.get(i)?.narrow(0, 0, len)?;
        Ok(rows.to_dtype(candle_core::DType::F64)?.to_vec2()?)
    }
}

impl GroundingHead {
    pub fn new(p: &Params, hidden: usize, num_tags: usize) -> Result<Self> {
        Ok(Self {
            proj: linear(&p.pp("proj"), hidden, num_tags)?,
            num_tags,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn forward(&self, enc: &EncoderStates) -> Result<GroundingOutput> {
        let log_probs = log_softmax_last(&self.proj.forward(&enc.vectors)?)?;
        let probs = log_probs.exp()?;
        Ok(GroundingOutput { log_probs, probs })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Decodes object spans from per-token tag distributions via argmax tags.
pub fn decode_bio(distributions: &[Vec<f64>]) -> Vec<ObjectSpan> {
    let tags: Vec<usize> = distributions.iter().map(|r| argmax(r)).collect();
    decode_tag_indices(&tags)
}

/// Tag index layout: 0 = O, `1 + 2c` = B-c, `2 + 2c` = I-c. An I-c that
/// does not continue a span of class c opens a new one.
pub fn decode_tag_indices(tags: &[usize]) -> Vec<ObjectSpan> {
    let mut spans: Vec<ObjectSpan> = Vec::new();
    let mut open: Option<ObjectSpan> = None;
    for (i, &tag) in tags.iter().enumerate() {
        if tag == 0 {
            spans.extend(open.take());
            continue;
        }
        let class = (tag - 1) / 2;
        let begin = tag % 2 == 1;
        match open.as_mut() {
            Some(span) if !begin && span.class == class => span.end = i,
            _ => {
                spans.extend(open.take());
                open = Some(ObjectSpan {
                    start: i,
                    end: i,
                    class,
                });
            }
        }
    }
    spans.extend(open);
    spans
}

/// Class of the object span overlapping `[start, end]` the most; ties go to
/// the earlier span, zero overlap gives `None`.
pub fn assign_grounding(start: usize, end: usize, spans: &[ObjectSpan]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for span in spans {
        let lo = start.max(span.start);
        let hi = end.min(span.end);
        if lo > hi {
            continue;
        }
        let overlap = hi - lo + 1;
        if best.is_none_or(|(o, _)| overlap > o) {
            best = Some((overlap, span.class));
        }
    }
    best.map(|(_, class)| class)
}
