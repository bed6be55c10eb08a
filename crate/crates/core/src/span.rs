//! Span identification from a decoder query and encoder states.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::nn::{linear, log_softmax_last, mask_logits, BiLstm, Params};

/// BiLSTM over `[query ; h_i ; extra_i]` with separate start and end
/// scoring heads.
pub struct SpanDetector {
    lstm: BiLstm,
    start_head: Linear,
    end_head: Linear,
    query_dim: usize,
    enc_dim: usize,
    extra_dim: usize,
}

/// Per-batch projections of the query-independent part of the input.
#[derive(Debug, Clone)]
pub struct SpanContext {
    fwd_base: Tensor,
    bwd_base: Tensor,
    mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpanPrediction {
    /// `[B, N]` log-probabilities, masked positions near `-1e9`.
    pub start_log: Tensor,
    pub end_log: Tensor,
    /// BiLSTM outputs `[B, N, 2h]`.
    pub outputs: Tensor,
}

impl SpanPrediction {
    pub fn start_probs(&self) -> Result<Tensor> {
        Ok(self.start_log.exp()?)
    }

    pub fn end_probs(&self) -> Result<Tensor> {
        Ok(self.end_log.exp()?)
    }

    /// Probability-weighted span vector `[B, 4h]`.
    pub fn soft_vector(&self) -> Result<Tensor> {
        let pool = |log: &Tensor| -> Result<Tensor> {
            Ok(log.exp()?.unsqueeze(1)?.matmul(&self.outputs)?.squeeze(1)?)
        };
        Ok(Tensor::cat(&[pool(&self.start_log)?, pool(&self.end_log)?], 1)?)
    }

    /// Span vector from the outputs at given start/end indices.
    pub fn hard_vector(&self, starts: &[usize], ends: &[usize]) -> Result<Tensor> {
        let gather = |idx: &[usize]| -> Result<Tensor> {
            let rows = idx
                .iter()
                .enumerate()
                .map(|(b, &i)| self.outputs.get(b)?.get(i))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::stack(&rows, 0)?)
        };
        Ok(Tensor::cat(&[gather(starts)?, gather(ends)?], 1)?)
    }

    /// Host copies of one instance's unpadded start/end distributions.
    pub fn distributions(&self, b: usize, len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(b)?
                .narrow(0, 0, len)?
                .exp()?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1()?)
        };
        Ok((get(&self.start_log)?, get(&self.end_log)?))
    }
}

impl SpanDetector {
    /// `hidden` is the per-direction width; span vectors are `4 * hidden`.
    pub fn new(
        p: &Params,
        query_dim: usize,
        enc_dim: usize,
        extra_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let in_dim = query_dim + enc_dim + extra_dim;
        Ok(Self {
            lstm: BiLstm::new(&p.pp("lstm"), in_dim, hidden)?,
            start_head: linear(&p.pp("start"), 2 * hidden, 1)?,
            end_head: linear(&p.pp("end"), 2 * hidden, 1)?,
            query_dim,
            enc_dim,
            extra_dim,
        })
    }

    pub fn vector_dim(&self) -> usize {
        4 * self.lstm.hidden()
    }

    pub fn context(&self, enc: &EncoderStates, extra: Option<&Tensor>) -> Result<SpanContext> {
        let h = &enc.vectors;
        if h.dim(D::Minus1)? != self.enc_dim {
            return Err(Error::Config(format!(
                "span detector expects encoder width {}, got {}",
                self.enc_dim,
                h.dim(D::Minus1)?
            )));
        }
        let extra_width = extra.map(|e| e.dim(D::Minus1)).transpose()?.unwrap_or(0);
        if extra_width != self.extra_dim {
            return Err(Error::Config(format!(
                "span detector expects {} extra features, got {extra_width}",
                self.extra_dim
            )));
        }
        let project = |cell: &crate::nn::LstmCell| -> Result<Tensor> {
            let mut acc = cell
                .project_input_part(h, self.query_dim)?
                .broadcast_add(cell.bias())?;
            if let Some(extra) = extra {
                if extra.dims()[..2] != h.dims()[..2] {
                    return Err(Error::Config("extra features do not match encoder rows".into()));
                }
                acc = (acc + cell.project_input_part(extra, self.query_dim + self.enc_dim)?)?;
            }
            Ok(acc)
        };
        Ok(SpanContext {
            fwd_base: project(&self.lstm.forward)?,
            bwd_base: project(&self.lstm.backward)?,
            mask: enc.mask.clone(),
        })
    }

    pub fn detect(&self, ctx: &SpanContext, query: &Tensor) -> Result<SpanPrediction> {
        if query.dim(D::Minus1)? != self.query_dim {
            return Err(Error::Config(format!(
                "span query width {} does not match {}",
                query.dim(D::Minus1)?,
                self.query_dim
            )));
        }
        let qf = self.lstm.forward.project_input_part(query, 0)?.unsqueeze(1)?;
        let qb = self.lstm.backward.project_input_part(query, 0)?.unsqueeze(1)?;
        let fwd = ctx.fwd_base.broadcast_add(&qf)?;
        let bwd = ctx.bwd_base.broadcast_add(&qb)?;
        let outputs = self.lstm.run_projected(&fwd, &bwd, &ctx.mask)?;
        let score = |head: &Linear| -> Result<Tensor> {
            let s = head.forward(&outputs)?.squeeze(2)?;
            Ok(log_softmax_last(&mask_logits(&s, &ctx.mask)?)?)
        };
        Ok(SpanPrediction {
            start_log: score(&self.start_head)?,
            end_log: score(&self.end_head)?,
            outputs,
        })
    }

    pub fn detect_span(
        &self,
        query: &Tensor,
        enc: &EncoderStates,
        extra: Option<&Tensor>,
    ) -> Result<SpanPrediction> {
        self.detect(&self.context(enc, extra)?, query)
    }
}

/// Pair `(s, e)` with `s <= e` maximising `start[s] * end[e]`; ties go to
/// the smaller start, then the smaller end.
pub fn greedy_select(start: &[f64], end: &[f64]) -> Result<(usize, usize)> {
    let n = start.len().min(end.len());
    if n == 0 || start[..n].iter().all(|&p| p <= 0.0) || end[..n].iter().all(|&p| p <= 0.0) {
        return Err(Error::AllMasked);
    }
    let mut best = (0, 0);
    let mut best_p = f64::NEG_INFINITY;
    for s in 0..n {
        for e in s..n {
            let p = start[s] * end[e];
            if p > best_p {
                best_p = p;
                best = (s, e);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn states(b: usize, n: usize, d: usize, lengths: Vec<usize>, dtype: DType) -> EncoderStates {
        let dev = Device::Cpu;
        let vectors = Tensor::randn(0f32, 1.0, (b, n, d), &dev)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        let mask: Vec<f32> = lengths
            .iter()
            .flat_map(|&l| (0..n).map(move |i| if i < l { 1.0 } else { 0.0 }))
            .collect();
        EncoderStates {
            vectors,
            mask: Tensor::from_vec(mask, (b, n), &dev).unwrap().to_dtype(dtype).unwrap(),
            lengths,
        }
    }

    #[test]
    fn worked_example() {
        assert_eq!(greedy_select(&[0.1, 0.7, 0.2], &[0.6, 0.1, 0.3]).unwrap(), (1, 2));
        assert_eq!(greedy_select(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]).unwrap(), (2, 2));
        assert!(greedy_select(&[], &[]).is_err());
        assert!(greedy_select(&[0.0, 0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn start_never_after_end() {
        // The best unordered pair is (2, 0); ordering forbids it and (0, 0)
        // ties with (2, 2), so the smaller start wins.
        let (s, e) = greedy_select(&[0.1, 0.1, 0.8], &[0.8, 0.1, 0.1]).unwrap();
        assert!(s <= e);
        assert_eq!((s, e), (0, 0));
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let n = rng.gen_range(1..20);
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let s = norm((0..n).map(|_| rng.gen::<f64>() + 1e-6).collect());
            let e = norm((0..n).map(|_| rng.gen::<f64>() + 1e-6).collect());
            let mut pairs: Vec<(f64, usize, usize)> = (0..n)
                .flat_map(|i| (i..n).map(move |j| (i, j)))
                .map(|(i, j)| (s[i] * e[j], i, j))
                .collect();
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            assert_eq!(greedy_select(&s, &e).unwrap(), (pairs[0].1, pairs[0].2));
        }
    }

    #[test]
    fn single_valid_position_is_forced() {
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let det = SpanDetector::new(&store.root().pp("span"), 6, 8, 0, 3).unwrap();
        let mut enc = states(1, 5, 8, vec![5], DType::F32);
        enc.mask = Tensor::new(&[[0f32, 0., 0., 1., 0.]], &Device::Cpu).unwrap();
        let q = Tensor::randn(0f32, 1.0, (1, 6), &Device::Cpu).unwrap();
        let pred = det.detect_span(&q, &enc, None).unwrap();
        let (s, e) = pred.distributions(0, 5).unwrap();
        assert!((s[3] - 1.0).abs() < 1e-6 && (e[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distributions_sum_to_one_and_vectors_agree() {
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let det = SpanDetector::new(&store.root().pp("span"), 6, 8, 5, 3).unwrap();
        let enc = states(2, 7, 8, vec![7, 4], DType::F64);
        let extra = Tensor::rand(0f64, 1.0, (2, 7, 5), &Device::Cpu).unwrap();
        let q = Tensor::randn(0f64, 1.0, (2, 6), &Device::Cpu).unwrap();
        let pred = det.detect_span(&q, &enc, Some(&extra)).unwrap();
        for (b, len) in [(0, 7), (1, 4)] {
            let (s, e) = pred.distributions(b, 7).unwrap();
            assert!((s[..len].iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!((e[..len].iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(s[len..].iter().all(|&p| p == 0.0));
        }
        assert_eq!(det.vector_dim(), 12);
        let hard = pred.hard_vector(&[1, 2], &[3, 2]).unwrap();
        let o: Vec<Vec<Vec<f64>>> = pred.outputs.to_vec3().unwrap();
        let h: Vec<Vec<f64>> = hard.to_vec2().unwrap();
        let expected0: Vec<f64> = o[0][1].iter().chain(&o[0][3]).copied().collect();
        assert_eq!(h[0], expected0);
        assert_eq!(pred.soft_vector().unwrap().dims(), &[2, 12]);
    }

    #[test]
    fn padding_does_not_change_scores() {
        let store = ParamStore::new(4, DType::F64, Device::Cpu);
        let det = SpanDetector::new(&store.root().pp("span"), 4, 8, 0, 3).unwrap();
        let short = states(1, 3, 8, vec![3], DType::F64);
        let padded_vectors = Tensor::cat(
            &[
                short.vectors.clone(),
                Tensor::randn(0f64, 1.0, (1, 2, 8), &Device::Cpu).unwrap(),
            ],
            1,
        )
        .unwrap();
        let padded = EncoderStates {
            vectors: padded_vectors,
            mask: Tensor::new(&[[1f64, 1., 1., 0., 0.]], &Device::Cpu).unwrap(),
            lengths: vec![3],
        };
        let q = Tensor::randn(0f64, 1.0, (1, 4), &Device::Cpu).unwrap();
        let a = det.detect_span(&q, &short, None).unwrap().distributions(0, 3).unwrap();
        let b = det.detect_span(&q, &padded, None).unwrap().distributions(0, 3).unwrap();
        for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let store = ParamStore::new(4, DType::F32, Device::Cpu);
        let det = SpanDetector::new(&store.root().pp("span"), 4, 8, 0, 3).unwrap();
        let enc = states(1, 3, 8, vec![3], DType::F32);
        let q = Tensor::zeros((1, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(det.detect_span(&q, &enc, None), Err(Error::Config(_))));
        let extra = Tensor::zeros((1, 3, 2), DType::F32, &Device::Cpu).unwrap();
        let q = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(det.detect_span(&q, &enc, Some(&extra)), Err(Error::Config(_))));
    }
}
