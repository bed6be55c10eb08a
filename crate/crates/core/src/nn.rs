//! Parameter store and the small layers the model is assembled from.
//!
//! Every parameter is initialised from a ChaCha stream seeded by the model
//! seed and the parameter's full name, so initial weights do not depend on
//! construction order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Embedding, Linear, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Const(f64),
}

pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap: VarMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            return Ok(var.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..count).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..count).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Const(v) => vec![v; count],
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    /// All variables keyed by name, in name order.
    pub fn named_vars(&self) -> BTreeMap<String, Var> {
        self.varmap
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str, include: bool) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix) == include)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites existing variables from a name->tensor map. Every
    /// variable must be present with a matching shape.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> std::result::Result<(), String> {
        let vars = self.named_vars();
        let mut missing = Vec::new();
        for (name, var) in &vars {
            match tensors.get(name) {
                Some(t) if t.dims() == var.dims() => {
                    let t = t.to_dtype(self.dtype).map_err(|e| e.to_string())?;
                    var.set(&t).map_err(|e| e.to_string())?;
                }
                Some(t) => missing.push(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )),
                None => missing.push(format!("{name}: missing")),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(missing.join(", "))
        }
    }

    /// Detached copies of every variable.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
            .collect()
    }
}

#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(shape, &full, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// `y = x W^T + b` with PyTorch's default uniform initialisation.
pub fn linear(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
    let b = p.get(&[out_dim], "bias", Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_no_bias(p: &Params, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
    Ok(Linear::new(w, None))
}

/// Linear layer with a truncated-free normal(0, std) weight and zero bias.
pub fn linear_normal(p: &Params, in_dim: usize, out_dim: usize, std: f64) -> Result<Linear> {
    let w = p.get(&[out_dim, in_dim], "weight", Init::Normal(std))?;
    let b = p.get(&[out_dim], "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn embedding(p: &Params, count: usize, dim: usize, std: f64) -> Result<Embedding> {
    let w = p.get(&[count, dim], "weight", Init::Normal(std))?;
    Ok(Embedding::new(w, dim))
}

/// Layer normalisation over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: p.get(&[dim], "weight", Init::Const(1.0))?,
            bias: p.get(&[dim], "bias", Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::log_softmax(x, D::Minus1)
}

/// Adds a large negative value to logits where `mask` (same shape, 1/0) is
/// zero.
pub fn mask_logits(logits: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
    let penalty = ((mask.ones_like()? - mask)? * -1e9)?;
    logits + penalty
}

/// LSTM cell with fused gate weights in `i, f, g, o` order.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize, dtype: DType, device: &Device) -> Result<Self> {
        let z = Tensor::zeros((batch, hidden), dtype, device)?;
        Ok(Self { h: z.clone(), c: z })
    }
}

impl LstmCell {
    pub fn new(p: &Params, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: p.get(&[4 * hidden, in_dim], "weight_ih", Init::Uniform(bound))?,
            w_hh: p.get(&[4 * hidden, hidden], "weight_hh", Init::Uniform(bound))?,
            bias: p.get(&[4 * hidden], "bias", Init::Uniform(bound))?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input-to-gate projection for any leading shape `[.., in]`.
    pub fn project_input(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)
    }

    /// Input projection of one slice of the input columns, without bias.
    /// Lets callers project concatenated inputs piecewise.
    pub fn project_input_part(&self, x: &Tensor, offset: usize) -> candle_core::Result<Tensor> {
        let width = x.dim(D::Minus1)?;
        let w = self.w_ih.narrow(1, offset, width)?;
        x.broadcast_matmul(&w.t()?)
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// One step given the already projected input gates `[B, 4h]`.
    pub fn step_projected(&self, gates_in: &Tensor, state: &LstmState) -> candle_core::Result<LstmState> {
        let gates = (gates_in + state.h.matmul(&self.w_hh.t()?)?)?;
        let h = self.hidden;
        let i = candle_nn::ops::sigmoid(&gates.narrow(1, 0, h)?)?;
        let f = candle_nn::ops::sigmoid(&gates.narrow(1, h, h)?)?;
        let g = gates.narrow(1, 2 * h, h)?.tanh()?;
        let o = candle_nn::ops::sigmoid(&gates.narrow(1, 3 * h, h)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> candle_core::Result<LstmState> {
        self.step_projected(&self.project_input(x)?, state)
    }
}

/// Bidirectional LSTM over padded sequences.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(p: &Params, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(&p.pp("forward"), in_dim, hidden)?,
            backward: LstmCell::new(&p.pp("backward"), in_dim, hidden)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    /// Runs both directions over pre-projected gate inputs.
    ///
    /// `fwd_gates`/`bwd_gates` are `[B, N, 4h]`; `mask` is `[B, N]` with
    /// valid positions first. Padded positions are skipped by the backward
    /// direction (its state stays zero until the last valid token) and do
    /// not influence valid positions in either direction. Returns
    /// `[B, N, 2h]`.
    pub fn run_projected(
        &self,
        fwd_gates: &Tensor,
        bwd_gates: &Tensor,
        mask: &Tensor,
    ) -> candle_core::Result<Tensor> {
        let (b, n, _) = fwd_gates.dims3()?;
        let h = self.hidden();
        let dtype = fwd_gates.dtype();
        let device = fwd_gates.device();
        let fwd_t = fwd_gates.transpose(0, 1)?.contiguous()?;
        let bwd_t = bwd_gates.transpose(0, 1)?.contiguous()?;
        let mask_t = mask.transpose(0, 1)?.contiguous()?.unsqueeze(2)?;

        let zero = Tensor::zeros((b, h), dtype, device)?;
        let mut state = LstmState {
            h: zero.clone(),
            c: zero.clone(),
        };
        let mut fwd_out = Vec::with_capacity(n);
        for t in 0..n {
            state = self.forward.step_projected(&fwd_t.get(t)?, &state)?;
            fwd_out.push(state.h.clone());
        }

        let mut state = LstmState {
            h: zero.clone(),
            c: zero,
        };
        let mut bwd_out = vec![None; n];
        for t in (0..n).rev() {
            let next = self.backward.step_projected(&bwd_t.get(t)?, &state)?;
            let m = mask_t.get(t)?;
            state = LstmState {
                h: next.h.broadcast_mul(&m)?,
                c: next.c.broadcast_mul(&m)?,
            };
            bwd_out[t] = Some(state.h.clone());
        }
        let fwd = Tensor::stack(&fwd_out, 1)?;
        let bwd: Vec<Tensor> = bwd_out.into_iter().map(|t| t.unwrap()).collect();
        let bwd = Tensor::stack(&bwd, 1)?;
        Tensor::cat(&[fwd, bwd], 2)
    }
}

/// Additive attention `v^T tanh(W_k k_i + W_q q)` over encoder positions.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    key_proj: Linear,
    query_proj: Linear,
    score: Linear,
}

impl AdditiveAttention {
    pub fn new(p: &Params, key_dim: usize, query_dim: usize, attn_dim: usize) -> Result<Self> {
        Ok(Self {
            key_proj: linear(&p.pp("key"), key_dim, attn_dim)?,
            query_proj: linear_no_bias(&p.pp("query"), query_dim, attn_dim)?,
            score: linear_no_bias(&p.pp("score"), attn_dim, 1)?,
        })
    }

    /// Key projection `[B, N, A]`, computed once per batch.
    pub fn project_keys(&self, keys: &Tensor) -> candle_core::Result<Tensor> {
        self.key_proj.forward(keys)
    }

    /// Returns `(context [B, d], weights [B, N])`.
    pub fn attend(
        &self,
        query: &Tensor,
        projected_keys: &Tensor,
        keys: &Tensor,
        mask: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let q = self.query_proj.forward(query)?.unsqueeze(1)?;
        let energy = projected_keys.broadcast_add(&q)?.tanh()?;
        let scores = self.score.forward(&energy)?.squeeze(2)?;
        let weights = softmax_last(&mask_logits(&scores, mask)?)?;
        let context = weights.unsqueeze(1)?.matmul(keys)?.squeeze(1)?;
        Ok((context, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_creation_order() {
        let a = ParamStore::new(7, DType::F32, Device::Cpu);
        let b = ParamStore::new(7, DType::F32, Device::Cpu);
        let a1 = a.root().get(&[3, 4], "x", Init::Normal(1.0)).unwrap();
        let _ = b.root().get(&[2], "y", Init::Normal(1.0)).unwrap();
        let b1 = b.root().get(&[3, 4], "x", Init::Normal(1.0)).unwrap();
        let diff = (a1 - b1).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn layer_norm_normalises() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&store.root(), 4, 1e-12).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bilstm_ignores_padding() {
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        let lstm = BiLstm::new(&store.root(), 5, 4).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 5), &dev).unwrap();
        let pad = Tensor::randn(0f64, 1.0, (1, 2, 5), &dev).unwrap();
        let xp = Tensor::cat(&[&x, &pad], 1).unwrap();
        let run = |x: &Tensor, mask: Vec<f64>| {
            let n = mask.len();
            let m = Tensor::from_vec(mask, (1, n), &dev).unwrap();
            let fg = lstm.forward.project_input(x).unwrap();
            let bg = lstm.backward.project_input(x).unwrap();
            lstm.run_projected(&fg, &bg, &m).unwrap()
        };
        let short = run(&x, vec![1.0; 3]);
        let long = run(&xp, vec![1.0, 1.0, 1.0, 0.0, 0.0]).narrow(1, 0, 3).unwrap();
        let diff = (short - long).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn attention_weights_sum_to_one_and_respect_mask() {
        let store = ParamStore::new(1, DType::F64, Device::Cpu);
        let att = AdditiveAttention::new(&store.root(), 6, 3, 5).unwrap();
        let dev = Device::Cpu;
        let keys = Tensor::randn(0f64, 1.0, (2, 4, 6), &dev).unwrap();
        let q = Tensor::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]], &dev).unwrap();
        let pk = att.project_keys(&keys).unwrap();
        let (_, w) = att.attend(&q, &pk, &keys, &mask).unwrap();
        let w: Vec<Vec<f64>> = w.to_vec2().unwrap();
        for row in &w {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(w[1][2], 0.0);
        assert_eq!(w[1][3], 0.0);
    }
}
