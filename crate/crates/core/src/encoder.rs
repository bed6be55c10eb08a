//! Instruction encoder: word tokenization, WordPiece sub-word alignment,
//! a BERT-layout transformer, and mean pooling of sub-word states back to
//! one vector per word.
//!
//! Weights are either initialised from the model seed (`weights =
//! "random"`) or loaded from `$TAGE_CACHE_DIR/<weights>/` holding a BERT
//! `vocab.txt` and `model.safetensors` with the usual parameter names.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embedding, linear_normal, LayerNorm, Params};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CACHE_ENV: &str = "TAGE_CACHE_DIR";
pub const RANDOM_WEIGHTS: &str = "random";

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;
const MAX_WORD_CHARS: usize = 100;

/// Splits raw text into word tokens: whitespace separated, with every ASCII
/// punctuation character as its own token.
pub fn word_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '_' {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Greedy longest-match-first WordPiece tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPiece {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

/// Sub-word ids for one instruction plus, for every word, the contiguous
/// range of positions in `ids` it maps to. `ids` starts with `[CLS]` and
/// ends with `[SEP]`; neither belongs to any word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    pub ids: Vec<u32>,
    pub ranges: Vec<Range<usize>>,
}

impl WordPiece {
    pub fn new(vocab: Vec<String>, lowercase: bool) -> Result<Self> {
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for special in [PAD, UNK, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(Error::Config(format!("sub-word vocabulary lacks {special}")));
            }
        }
        Ok(Self {
            vocab,
            index,
            lowercase,
        })
    }

    /// Vocabulary of special tokens, every word in `words`, and every
    /// character both as a word start and as a `##` continuation, so any
    /// word made of seen characters can be segmented.
    pub fn from_words<'a, I: IntoIterator<Item = &'a str>>(words: I, lowercase: bool) -> Self {
        let mut whole = std::collections::BTreeSet::new();
        let mut chars = std::collections::BTreeSet::new();
        for w in words {
            let w = if lowercase { w.to_lowercase() } else { w.to_string() };
            chars.extend(w.chars());
            whole.insert(w);
        }
        let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        let mut push = |s: String, vocab: &mut Vec<String>| {
            if seen.insert(s.clone()) {
                vocab.push(s);
            }
        };
        for w in whole {
            push(w, &mut vocab);
        }
        for c in &chars {
            push(c.to_string(), &mut vocab);
        }
        for c in &chars {
            push(format!("##{c}"), &mut vocab);
        }
        Self::new(vocab, lowercase).expect("specials present")
    }

    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim_end().to_string()).collect(), lowercase)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn special(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn pad_id(&self) -> u32 {
        self.special(PAD)
    }

    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let word = if self.lowercase { word.to_lowercase() } else { word.to_string() };
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![self.special(UNK)];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece = format!("##{piece}");
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.special(UNK)],
            }
        }
        pieces
    }

    /// Sub-word ids with `[CLS]`/`[SEP]` and the word-to-sub-word alignment.
    pub fn tokenize_align(&self, tokens: &[String], max_len: usize) -> Result<SubwordAlignment> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("instruction has no tokens".into()));
        }
        let mut ids = vec![self.special(CLS)];
        let mut ranges = Vec::with_capacity(tokens.len());
        for word in tokens {
            let start = ids.len();
            ids.extend(self.tokenize_word(word));
            ranges.push(start..ids.len());
        }
        ids.push(self.special(SEP));
        if ids.len() > max_len {
            return Err(Error::TooLong {
                id: "<unnamed>".into(),
                len: ids.len(),
                max: max_len,
            });
        }
        Ok(SubwordAlignment { ids, ranges })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    Mini,
    Small,
    Medium,
    Base,
    Large,
    /// Arbitrary shape, for experiments and fast tests.
    Custom {
        layers: usize,
        hidden: usize,
        heads: usize,
    },
}

impl EncoderPreset {
    pub const ALL: [EncoderPreset; 5] = [
        EncoderPreset::Mini,
        EncoderPreset::Small,
        EncoderPreset::Medium,
        EncoderPreset::Base,
        EncoderPreset::Large,
    ];

    /// `(layers, hidden width)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            EncoderPreset::Mini => (4, 256),
            EncoderPreset::Small => (4, 512),
            EncoderPreset::Medium => (8, 512),
            EncoderPreset::Base => (12, 768),
            EncoderPreset::Large => (24, 1024),
            EncoderPreset::Custom { layers, hidden, .. } => (layers, hidden),
        }
    }

    pub fn layers(self) -> usize {
        self.dims().0
    }

    pub fn hidden(self) -> usize {
        self.dims().1
    }

    /// 64-wide heads, as in the BERT family.
    pub fn heads(self) -> usize {
        match self {
            EncoderPreset::Custom { heads, .. } => heads,
            other => other.hidden() / 64,
        }
    }

    pub fn intermediate(self) -> usize {
        4 * self.hidden()
    }

    pub fn name(self) -> String {
        match self {
            EncoderPreset::Mini => "mini".into(),
            EncoderPreset::Small => "small".into(),
            EncoderPreset::Medium => "medium".into(),
            EncoderPreset::Base => "base".into(),
            EncoderPreset::Large => "large".into(),
            EncoderPreset::Custom {
                layers,
                hidden,
                heads,
            } => format!("custom-{layers}x{hidden}x{heads}"),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mini" => Ok(EncoderPreset::Mini),
            "small" => Ok(EncoderPreset::Small),
            "medium" => Ok(EncoderPreset::Medium),
            "base" => Ok(EncoderPreset::Base),
            "large" => Ok(EncoderPreset::Large),
            other => {
                let dims: Option<Vec<usize>> = other
                    .strip_prefix("custom-")
                    .map(|s| s.split('x').filter_map(|d| d.parse().ok()).collect());
                match dims.as_deref() {
                    Some(&[layers, hidden, heads]) if heads > 0 && hidden % heads == 0 => {
                        Ok(EncoderPreset::Custom {
                            layers,
                            hidden,
                            heads,
                        })
                    }
                    _ => Err(Error::Config(format!("unknown encoder preset `{other}`"))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub max_subword_len: usize,
    /// `"random"` or a directory name under `$TAGE_CACHE_DIR`.
    pub weights: String,
    pub lowercase: bool,
    /// Exclude encoder weights from optimisation.
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            preset: EncoderPreset::Mini,
            max_subword_len: 128,
            weights: RANDOM_WEIGHTS.into(),
            lowercase: true,
            freeze: false,
        }
    }
}

impl EncoderConfig {
    pub fn hidden(&self) -> usize {
        self.preset.hidden()
    }

    fn position_slots(&self) -> usize {
        self.max_subword_len.max(512)
    }

    /// Directory holding pre-trained weights, when `weights` names one.
    pub fn weights_dir(&self) -> Option<PathBuf> {
        if self.weights == RANDOM_WEIGHTS {
            return None;
        }
        let base = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".tage-cache"));
        Some(base.join(&self.weights))
    }
}

/// Per-word contextual vectors for a batch of instructions.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `[B, N, d]`, `N` the longest instruction in words.
    pub vectors: Tensor,
    /// `[B, N]`, 1 for real words and 0 for padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl EncoderStates {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.vectors.dim(1).unwrap_or(0)
    }

    /// Unpadded `[n_i, d]` states of one instruction.
    pub fn instance(&self, i: usize) -> Result<Tensor> {
        Ok(self.vectors.get(i)?.narrow(0, 0, self.lengths[i])?)
    }

    pub fn detach(&self) -> Self {
        Self {
            vectors: self.vectors.detach(),
            mask: self.mask.clone(),
            lengths: self.lengths.clone(),
        }
    }
}

struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    output_norm: LayerNorm,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    fn new(p: &Params, hidden: usize, heads: usize) -> Result<Self> {
        let s = p.pp("self");
        let o = p.pp("output");
        Ok(Self {
            query: linear_normal(&s.pp("query"), hidden, hidden, INIT_STD)?,
            key: linear_normal(&s.pp("key"), hidden, hidden, INIT_STD)?,
            value: linear_normal(&s.pp("value"), hidden, hidden, INIT_STD)?,
            output: linear_normal(&o.pp("dense"), hidden, hidden, INIT_STD)?,
            output_norm: LayerNorm::new(&o.pp("LayerNorm"), hidden, LN_EPS)?,
            heads,
            head_dim: hidden / heads,
        })
    }

    fn forward(&self, x: &Tensor, additive_mask: &Tensor) -> candle_core::Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, s, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.head_dim as f64).sqrt())?;
        let scores = scores.broadcast_add(additive_mask)?;
        let probs = crate::nn::softmax_last(&scores)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, d))?;
        self.output_norm
            .forward(&(self.output.forward(&ctx)? + x)?)
    }
}

struct TransformerLayer {
    attention: SelfAttention,
    intermediate: Linear,
    output: Linear,
    output_norm: LayerNorm,
}

impl TransformerLayer {
    fn new(p: &Params, hidden: usize, heads: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            attention: SelfAttention::new(&p.pp("attention"), hidden, heads)?,
            intermediate: linear_normal(&p.pp("intermediate").pp("dense"), hidden, inner, INIT_STD)?,
            output: linear_normal(&p.pp("output").pp("dense"), inner, hidden, INIT_STD)?,
            output_norm: LayerNorm::new(&p.pp("output").pp("LayerNorm"), hidden, LN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor, additive_mask: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.attention.forward(x, additive_mask)?;
        let h = self.intermediate.forward(&x)?.gelu_erf()?;
        self.output_norm.forward(&(self.output.forward(&h)? + x)?)
    }
}

pub struct InstructionEncoder {
    config: EncoderConfig,
    tokenizer: WordPiece,
    word_embeddings: Embedding,
    position_embeddings: Embedding,
    token_type_embeddings: Embedding,
    embedding_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    dtype: DType,
    device: Device,
}

impl InstructionEncoder {
    /// Builds the encoder under the parameter prefix of `p`.
    pub fn new(p: &Params, config: EncoderConfig, tokenizer: WordPiece) -> Result<Self> {
        let preset = config.preset;
        let hidden = preset.hidden();
        if preset.heads() == 0 || !hidden.is_multiple_of(preset.heads()) {
            return Err(Error::Config(format!(
                "hidden width {hidden} not divisible by {} heads",
                preset.heads()
            )));
        }
        let emb = p.pp("embeddings");
        let word_embeddings = embedding(&emb.pp("word_embeddings"), tokenizer.len(), hidden, INIT_STD)?;
        let position_embeddings = embedding(
            &emb.pp("position_embeddings"),
            config.position_slots(),
            hidden,
            INIT_STD,
        )?;
        let token_type_embeddings = embedding(&emb.pp("token_type_embeddings"), 2, hidden, INIT_STD)?;
        let embedding_norm = LayerNorm::new(&emb.pp("LayerNorm"), hidden, LN_EPS)?;
        let layers = (0..preset.layers())
            .map(|i| {
                TransformerLayer::new(
                    &p.pp("encoder").pp("layer").pp(i.to_string()),
                    hidden,
                    preset.heads(),
                    preset.intermediate(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tokenizer,
            word_embeddings,
            position_embeddings,
            token_type_embeddings,
            embedding_norm,
            layers,
            dtype: p.dtype(),
            device: p.device().clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WordPiece {
        &self.tokenizer
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden()
    }

    pub fn tokenize_align(&self, tokens: &[String]) -> Result<SubwordAlignment> {
        self.tokenizer.tokenize_align(tokens, self.config.max_subword_len)
    }

    /// Encodes one instruction; `[n, d]` vectors.
    pub fn encode(&self, tokens: &[String]) -> Result<EncoderStates> {
        self.encode_batch(&[tokens])
    }

    pub fn encode_batch<S: AsRef<[String]>>(&self, batch: &[S]) -> Result<EncoderStates> {
        let alignments = batch
            .iter()
            .map(|t| self.tokenize_align(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.encode_aligned(&alignments)
    }

    pub fn encode_aligned(&self, alignments: &[SubwordAlignment]) -> Result<EncoderStates> {
        let b = alignments.len();
        if b == 0 {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let s = alignments.iter().map(|a| a.ids.len()).max().unwrap();
        let n = alignments.iter().map(|a| a.ranges.len()).max().unwrap();
        let pad = self.tokenizer.pad_id();

        let mut ids = vec![pad; b * s];
        let mut sub_mask = vec![0f32; b * s];
        let mut pool = vec![0f32; b * n * s];
        let mut word_mask = vec![0f32; b * n];
        for (i, a) in alignments.iter().enumerate() {
            for (j, &id) in a.ids.iter().enumerate() {
                ids[i * s + j] = id;
                sub_mask[i * s + j] = 1.0;
            }
            for (w, range) in a.ranges.iter().enumerate() {
                word_mask[i * n + w] = 1.0;
                let weight = 1.0 / range.len() as f32;
                for k in range.clone() {
                    pool[(i * n + w) * s + k] = weight;
                }
            }
        }
        let dev = &self.device;
        let ids = Tensor::from_vec(ids, (b, s), dev)?;
        let positions = Tensor::arange(0u32, s as u32, dev)?.unsqueeze(0)?;
        let types = Tensor::zeros((b, s), DType::U32, dev)?;
        let x = self
            .word_embeddings
            .forward(&ids)?
            .broadcast_add(&self.position_embeddings.forward(&positions)?)?
            .add(&self.token_type_embeddings.forward(&types)?)?;
        let mut x = self.embedding_norm.forward(&x)?;

        let sub_mask = Tensor::from_vec(sub_mask, (b, s), dev)?.to_dtype(self.dtype)?;
        let additive = ((sub_mask.ones_like()? - &sub_mask)? * -1e9)?.reshape((b, 1, 1, s))?;
        for layer in &self.layers {
            x = layer.forward(&x, &additive)?;
        }
        let pool = Tensor::from_vec(pool, (b, n, s), dev)?.to_dtype(self.dtype)?;
        let vectors = pool.matmul(&x)?;
        Ok(EncoderStates {
            vectors,
            mask: Tensor::from_vec(word_mask, (b, n), dev)?.to_dtype(self.dtype)?,
            lengths: alignments.iter().map(|a| a.ranges.len()).collect(),
        })
    }
}

/// Reads pre-trained BERT weights from a safetensors file, with the names
/// the encoder uses (optional `bert.` prefix stripped).
pub fn read_pretrained(path: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let tensors = candle_core::safetensors::load(path, device)?;
    Ok(tensors
        .into_iter()
        .map(|(k, v)| (k.strip_prefix("bert.").unwrap_or(&k).to_string(), v))
        .collect())
}
