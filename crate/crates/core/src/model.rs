//! The full model: encoder, grounding head and nested decoder, plus
//! checkpoint persistence.
//!
//! A checkpoint is one safetensors file. Its metadata holds the model
//! configuration, label vocabularies, sub-word vocabulary and any caller
//! history, so a checkpoint is self-describing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedInstruction;
use crate::decoder::{gold_structure, DecodeLimits, DecodedTask, DecoderShape, NestedDecoder, TeacherTrace};
use crate::encoder::{read_pretrained, EncoderConfig, EncoderStates, InstructionEncoder, WordPiece};
use crate::error::{Error, Result};
use crate::grounding::{decode_bio, GroundingHead, GroundingOutput, ObjectSpan};
use crate::loss::{compute_losses, LossOutput};
use crate::nn::ParamStore;
use crate::vocab::{LabelConfig, LabelVocabularies, VocabKind};

const META_CONFIG: &str = "config";
const META_LABELS: &str = "labels";
const META_SUBWORDS: &str = "subword_vocab";
const META_HISTORY: &str = "history";
const META_FORMAT: &str = "format";
const FORMAT: &str = "tage-checkpoint-1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderShape,
    pub limits: DecodeLimits,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, labels: &LabelVocabularies, limits: DecodeLimits, seed: u64) -> Self {
        let decoder = DecoderShape::for_encoder(encoder.hidden(), labels);
        Self {
            encoder,
            decoder,
            limits,
            seed,
            precision: Precision::F32,
        }
    }
}

/// Raw decoder output for one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub tasks: Vec<DecodedTask>,
    pub objects: Vec<ObjectSpan>,
}

pub struct TagModel {
    store: ParamStore,
    config: ModelConfig,
    labels: LabelVocabularies,
    encoder: InstructionEncoder,
    grounding: GroundingHead,
    decoder: NestedDecoder,
}

impl std::fmt::Debug for TagModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TagModel")
            .field("preset", &self.config.encoder.preset.name())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl TagModel {
    /// Builds a freshly initialised model. Pre-trained encoder weights are
    /// loaded when the encoder configuration names them.
    pub fn new(config: ModelConfig, labels: LabelVocabularies, tokenizer: WordPiece) -> Result<Self> {
        config.limits.validate()?;
        let expected = DecoderShape::for_encoder(config.encoder.hidden(), &labels);
        if (config.decoder.task_classes, config.decoder.arg_classes, config.decoder.bio_tags)
            != (expected.task_classes, expected.arg_classes, expected.bio_tags)
        {
            return Err(Error::Config("decoder class counts do not match the label vocabularies".into()));
        }
        let store = ParamStore::new(config.seed, config.precision.dtype(), Device::Cpu);
        let root = store.root();
        let d = config.encoder.hidden();
        let encoder = InstructionEncoder::new(&root.pp("encoder"), config.encoder.clone(), tokenizer)?;
        let grounding = GroundingHead::new(&root.pp("grounding"), d, labels.num_bio_tags())?;
        let decoder = NestedDecoder::new(&root.pp("decoder"), d, config.decoder)?;
        let model = Self {
            store,
            config,
            labels,
            encoder,
            grounding,
            decoder,
        };
        if let Some(dir) = model.config.encoder.weights_dir() {
            model.load_encoder_weights(&dir.join("model.safetensors"))?;
        }
        Ok(model)
    }

    /// Builds a model whose sub-word vocabulary comes from the pre-trained
    /// weights when configured, otherwise from the words of `corpus`.
    pub fn for_corpus(config: ModelConfig, labels: LabelVocabularies, corpus: &[AnnotatedInstruction]) -> Result<Self> {
        let lowercase = config.encoder.lowercase;
        let tokenizer = match config.encoder.weights_dir() {
            Some(dir) => WordPiece::from_vocab_file(&dir.join("vocab.txt"), lowercase)?,
            None => WordPiece::from_words(corpus.iter().flat_map(|i| i.tokens.iter().map(String::as_str)), lowercase),
        };
        Self::new(config, labels, tokenizer)
    }

    fn load_encoder_weights(&self, path: &Path) -> Result<()> {
        let tensors = read_pretrained(path, self.store.device())?;
        let mut problems = Vec::new();
        for (name, var) in self.store.named_vars() {
            let Some(key) = name.strip_prefix("encoder.") else {
                continue;
            };
            match tensors.get(key) {
                Some(t) if t.dims() == var.dims() => var.set(&t.to_dtype(self.store.dtype())?)?,
                Some(t) => problems.push(format!("{key}: shape {:?} vs {:?}", t.dims(), var.dims())),
                None => problems.push(format!("{key}: missing")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelVocabularies {
        &self.labels
    }

    pub fn encoder(&self) -> &InstructionEncoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Variables the optimiser updates; encoder weights are left out when
    /// the encoder is frozen.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.config.encoder.freeze {
            self.store.vars_with_prefix("encoder.", false)
        } else {
            self.store.named_vars().into_values().collect()
        }
    }

    pub fn encode<S: AsRef<[String]>>(&self, batch: &[S]) -> Result<EncoderStates> {
        let states = self.encoder.encode_batch(batch)?;
        Ok(if self.config.encoder.freeze { states.detach() } else { states })
    }

    pub fn gold_tags(&self, inst: &AnnotatedInstruction) -> Result<Vec<usize>> {
        inst.bio.iter().map(|t| self.labels.encode(VocabKind::Bio, t)).collect()
    }

    /// Teacher-forced pass over a batch of annotated instructions.
    pub fn trace(&self, batch: &[&AnnotatedInstruction]) -> Result<(TeacherTrace, GroundingOutput)> {
        let tokens: Vec<&[String]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
        let enc = self.encode(&tokens)?;
        let grounding = self.grounding.forward(&enc)?;
        let gold = batch
            .iter()
            .map(|i| gold_structure(i, &self.labels))
            .collect::<Result<Vec<_>>>()?;
        let trace = self.decoder.teacher_forced(&enc, &grounding.probs, &gold)?;
        Ok((trace, grounding))
    }

    pub fn loss(&self, batch: &[&AnnotatedInstruction]) -> Result<LossOutput> {
        let (trace, grounding) = self.trace(batch)?;
        let tags = batch.iter().map(|i| self.gold_tags(i)).collect::<Result<Vec<_>>>()?;
        compute_losses(&trace.task_steps, &trace.arg_steps, &grounding.log_probs, &tags)
    }

    /// Greedy decoding of a batch of tokenised instructions.
    pub fn decode<S: AsRef<[String]>>(&self, batch: &[S], limits: DecodeLimits) -> Result<Vec<RawPrediction>> {
        let enc = self.encode(batch)?;
        let grounding = self.grounding.forward(&enc)?;
        let tasks = self.decoder.greedy(&enc, &grounding.probs, limits)?;
        tasks
            .into_iter()
            .enumerate()
            .map(|(i, tasks)| {
                let objects = decode_bio(&grounding.distributions(i, enc.lengths[i])?);
                Ok(RawPrediction { tasks, objects })
            })
            .collect()
    }

    /// Per-token tag distributions for one instruction.
    pub fn tag_distributions(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode(&[tokens])?;
        self.grounding.forward(&enc)?.distributions(0, tokens.len())
    }

    pub fn save(&self, path: &Path, history: &serde_json::Value) -> Result<()> {
        let tensors = self.store.snapshot()?;
        let mut meta = HashMap::new();
        meta.insert(META_FORMAT.to_string(), FORMAT.to_string());
        meta.insert(META_CONFIG.to_string(), serde_json::to_string(&self.config)?);
        meta.insert(META_LABELS.to_string(), serde_json::to_string(&self.labels.to_config())?);
        meta.insert(META_SUBWORDS.to_string(), serde_json::to_string(self.encoder.tokenizer().vocab())?);
        meta.insert(META_HISTORY.to_string(), serde_json::to_string(history)?);
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors.iter(), Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = metadata
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        let field = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{key}`")))
        };
        if field(META_FORMAT)? != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format `{}`", field(META_FORMAT)?)));
        }
        let mut config: ModelConfig = serde_json::from_str(field(META_CONFIG)?)?;
        let label_config: LabelConfig = serde_json::from_str(field(META_LABELS)?)?;
        let labels = LabelVocabularies::from_config(&label_config)?;
        let subwords: Vec<String> = serde_json::from_str(field(META_SUBWORDS)?)?;
        let history: serde_json::Value = serde_json::from_str(field(META_HISTORY)?)?;
        let tokenizer = WordPiece::new(subwords, config.encoder.lowercase)?;

        // Trained weights come from the checkpoint, not the cache.
        let weights = std::mem::replace(&mut config.encoder.weights, crate::encoder::RANDOM_WEIGHTS.into());
        let mut model = Self::new(config, labels, tokenizer)?;
        model.config.encoder.weights = weights;
        let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        model
            .store
            .assign(&tensors)
            .map_err(|e| Error::CheckpointMismatch(e.split(", ").map(str::to_string).collect()))?;
        Ok((model, history))
    }

    /// Loads a checkpoint and refuses it if its vocabularies differ from
    /// `expected`.
    pub fn load_expecting(path: &Path, expected: &LabelVocabularies) -> Result<(Self, serde_json::Value)> {
        let (model, history) = Self::load(path)?;
        let diff = model.labels.diff(expected);
        if diff.is_empty() {
            Ok((model, history))
        } else {
            Err(Error::CheckpointMismatch(diff))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderPreset;
    use crate::fixtures;

    pub(crate) fn tiny_config(labels: &LabelVocabularies) -> ModelConfig {
        let encoder = EncoderConfig {
            preset: EncoderPreset::Custom {
                layers: 1,
                hidden: 16,
                heads: 2,
            },
            ..Default::default()
        };
        ModelConfig::new(encoder, labels, DecodeLimits::default(), 7)
    }

    fn tiny_model() -> (TagModel, Vec<AnnotatedInstruction>) {
        let labels = LabelVocabularies::default();
        let corpus = vec![fixtures::located_pick_place(), fixtures::bring_cup(), fixtures::look_down()];
        let model = TagModel::for_corpus(tiny_config(&labels), labels, &corpus).unwrap();
        (model, corpus)
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let (model, corpus) = tiny_model();
        let batch: Vec<&AnnotatedInstruction> = corpus.iter().collect();
        let out = model.loss(&batch).unwrap();
        assert!(out.breakdown.is_finite());
        assert!(out.breakdown.task > 0.0 && out.breakdown.arg > 0.0 && out.breakdown.grounding > 0.0);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let (model, corpus) = tiny_model();
        let a: Vec<&AnnotatedInstruction> = corpus.iter().collect();
        let b: Vec<&AnnotatedInstruction> = corpus.iter().rev().collect();
        let la = model.loss(&a).unwrap().breakdown.total;
        let lb = model.loss(&b).unwrap().breakdown.total;
        assert!((la - lb).abs() < 1e-5, "{la} vs {lb}");
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let (model, corpus) = tiny_model();
        let batch: Vec<&AnnotatedInstruction> = corpus.iter().collect();
        let out = model.loss(&batch).unwrap();
        let grads = out.total.backward().unwrap();
        let groups = [
            "encoder.",
            "grounding.",
            "decoder.task.attention",
            "decoder.task.cell",
            "decoder.task.span",
            "decoder.task.type.",
            "decoder.task.type_embedding",
            "decoder.arg.attention",
            "decoder.arg.cell",
            "decoder.arg.span",
            "decoder.arg.type.",
            "decoder.arg.type_embedding",
        ];
        let vars = model.store().named_vars();
        for group in groups {
            let norm: f64 = vars
                .iter()
                .filter(|(k, _)| k.starts_with(group))
                .filter_map(|(_, v)| grads.get(v.as_tensor()))
                .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64)
                .sum();
            assert!(norm > 0.0, "no gradient reaches {group}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, corpus) = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let history = serde_json::json!({"epochs": 3});
        model.save(&path, &history).unwrap();
        let (loaded, h) = TagModel::load(&path).unwrap();
        assert_eq!(h, history);
        assert_eq!(loaded.config(), model.config());
        let batch: Vec<&AnnotatedInstruction> = corpus.iter().collect();
        let a = model.loss(&batch).unwrap().breakdown.total;
        let b = loaded.loss(&batch).unwrap().breakdown.total;
        assert!((a - b).abs() < 1e-6);
        let tokens: Vec<&[String]> = corpus.iter().map(|i| i.tokens.as_slice()).collect();
        assert_eq!(
            model.decode(&tokens, DecodeLimits::default()).unwrap(),
            loaded.decode(&tokens, DecodeLimits::default()).unwrap()
        );
    }

    #[test]
    fn altered_object_vocabulary_is_refused() {
        let (model, _) = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        model.save(&path, &serde_json::Value::Null).unwrap();
        let mut cfg = LabelVocabularies::default().to_config();
        cfg.object_classes.as_mut().unwrap().push("SPOON".into());
        let other = LabelVocabularies::from_config(&cfg).unwrap();
        match TagModel::load_expecting(&path, &other) {
            Err(Error::CheckpointMismatch(diff)) => assert!(diff.iter().any(|d| d.contains("K="))),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn frozen_encoder_is_excluded() {
        let labels = LabelVocabularies::default();
        let mut config = tiny_config(&labels);
        config.encoder.freeze = true;
        let model = TagModel::for_corpus(config, labels, &[fixtures::bring_cup()]).unwrap();
        let all = model.store().named_vars().len();
        let enc = model.store().vars_with_prefix("encoder.", true).len();
        assert_eq!(model.trainable_vars().len(), all - enc);
    }
}
