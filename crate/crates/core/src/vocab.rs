//! Closed label sets and their index mappings.
//!
//! Task and argument vocabularies carry a reserved `EOS` label placed after
//! the configured labels. The BIO tag set is derived from the object classes
//! as `["O", "B-c1", "I-c1", "B-c2", ...]`, so `K = 2 * |classes| + 1`.
//!
//! Label order comes from the configuration file and fixes every label
//! index. A checkpoint is only meaningful together with the exact label
//! configuration it was trained with.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: &str = "EOS";
pub const OUTSIDE_TAG: &str = "O";

pub const DEFAULT_TASK_TYPES: [&str; 16] = [
    "being_located",
    "being_in_category",
    "bringing",
    "changing_operational_state",
    "checking_state",
    "cutting",
    "following",
    "giving",
    "inspecting",
    "motion",
    "opening",
    "picking",
    "placing",
    "pushing",
    "rotation",
    "searching",
];

pub const DEFAULT_ARGUMENT_TYPES: [&str; 17] = [
    "agent",
    "area",
    "category",
    "container_portal",
    "containing_object",
    "cotheme",
    "degree",
    "desired_state",
    "device",
    "goal",
    "cogoal",
    "manner",
    "operational_state",
    "recipient",
    "source",
    "cosource",
    "theme",
];

pub const DEFAULT_OBJECT_CLASSES: [&str; 25] = [
    "APPLE",
    "BED",
    "BEDSIDE_TABLE",
    "BOOK",
    "BOTTLE",
    "BOX",
    "CABINET",
    "CUP",
    "DINING_TABLE",
    "DOOR",
    "DRAWER",
    "FLOOR",
    "KNIFE",
    "LAMP",
    "LAPTOP",
    "PERSON",
    "PLATE",
    "REFRIGERATOR",
    "SHELF",
    "SHIRT",
    "SOFA",
    "TABLE",
    "TELEVISION",
    "TRASH_CAN",
    "WINDOW",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Task,
    Argument,
    Object,
    Bio,
}

impl VocabKind {
    pub fn name(self) -> &'static str {
        match self {
            VocabKind::Task => "task type",
            VocabKind::Argument => "argument type",
            VocabKind::Object => "object class",
            VocabKind::Bio => "BIO tag",
        }
    }
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered label list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I, kind: VocabKind) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Config(format!("empty {kind} label at position {i}")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate {kind} label `{label}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

/// Builds the BIO tag list for an ordered set of object classes.
pub fn derive_bio_tagset<S: AsRef<str>>(object_classes: &[S]) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut tags = Vec::with_capacity(2 * object_classes.len() + 1);
    tags.push(OUTSIDE_TAG.to_string());
    for class in object_classes {
        let class = class.as_ref();
        if class.is_empty() {
            return Err(Error::Config("empty object class name".into()));
        }
        if !seen.insert(class) {
            return Err(Error::Config(format!("duplicate object class `{class}`")));
        }
        tags.push(format!("B-{class}"));
        tags.push(format!("I-{class}"));
    }
    Ok(tags)
}

/// Parsed form of a BIO tag string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> BioTag<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == OUTSIDE_TAG {
            Some(BioTag::Outside)
        } else if let Some(class) = tag.strip_prefix("B-") {
            (!class.is_empty()).then_some(BioTag::Begin(class))
        } else if let Some(class) = tag.strip_prefix("I-") {
            (!class.is_empty()).then_some(BioTag::Inside(class))
        } else {
            None
        }
    }

    pub fn class(&self) -> Option<&'a str> {
        match *self {
            BioTag::Outside => None,
            BioTag::Begin(c) | BioTag::Inside(c) => Some(c),
        }
    }
}

/// On-disk label configuration.
///
/// Object classes may be listed inline or kept in a separate document named
/// by `object_classes_file` (resolved relative to the config file), so the
/// grounding vocabulary can change without touching the task annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub task_types: Vec<String>,
    pub argument_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_classes_file: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ObjectClassesDoc {
    object_classes: Vec<String>,
}

impl LabelConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: LabelConfig = serde_json::from_str(&text)?;
        if config.object_classes.is_none() {
            let file = config.object_classes_file.clone().ok_or_else(|| {
                Error::Config(format!(
                    "{}: neither object_classes nor object_classes_file is set",
                    path.display()
                ))
            })?;
            let file = match path.parent() {
                Some(dir) if file.is_relative() => dir.join(file),
                _ => file,
            };
            let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let doc: ObjectClassesDoc = serde_json::from_str(&text)?;
            config.object_classes = Some(doc.object_classes);
        }
        Ok(config)
    }
}

/// All label vocabularies used by the model. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabularies {
    tasks: LabelSet,
    arguments: LabelSet,
    objects: LabelSet,
    bio: LabelSet,
}

impl LabelVocabularies {
    pub fn new<S: AsRef<str>>(
        task_types: &[S],
        argument_types: &[S],
        object_classes: &[S],
    ) -> Result<Self> {
        let check_eos = |labels: &[S], kind: VocabKind| -> Result<()> {
            if labels.iter().any(|l| l.as_ref() == EOS) {
                return Err(Error::Config(format!("`{EOS}` is reserved in the {kind} vocabulary")));
            }
            Ok(())
        };
        check_eos(task_types, VocabKind::Task)?;
        check_eos(argument_types, VocabKind::Argument)?;
        let bio = derive_bio_tagset(object_classes)?;
        Ok(Self {
            tasks: LabelSet::new(task_types.iter().map(|s| s.as_ref().to_string()), VocabKind::Task)?,
            arguments: LabelSet::new(
                argument_types.iter().map(|s| s.as_ref().to_string()),
                VocabKind::Argument,
            )?,
            objects: LabelSet::new(
                object_classes.iter().map(|s| s.as_ref().to_string()),
                VocabKind::Object,
            )?,
            bio: LabelSet::new(bio, VocabKind::Bio)?,
        })
    }

    pub fn from_config(config: &LabelConfig) -> Result<Self> {
        let objects = config
            .object_classes
            .as_deref()
            .ok_or_else(|| Error::Config("object classes not loaded".into()))?;
        Self::new(&config.task_types, &config.argument_types, objects)
    }

    pub fn to_config(&self) -> LabelConfig {
        LabelConfig {
            task_types: self.tasks.labels().to_vec(),
            argument_types: self.arguments.labels().to_vec(),
            object_classes: Some(self.objects.labels().to_vec()),
            object_classes_file: None,
        }
    }

    pub fn tasks(&self) -> &LabelSet {
        &self.tasks
    }

    pub fn arguments(&self) -> &LabelSet {
        &self.arguments
    }

    pub fn objects(&self) -> &LabelSet {
        &self.objects
    }

    pub fn bio_tags(&self) -> &[String] {
        self.bio.labels()
    }

    /// Number of BIO tags, `2 * |objects| + 1`.
    pub fn num_bio_tags(&self) -> usize {
        self.bio.len()
    }

    /// Task classifier width, including EOS.
    pub fn num_task_classes(&self) -> usize {
        self.tasks.len() + 1
    }

    /// Argument classifier width, including EOS.
    pub fn num_arg_classes(&self) -> usize {
        self.arguments.len() + 1
    }

    pub fn task_eos(&self) -> usize {
        self.tasks.len()
    }

    pub fn arg_eos(&self) -> usize {
        self.arguments.len()
    }

    fn set(&self, kind: VocabKind) -> &LabelSet {
        match kind {
            VocabKind::Task => &self.tasks,
            VocabKind::Argument => &self.arguments,
            VocabKind::Object => &self.objects,
            VocabKind::Bio => &self.bio,
        }
    }

    fn has_eos(kind: VocabKind) -> bool {
        matches!(kind, VocabKind::Task | VocabKind::Argument)
    }

    /// Number of indices addressable in `kind`, EOS included.
    pub fn size(&self, kind: VocabKind) -> usize {
        self.set(kind).len() + usize::from(Self::has_eos(kind))
    }

    pub fn encode(&self, kind: VocabKind, label: &str) -> Result<usize> {
        let set = self.set(kind);
        if Self::has_eos(kind) && label == EOS {
            return Ok(set.len());
        }
        set.get(label).ok_or_else(|| Error::UnknownLabel {
            kind: kind.name(),
            label: label.to_string(),
        })
    }

    pub fn decode(&self, kind: VocabKind, index: usize) -> Result<&str> {
        let set = self.set(kind);
        if Self::has_eos(kind) && index == set.len() {
            return Ok(EOS);
        }
        set.label(index).ok_or(Error::IndexOutOfRange {
            kind: kind.name(),
            index,
            size: self.size(kind),
        })
    }

    /// Object class for a BIO tag index; `None` for `O`.
    pub fn bio_class(&self, tag_index: usize) -> Option<usize> {
        (tag_index > 0 && tag_index < self.bio.len()).then(|| (tag_index - 1) / 2)
    }

    pub fn is_begin_tag(tag_index: usize) -> bool {
        tag_index % 2 == 1
    }

    /// Human-readable differences against another vocabulary set.
    pub fn diff(&self, other: &LabelVocabularies) -> Vec<String> {
        let mut out = Vec::new();
        for kind in [VocabKind::Task, VocabKind::Argument, VocabKind::Object] {
            let (a, b) = (self.set(kind), other.set(kind));
            if a == b {
                continue;
            }
            if a.len() != b.len() {
                out.push(format!("{kind} vocabulary size {} vs {}", a.len(), b.len()));
            }
            for (i, (x, y)) in a.labels().iter().zip(b.labels()).enumerate() {
                if x != y {
                    out.push(format!("{kind} label {i}: `{x}` vs `{y}`"));
                }
            }
        }
        if self.bio.len() != other.bio.len() {
            out.push(format!(
                "BIO tag count K={} vs K={}",
                self.bio.len(),
                other.bio.len()
            ));
        }
        out
    }
}

impl Default for LabelVocabularies {
    fn default() -> Self {
        Self::new(&DEFAULT_TASK_TYPES, &DEFAULT_ARGUMENT_TYPES, &DEFAULT_OBJECT_CLASSES)
            .expect("built-in vocabularies are valid")
    }
}
