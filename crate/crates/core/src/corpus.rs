//! Annotated instructions: data model, JSON-lines I/O, validation and
//! dataset statistics.
//!
//! One instruction per line:
//!
//! ```json
//! {"tokens":["bring","me","a","cup"],"tasks":[{"start":0,"end":0,"type":"bringing",
//!   "args":[{"start":1,"end":1,"type":"recipient"},{"start":3,"end":3,"type":"theme"}]}],
//!  "bio":["O","O","O","B-CUP"]}
//! ```
//!
//! Token indices are 0-based word positions and spans are inclusive. The
//! same span may appear under several tasks, and under one task with
//! several argument types.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{BioTag, LabelVocabularies, VocabKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgumentRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub arg_type: String,
}

impl ArgumentRecord {
    pub fn new(start: usize, end: usize, arg_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            arg_type: arg_type.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub task_type: String,
    #[serde(default)]
    pub args: Vec<ArgumentRecord>,
}

impl TaskRecord {
    pub fn new(start: usize, end: usize, task_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            task_type: task_type.into(),
            args: Vec::new(),
        }
    }

    pub fn with_arg(mut self, start: usize, end: usize, arg_type: impl Into<String>) -> Self {
        self.args.push(ArgumentRecord::new(start, end, arg_type));
        self
    }

    /// Arguments in surface order (stable on ties), the order the decoder
    /// is trained to emit them.
    pub fn args_in_surface_order(&self) -> Vec<&ArgumentRecord> {
        let mut args: Vec<&ArgumentRecord> = self.args.iter().collect();
        args.sort_by_key(|a| a.start);
        args
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedInstruction {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub tasks: Vec<TaskRecord>,
    pub bio: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl AnnotatedInstruction {
    /// An instruction with no tasks and all-`O` grounding.
    pub fn unannotated(tokens: Vec<String>) -> Self {
        let bio = vec!["O".to_string(); tokens.len()];
        Self {
            tokens,
            tasks: Vec::new(),
            bio,
            split: None,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.tokens
            .get(start..=end)
            .map(|t| t.join(" "))
            .unwrap_or_default()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Rule {
    LengthMismatch { tokens: usize, tags: usize },
    SpanOutOfRange { start: usize, end: usize, len: usize },
    TaskOrder { previous_start: usize, start: usize },
    OrphanInside { tag: String },
    UnknownTag { tag: String },
    UnknownLabel { kind: String, label: String },
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::LengthMismatch { tokens, tags } => {
                write!(f, "{tags} BIO tags for {tokens} tokens")
            }
            Rule::SpanOutOfRange { start, end, len } => {
                write!(f, "span ({start}, {end}) outside 0..{len}")
            }
            Rule::TaskOrder {
                previous_start,
                start,
            } => write!(
                f,
                "task starting at {start} follows a task starting at {previous_start}"
            ),
            Rule::OrphanInside { tag } => write!(f, "`{tag}` without a preceding B/I of its class"),
            Rule::UnknownTag { tag } => write!(f, "malformed BIO tag `{tag}`"),
            Rule::UnknownLabel { kind, label } => write!(f, "unknown {kind} `{label}`"),
        }
    }
}

/// One broken invariant: which field, which element, which rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.rule),
            None => write!(f, "{}: {}", self.field, self.rule),
        }
    }
}

/// Checks every structural invariant of an instruction, and label
/// membership when `labels` is given. An empty result means valid.
pub fn validate_instruction(
    inst: &AnnotatedInstruction,
    labels: Option<&LabelVocabularies>,
) -> Vec<Violation> {
    let n = inst.tokens.len();
    let mut out = Vec::new();

    if inst.bio.len() != n {
        out.push(Violation {
            field: "bio".into(),
            index: None,
            rule: Rule::LengthMismatch {
                tokens: n,
                tags: inst.bio.len(),
            },
        });
    }

    let span_ok = |start: usize, end: usize| start <= end && end < n;
    let mut previous_start = None;
    for (j, task) in inst.tasks.iter().enumerate() {
        if !span_ok(task.start, task.end) {
            out.push(Violation {
                field: "tasks".into(),
                index: Some(j),
                rule: Rule::SpanOutOfRange {
                    start: task.start,
                    end: task.end,
                    len: n,
                },
            });
        }
        if let Some(prev) = previous_start {
            if task.start < prev {
                out.push(Violation {
                    field: "tasks".into(),
                    index: Some(j),
                    rule: Rule::TaskOrder {
                        previous_start: prev,
                        start: task.start,
                    },
                });
            }
        }
        previous_start = Some(task.start);
        if let Some(v) = labels {
            if v.encode(VocabKind::Task, &task.task_type).is_err() || task.task_type == crate::vocab::EOS {
                out.push(Violation {
                    field: "tasks".into(),
                    index: Some(j),
                    rule: Rule::UnknownLabel {
                        kind: VocabKind::Task.name().into(),
                        label: task.task_type.clone(),
                    },
                });
            }
        }
        for (k, arg) in task.args.iter().enumerate() {
            let field = format!("tasks[{j}].args");
            if !span_ok(arg.start, arg.end) {
                out.push(Violation {
                    field: field.clone(),
                    index: Some(k),
                    rule: Rule::SpanOutOfRange {
                        start: arg.start,
                        end: arg.end,
                        len: n,
                    },
                });
            }
            if let Some(v) = labels {
                if v.encode(VocabKind::Argument, &arg.arg_type).is_err() || arg.arg_type == crate::vocab::EOS {
                    out.push(Violation {
                        field,
                        index: Some(k),
                        rule: Rule::UnknownLabel {
                            kind: VocabKind::Argument.name().into(),
                            label: arg.arg_type.clone(),
                        },
                    });
                }
            }
        }
    }

    let mut open_class: Option<&str> = None;
    for (i, tag) in inst.bio.iter().enumerate() {
        match BioTag::parse(tag) {
            None => {
                out.push(Violation {
                    field: "bio".into(),
                    index: Some(i),
                    rule: Rule::UnknownTag { tag: tag.clone() },
                });
                open_class = None;
            }
            Some(parsed) => {
                if let BioTag::Inside(class) = parsed {
                    if open_class != Some(class) {
                        out.push(Violation {
                            field: "bio".into(),
                            index: Some(i),
                            rule: Rule::OrphanInside { tag: tag.clone() },
                        });
                    }
                }
                if let (Some(v), Some(class)) = (labels, parsed.class()) {
                    if v.objects().get(class).is_none() {
                        out.push(Violation {
                            field: "bio".into(),
                            index: Some(i),
                            rule: Rule::UnknownLabel {
                                kind: VocabKind::Object.name().into(),
                                label: class.to_string(),
                            },
                        });
                    }
                }
                open_class = parsed.class();
            }
        }
    }
    out
}

/// Parses a JSON-lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: BufRead>(
    reader: R,
    labels: Option<&LabelVocabularies>,
) -> Result<Vec<AnnotatedInstruction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, line_no, labels)?);
    }
    Ok(out)
}

pub fn parse_line(
    line: &str,
    line_no: usize,
    labels: Option<&LabelVocabularies>,
) -> Result<AnnotatedInstruction> {
    let inst: AnnotatedInstruction =
        serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
    let violations = validate_instruction(&inst, labels);
    if !violations.is_empty() {
        return Err(Error::InvalidInstruction {
            line: line_no,
            violations,
        });
    }
    Ok(inst)
}

pub fn parse_corpus_str(text: &str, labels: Option<&LabelVocabularies>) -> Result<Vec<AnnotatedInstruction>> {
    parse_corpus(text.as_bytes(), labels)
}

pub fn read_corpus(
    path: impl AsRef<std::path::Path>,
    labels: Option<&LabelVocabularies>,
) -> Result<Vec<AnnotatedInstruction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(std::io::BufReader::new(file), labels)
}

/// Canonical single-line encoding of one instruction.
pub fn serialize_instruction(inst: &AnnotatedInstruction) -> String {
    serde_json::to_string(inst).expect("instruction serialization is infallible")
}

pub fn serialize_corpus(corpus: &[AnnotatedInstruction]) -> String {
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&serialize_instruction(inst));
        out.push('\n');
    }
    out
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &[AnnotatedInstruction]) -> std::io::Result<()> {
    for inst in corpus {
        writeln!(writer, "{}", serialize_instruction(inst))?;
    }
    Ok(())
}

/// Re-encodes a line in canonical form (field order, no extra whitespace).
pub fn canonicalize(line: &str) -> Result<String> {
    Ok(serialize_instruction(&parse_line(line, 1, None)?))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub total: usize,
    pub single_task: usize,
    pub multi_task: usize,
    /// Instructions with no annotated task.
    pub no_task: usize,
    pub task_occurrences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Keyed by split name; instructions without a split are under `all`
    /// only.
    pub splits: BTreeMap<String, SplitStats>,
    pub all: SplitStats,
    /// task type -> split name -> count
    pub task_types: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn corpus_stats(corpus: &[AnnotatedInstruction]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for inst in corpus {
        let mut buckets = vec![&mut stats.all];
        let split_name = inst.split.map(|s| s.to_string());
        let split_stats = split_name
            .as_ref()
            .map(|name| stats.splits.entry(name.clone()).or_default());
        if let Some(s) = split_stats {
            buckets.push(s);
        }
        for b in buckets {
            b.total += 1;
            b.task_occurrences += inst.tasks.len();
            match inst.tasks.len() {
                0 => b.no_task += 1,
                1 => b.single_task += 1,
                _ => b.multi_task += 1,
            }
        }
        for task in &inst.tasks {
            let per_split = stats.task_types.entry(task.task_type.clone()).or_default();
            *per_split.entry("all".into()).or_default() += 1;
            if let Some(name) = &split_name {
                *per_split.entry(name.clone()).or_default() += 1;
            }
        }
    }
    stats
}

impl CorpusStats {
    fn columns(&self) -> Vec<(&str, &SplitStats)> {
        let mut cols: Vec<(&str, &SplitStats)> = Vec::new();
        for name in ["train", "dev", "test"] {
            if let Some(s) = self.splits.get(name) {
                cols.push((name, s));
            }
        }
        cols.push(("all", &self.all));
        cols
    }

    /// Plain-text rendering: instruction counts per split, then task-type
    /// counts per split.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        out.push_str(&format!("{:<28}", ""));
        for (name, _) in &cols {
            out.push_str(&format!("{name:>8}"));
        }
        out.push('\n');
        let rows: [(&str, fn(&SplitStats) -> usize); 5] = [
            ("#instruction", |s| s.total),
            ("#single task instruction", |s| s.single_task),
            ("#multi task instruction", |s| s.multi_task),
            ("#no task instruction", |s| s.no_task),
            ("#task occurrences", |s| s.task_occurrences),
        ];
        for (label, get) in rows {
            out.push_str(&format!("{label:<28}"));
            for (_, s) in &cols {
                out.push_str(&format!("{:>8}", get(s)));
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&format!("{:<28}", "task type"));
        for (name, _) in &cols {
            out.push_str(&format!("{name:>8}"));
        }
        out.push('\n');
        for (task, counts) in &self.task_types {
            out.push_str(&format!("{task:<28}"));
            for (name, _) in &cols {
                out.push_str(&format!("{:>8}", counts.get(*name).copied().unwrap_or(0)));
            }
            out.push('\n');
        }
        out
    }
}
