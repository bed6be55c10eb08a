//! Strict-match scoring of task and argument extraction.
//!
//! A task is correct when span and type both match a gold task. Arguments
//! are scored only inside aligned task pairs; the grounded variant also
//! requires the argument's object class to match. Combined scores pool
//! tasks and arguments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedInstruction;
use crate::error::{Error, Result};
use crate::grounding::{assign_grounding, decode_tag_indices};
use crate::vocab::BioTag;

pub const NONE_LABEL: &str = "None";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalArg {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub arg_type: String,
    #[serde(default)]
    pub object: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub task_type: String,
    #[serde(default)]
    pub args: Vec<EvalArg>,
}

/// The scored units of one instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub tasks: Vec<EvalTask>,
}

/// Object spans of a BIO tag sequence, with class names.
pub fn object_spans(bio: &[String]) -> Vec<(usize, usize, String)> {
    let mut classes: Vec<&str> = Vec::new();
    let tags: Vec<usize> = bio
        .iter()
        .map(|t| match BioTag::parse(t) {
            Some(BioTag::Begin(c)) | Some(BioTag::Inside(c)) => {
                let idx = classes.iter().position(|&k| k == c).unwrap_or_else(|| {
                    classes.push(c);
                    classes.len() - 1
                });
                1 + 2 * idx + usize::from(matches!(BioTag::parse(t), Some(BioTag::Inside(_))))
            }
            _ => 0,
        })
        .collect();
    decode_tag_indices(&tags)
        .into_iter()
        .map(|s| (s.start, s.end, classes[s.class].to_string()))
        .collect()
}

impl EvalInstance {
    /// Units of an annotated instruction, grounding each argument against
    /// the instruction's own BIO tags.
    pub fn from_annotated(inst: &AnnotatedInstruction) -> Self {
        let spans = object_spans(&inst.bio);
        let indexed: Vec<crate::grounding::ObjectSpan> = spans
            .iter()
            .enumerate()
            .map(|(i, (s, e, _))| crate::grounding::ObjectSpan {
                start: *s,
                end: *e,
                class: i,
            })
            .collect();
        let tasks = inst
            .tasks
            .iter()
            .map(|t| EvalTask {
                start: t.start,
                end: t.end,
                task_type: t.task_type.clone(),
                args: t
                    .args
                    .iter()
                    .map(|a| EvalArg {
                        start: a.start,
                        end: a.end,
                        arg_type: a.arg_type.clone(),
                        object: assign_grounding(a.start, a.end, &indexed).map(|i| spans[i].2.clone()),
                    })
                    .collect(),
            })
            .collect();
        Self { tasks }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl Prf {
    /// Nothing predicted and nothing expected counts as perfect.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let (precision, recall) = if predicted == 0 && gold == 0 {
            (1.0, 1.0)
        } else {
            let p = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
            let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
            (p, r)
        };
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
            correct,
            predicted,
            gold,
        }
    }

    fn pooled(a: &Prf, b: &Prf) -> Self {
        Self::from_counts(a.correct + b.correct, a.predicted + b.predicted, a.gold + b.gold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub label: String,
    #[serde(flatten)]
    pub scores: Prf,
}

/// Gold labels on rows, predicted labels on columns; the last row and
/// column are `None` (spurious predictions and misses).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    fn from_pairs(pairs: &[(Option<String>, Option<String>)]) -> Self {
        let mut labels: Vec<String> = pairs
            .iter()
            .flat_map(|(g, p)| g.iter().chain(p.iter()).cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        labels.push(NONE_LABEL.to_string());
        let none = labels.len() - 1;
        let index = |l: &Option<String>| l.as_ref().map_or(none, |l| labels.iter().position(|x| x == l).unwrap());
        let mut counts = vec![vec![0; labels.len()]; labels.len()];
        for (g, p) in pairs {
            counts[index(g)][index(p)] += 1;
        }
        Self { labels, counts }
    }

    pub fn get(&self, gold: &str, predicted: &str) -> usize {
        let i = self.labels.iter().position(|l| l == gold);
        let j = self.labels.iter().position(|l| l == predicted);
        match (i, j) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len().saturating_sub(1)).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub tasks: Prf,
    pub args: Prf,
    pub args_grounded: Prf,
    pub combined: Prf,
    pub combined_grounded: Prf,
    pub task_types: Vec<TypeRow>,
    pub arg_types: Vec<TypeRow>,
    pub task_confusion: ConfusionMatrix,
    pub arg_confusion: ConfusionMatrix,
}

fn dedup_args(args: &[EvalArg]) -> Vec<&EvalArg> {
    let mut seen = std::collections::HashSet::new();
    args.iter()
        .filter(|a| seen.insert((a.start, a.end, &a.arg_type)))
        .collect()
}

/// Number of one-to-one matches between two argument lists under `eq`.
fn matched_args(pred: &[&EvalArg], gold: &[&EvalArg], eq: impl Fn(&EvalArg, &EvalArg) -> bool) -> usize {
    let mut used = vec![false; gold.len()];
    let mut n = 0;
    for p in pred {
        if let Some(k) = (0..gold.len()).find(|&k| !used[k] && eq(p, gold[k])) {
            used[k] = true;
            n += 1;
        }
    }
    n
}

fn same_unit(a: &EvalArg, b: &EvalArg) -> bool {
    a.start == b.start && a.end == b.end && a.arg_type == b.arg_type
}

fn same_grounded(a: &EvalArg, b: &EvalArg) -> bool {
    same_unit(a, b) && a.object == b.object
}

/// One-to-one alignment of predicted and gold tasks with identical span and
/// type, preferring pairs that share more arguments.
fn align_tasks(pred: &[EvalTask], gold: &[EvalTask]) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (k, g) in gold.iter().enumerate() {
            if p.start == g.start && p.end == g.end && p.task_type == g.task_type {
                let overlap = matched_args(&dedup_args(&p.args), &dedup_args(&g.args), same_unit);
                candidates.push((overlap, i, k));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut pairs = Vec::new();
    for (_, i, k) in candidates {
        if !pred_used[i] && !gold_used[k] {
            pred_used[i] = true;
            gold_used[k] = true;
            pairs.push((i, k));
        }
    }
    pairs.sort();
    pairs
}

/// Confusion pairs for two unit lists: exact matches, then span-only
/// matches, then leftovers against `None`.
fn confusion_pairs<T>(
    pred: &[T],
    gold: &[T],
    span: impl Fn(&T) -> (usize, usize),
    label: impl Fn(&T) -> &str,
    out: &mut Vec<(Option<String>, Option<String>)>,
) {
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    for exact in [true, false] {
        for (i, p) in pred.iter().enumerate() {
            if pred_used[i] {
                continue;
            }
            let hit = (0..gold.len()).find(|&k| {
                !gold_used[k] && span(&gold[k]) == span(p) && (!exact || label(&gold[k]) == label(p))
            });
            if let Some(k) = hit {
                pred_used[i] = true;
                gold_used[k] = true;
                out.push((Some(label(&gold[k]).to_string()), Some(label(p).to_string())));
            }
        }
    }
    for (i, p) in pred.iter().enumerate() {
        if !pred_used[i] {
            out.push((None, Some(label(p).to_string())));
        }
    }
    for (k, g) in gold.iter().enumerate() {
        if !gold_used[k] {
            out.push((Some(label(g).to_string()), None));
        }
    }
}

#[derive(Default)]
struct TypeCounts {
    correct: usize,
    predicted: usize,
    gold: usize,
}

fn type_rows(counts: BTreeMap<String, TypeCounts>) -> Vec<TypeRow> {
    counts
        .into_iter()
        .filter(|(_, c)| c.predicted + c.gold > 0)
        .map(|(label, c)| TypeRow {
            label,
            scores: Prf::from_counts(c.correct, c.predicted, c.gold),
        })
        .collect()
}

pub fn score(predictions: &[EvalInstance], golds: &[EvalInstance]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let (mut t_ok, mut t_pred, mut t_gold) = (0, 0, 0);
    let (mut a_ok, mut ag_ok, mut a_pred, mut a_gold) = (0, 0, 0, 0);
    let mut task_types: BTreeMap<String, TypeCounts> = BTreeMap::new();
    let mut arg_types: BTreeMap<String, TypeCounts> = BTreeMap::new();
    let mut task_pairs = Vec::new();
    let mut arg_pairs = Vec::new();

    for (pred, gold) in predictions.iter().zip(golds) {
        let pairs = align_tasks(&pred.tasks, &gold.tasks);
        t_pred += pred.tasks.len();
        t_gold += gold.tasks.len();
        t_ok += pairs.len();
        for t in &pred.tasks {
            task_types.entry(t.task_type.clone()).or_default().predicted += 1;
        }
        for t in &gold.tasks {
            task_types.entry(t.task_type.clone()).or_default().gold += 1;
        }
        for &(i, _) in &pairs {
            task_types.get_mut(&pred.tasks[i].task_type).unwrap().correct += 1;
        }
        confusion_pairs(&pred.tasks, &gold.tasks, |t| (t.start, t.end), |t| &t.task_type, &mut task_pairs);

        let pred_args: Vec<Vec<&EvalArg>> = pred.tasks.iter().map(|t| dedup_args(&t.args)).collect();
        let gold_args: Vec<Vec<&EvalArg>> = gold.tasks.iter().map(|t| dedup_args(&t.args)).collect();
        for args in &pred_args {
            a_pred += args.len();
            for a in args {
                arg_types.entry(a.arg_type.clone()).or_default().predicted += 1;
            }
        }
        for args in &gold_args {
            a_gold += args.len();
            for a in args {
                arg_types.entry(a.arg_type.clone()).or_default().gold += 1;
            }
        }
        let mut pred_aligned = vec![false; pred.tasks.len()];
        let mut gold_aligned = vec![false; gold.tasks.len()];
        for &(i, k) in &pairs {
            pred_aligned[i] = true;
            gold_aligned[k] = true;
            let (p, g) = (&pred_args[i], &gold_args[k]);
            a_ok += matched_args(p, g, same_unit);
            ag_ok += matched_args(p, g, same_grounded);
            let mut used = vec![false; g.len()];
            for a in p {
                if let Some(x) = (0..g.len()).find(|&x| !used[x] && same_unit(a, g[x])) {
                    used[x] = true;
                    arg_types.get_mut(&a.arg_type).unwrap().correct += 1;
                }
            }
            confusion_pairs(p, g, |a| (a.start, a.end), |a| &a.arg_type, &mut arg_pairs);
        }
        for (args, _) in pred_args.iter().zip(&pred_aligned).filter(|(_, &a)| !a) {
            arg_pairs.extend(args.iter().map(|a| (None, Some(a.arg_type.clone()))));
        }
        for (args, _) in gold_args.iter().zip(&gold_aligned).filter(|(_, &a)| !a) {
            arg_pairs.extend(args.iter().map(|a| (Some(a.arg_type.clone()), None)));
        }
    }

    let tasks = Prf::from_counts(t_ok, t_pred, t_gold);
    let args = Prf::from_counts(a_ok, a_pred, a_gold);
    let args_grounded = Prf::from_counts(ag_ok, a_pred, a_gold);
    Ok(EvalReport {
        instances: golds.len(),
        combined: Prf::pooled(&tasks, &args),
        combined_grounded: Prf::pooled(&tasks, &args_grounded),
        tasks,
        args,
        args_grounded,
        task_types: type_rows(task_types),
        arg_types: type_rows(arg_types),
        task_confusion: ConfusionMatrix::from_pairs(&task_pairs),
        arg_confusion: ConfusionMatrix::from_pairs(&arg_pairs),
    })
}

/// Per-type tables only.
pub fn per_type_report(predictions: &[EvalInstance], golds: &[EvalInstance]) -> Result<(Vec<TypeRow>, Vec<TypeRow>)> {
    let report = score(predictions, golds)?;
    Ok((report.task_types, report.arg_types))
}

fn prf_line(out: &mut String, name: &str, p: &Prf) {
    let _ = writeln!(
        out,
        "{name:<28} {:>6.3} {:>6.3} {:>6.3} {:>7} {:>7} {:>7}",
        p.precision, p.recall, p.f1, p.correct, p.predicted, p.gold
    );
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = format!(
            "{:<28} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}\n",
            "", "P", "R", "F1", "correct", "pred", "gold"
        );
        let _ = writeln!(out, "instructions: {}", self.instances);
        out.push_str(&header);
        prf_line(&mut out, "tasks", &self.tasks);
        prf_line(&mut out, "arguments", &self.args);
        prf_line(&mut out, "arguments (grounded)", &self.args_grounded);
        prf_line(&mut out, "combined", &self.combined);
        prf_line(&mut out, "combined (grounded)", &self.combined_grounded);
        for (title, rows) in [("task type", &self.task_types), ("argument type", &self.arg_types)] {
            let _ = writeln!(out, "\n{title}");
            out.push_str(&header);
            for row in rows {
                prf_line(&mut out, &row.label, &row.scores);
            }
        }
        for (title, m) in [("task confusion", &self.task_confusion), ("argument confusion", &self.arg_confusion)] {
            let _ = writeln!(out, "\n{title} (rows gold, columns predicted)");
            let _ = write!(out, "{:<24}", "");
            for l in &m.labels {
                let _ = write!(out, " {:>5}", abbreviate(l));
            }
            out.push('\n');
            for (l, row) in m.labels.iter().zip(&m.counts) {
                let _ = write!(out, "{l:<24}");
                for c in row {
                    let _ = write!(out, " {c:>5}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }
}

fn abbreviate(label: &str) -> String {
    label.chars().take(5).collect()
}
