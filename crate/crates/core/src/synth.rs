//! Seeded generator of annotated instructions built from the task/argument
//! inventory: each instruction chains one to four templated clauses with
//! connectives, and gold spans, types and BIO tags follow from the slots.
//!
//! A fraction of multi-task instructions use constructions where arguments
//! (and sometimes the task phrase) are shared between tasks, including
//! co-referent pronouns annotated with their antecedent span.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedInstruction, ArgumentRecord, TaskRecord};

type Phrase = (&'static str, Option<&'static str>);

const SMALL: &[Phrase] = &[
    ("cup", Some("CUP")),
    ("red cup", Some("CUP")),
    ("bottle", Some("BOTTLE")),
    ("water bottle", Some("BOTTLE")),
    ("plate", Some("PLATE")),
    ("apple", Some("APPLE")),
    ("book", Some("BOOK")),
    ("knife", Some("KNIFE")),
    ("laptop", Some("LAPTOP")),
    ("red shirt", Some("SHIRT")),
];
const SURFACE: &[Phrase] = &[
    ("table", Some("TABLE")),
    ("wooden table", Some("TABLE")),
    ("dining table", Some("DINING_TABLE")),
    ("bedside table", Some("BEDSIDE_TABLE")),
    ("shelf", Some("SHELF")),
    ("sofa", Some("SOFA")),
    ("bed", Some("BED")),
];
const CONTAINER: &[Phrase] = &[
    ("fridge", Some("REFRIGERATOR")),
    ("refrigerator", Some("REFRIGERATOR")),
    ("cabinet", Some("CABINET")),
    ("drawer", Some("DRAWER")),
    ("trash can", Some("TRASH_CAN")),
];
const PORTAL: &[Phrase] = &[
    ("cabinet", Some("CABINET")),
    ("drawer", Some("DRAWER")),
    ("door", Some("DOOR")),
    ("fridge", Some("REFRIGERATOR")),
];
const DEVICE: &[Phrase] = &[
    ("television", Some("TELEVISION")),
    ("tv", Some("TELEVISION")),
    ("lamp", Some("LAMP")),
    ("laptop", Some("LAPTOP")),
];
const PERSON: &[Phrase] = &[("person", Some("PERSON")), ("man", Some("PERSON")), ("woman", Some("PERSON"))];
const ROOM: &[Phrase] = &[
    ("kitchen", None),
    ("bedroom", None),
    ("living room", None),
    ("bathroom", None),
];
const PLACE: &[Phrase] = &[
    ("window", Some("WINDOW")),
    ("door", Some("DOOR")),
    ("sofa", Some("SOFA")),
    ("table", Some("TABLE")),
    ("kitchen", None),
];
const PUSHABLE: &[Phrase] = &[("box", Some("BOX")), ("chair", None), ("book", Some("BOOK"))];
const FOOD: &[Phrase] = &[("apple", Some("APPLE")), ("green apple", Some("APPLE")), ("bread", None)];
const FLOORISH: &[Phrase] = &[("floor", Some("FLOOR")), ("table", Some("TABLE")), ("shelf", Some("SHELF"))];

fn pool(name: &str) -> &'static [Phrase] {
    match name {
        "small" => SMALL,
        "surface" => SURFACE,
        "container" => CONTAINER,
        "portal" => PORTAL,
        "device" => DEVICE,
        "person" => PERSON,
        "room" => ROOM,
        "place" => PLACE,
        "pushable" => PUSHABLE,
        "food" => FOOD,
        "floorish" => FLOORISH,
        other => panic!("unknown phrase pool `{other}`"),
    }
}

/// Clause templates. `[a|b]` marks the task phrase (alternatives separated
/// by `|`, words joined by `_`), `<role+role:filler>` an argument slot whose
/// filler is `@pool` or literal alternatives. Other words are fillers.
const TEMPLATES: &[(&str, &str)] = &[
    ("being_located", "the <theme:@small> [is] on the <source:@surface>"),
    ("being_in_category", "this [is] a <theme:@room> <category:with_green_curtains|with_a_big_window|with_white_walls>"),
    ("bringing", "[bring|fetch] <recipient:me|us> a <theme:@small> from the <source:@surface>"),
    ("changing_operational_state", "[turn|switch] <operational_state:on|off> the <device:@device>"),
    ("checking_state", "please [check] if the <theme:@device> is <desired_state:on|off>"),
    ("cutting", "[cut|slice] the <theme:@food> on the <source:@surface>"),
    ("following", "[follow] the <cotheme:@person> to the <goal:@room>"),
    ("giving", "<agent:robot> can you [pass|give|hand] <recipient:me|us> a <theme:@small>"),
    ("inspecting", "[look] <manner:down|up> on the <source:@floorish>"),
    ("motion", "[go|move|walk] near the <goal:@place>"),
    ("motion", "[go|walk] <degree:two_steps|a_little> <area:forward|closer> to the <goal:@place>"),
    ("opening", "[open] the <container_portal:@portal>"),
    ("picking", "[take|grab] the <theme:@small> from the <source:@surface>"),
    ("picking", "[pick_up] the <theme:@small> from the <cosource:@surface>"),
    ("placing", "[put|place] the <theme:@small> on the <goal:@surface>"),
    ("placing", "[keep|put] the <theme:@small> in the <goal+containing_object:@container>"),
    ("pushing", "can <agent:you> [push] the <theme:@pushable> on the <source:@surface>"),
    ("rotation", "<agent:robot> [turn|rotate] to <manner:your_left|your_right>"),
    ("rotation", "[rotate|turn] <degree:ninety_degrees|a_bit> towards the <cogoal:@place>"),
    ("searching", "[find|search_for] <recipient:me|us> the <theme:@small>"),
];

const CONNECTIVES: &[&str] = &["and", "then", "and then", ","];

#[derive(Debug, Default)]
struct Builder {
    tokens: Vec<String>,
    bio: Vec<String>,
    tasks: Vec<TaskRecord>,
}

impl Builder {
    fn words(&mut self, text: &str) -> (usize, usize) {
        let start = self.tokens.len();
        for w in text.split_whitespace() {
            self.tokens.push(w.to_string());
            self.bio.push("O".into());
        }
        (start, self.tokens.len() - 1)
    }

    fn object(&mut self, phrase: Phrase) -> (usize, usize) {
        let (s, e) = self.words(phrase.0);
        if let Some(class) = phrase.1 {
            self.bio[s] = format!("B-{class}");
            for t in &mut self.bio[s + 1..=e] {
                *t = format!("I-{class}");
            }
        }
        (s, e)
    }

    fn finish(mut self) -> AnnotatedInstruction {
        for task in &mut self.tasks {
            task.args.sort_by_key(|a| a.start);
        }
        self.tasks.sort_by_key(|t| t.start);
        AnnotatedInstruction {
            tokens: self.tokens,
            tasks: self.tasks,
            bio: self.bio,
            split: None,
        }
    }
}

fn choose_alt<R: Rng>(rng: &mut R, alts: &str) -> String {
    let options: Vec<&str> = alts.split('|').collect();
    options.choose(rng).unwrap().replace('_', " ")
}

/// Expands one template into `b`, returning the argument spans by role.
fn expand<R: Rng>(
    rng: &mut R,
    b: &mut Builder,
    task_type: &str,
    template: &str,
) -> BTreeMap<String, (usize, usize)> {
    let mut task = TaskRecord::new(0, 0, task_type);
    let mut roles = BTreeMap::new();
    for piece in template.split_whitespace() {
        if let Some(inner) = piece.strip_prefix('[').and_then(|p| p.strip_suffix(']')) {
            let (s, e) = b.words(&choose_alt(rng, inner));
            task.start = s;
            task.end = e;
        } else if let Some(inner) = piece.strip_prefix('<').and_then(|p| p.strip_suffix('>')) {
            let (role_spec, filler) = inner.split_once(':').expect("slot has a filler");
            let span = match filler.strip_prefix('@') {
                Some(name) => b.object(*pool(name).choose(rng).unwrap()),
                None => b.words(&choose_alt(rng, filler)),
            };
            for role in role_spec.split('+') {
                task.args.push(ArgumentRecord::new(span.0, span.1, role));
                roles.insert(role.to_string(), span);
            }
        } else {
            b.words(piece);
        }
    }
    b.tasks.push(task);
    roles
}

/// Counts kept while generating, for checking corpus statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorTallies {
    pub instructions: usize,
    pub single_task: usize,
    pub multi_task: usize,
    pub shared_argument: usize,
    pub task_types: BTreeMap<String, usize>,
}

impl GeneratorTallies {
    fn record(&mut self, inst: &AnnotatedInstruction, shared: bool) {
        self.instructions += 1;
        match inst.tasks.len() {
            0 => {}
            1 => self.single_task += 1,
            _ => self.multi_task += 1,
        }
        if shared {
            self.shared_argument += 1;
        }
        for t in &inst.tasks {
            *self.task_types.entry(t.task_type.clone()).or_default() += 1;
        }
    }
}

pub struct SyntheticGenerator {
    rng: ChaCha8Rng,
    tallies: GeneratorTallies,
}

impl SyntheticGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            tallies: GeneratorTallies::default(),
        }
    }

    pub fn tallies(&self) -> &GeneratorTallies {
        &self.tallies
    }

    fn connective(&mut self, b: &mut Builder) {
        let c = *CONNECTIVES.choose(&mut self.rng).unwrap();
        b.words(c);
    }

    fn clause(&mut self, b: &mut Builder, task_type: Option<&str>) {
        let candidates: Vec<&(&str, &str)> = match task_type {
            Some(t) => TEMPLATES.iter().filter(|(name, _)| *name == t).collect(),
            None => TEMPLATES.iter().collect(),
        };
        let &&(name, template) = candidates
            .choose(&mut self.rng)
            .unwrap_or_else(|| panic!("no template for task type {task_type:?}"));
        expand(&mut self.rng, b, name, template);
    }

    /// Take/grab something, then place "it": the placing theme is the
    /// antecedent's span.
    fn coreferent_place(&mut self, b: &mut Builder) {
        let roles = expand(
            &mut self.rng,
            b,
            "picking",
            "[take|grab|pick_up] the <theme:@small> from the <source:@surface>",
        );
        self.connective(b);
        let theme = roles["theme"];
        let mut inner = Builder {
            tokens: std::mem::take(&mut b.tokens),
            bio: std::mem::take(&mut b.bio),
            tasks: Vec::new(),
        };
        let template = if self.rng.gen_bool(0.5) {
            "[put|place] it on the <goal:@surface>"
        } else {
            "[keep|put] it in the <goal+containing_object:@container>"
        };
        expand(&mut self.rng, &mut inner, "placing", template);
        let mut placing = inner.tasks.pop().unwrap();
        placing.args.push(ArgumentRecord::new(theme.0, theme.1, "theme"));
        b.tokens = inner.tokens;
        b.bio = inner.bio;
        b.tasks.push(placing);
    }

    /// "pick up the X and the Y from the Z": two picking tasks sharing the
    /// task phrase and the source.
    fn coordinated_pick(&mut self, b: &mut Builder) {
        let verb = b.words(&choose_alt(&mut self.rng, "pick_up|take|grab"));
        b.words("the");
        let mut themes: Vec<Phrase> = SMALL.choose_multiple(&mut self.rng, 2).copied().collect();
        themes.sort_by_key(|p| p.0);
        let first = b.object(themes[0]);
        b.words("and the");
        let second = b.object(themes[1]);
        b.words("from the");
        let source = b.object(*SURFACE.choose(&mut self.rng).unwrap());
        for theme in [first, second] {
            b.tasks.push(
                TaskRecord::new(verb.0, verb.1, "picking")
                    .with_arg(theme.0, theme.1, "theme")
                    .with_arg(source.0, source.1, "source"),
            );
        }
    }

    /// Locate, pick and place one object in a single instruction.
    fn located_pick_place(&mut self, b: &mut Builder) {
        b.words("the");
        let theme = b.object(*SMALL.choose(&mut self.rng).unwrap());
        let is = b.words("is");
        b.words("on the");
        let source = b.object(*SURFACE.choose(&mut self.rng).unwrap());
        b.words(&choose_alt(&mut self.rng, "please|so|,"));
        let pick = b.words(&choose_alt(&mut self.rng, "pick|take"));
        b.words("it up and");
        let place = b.words(&choose_alt(&mut self.rng, "keep|put"));
        b.words("it in the");
        let goal = b.object(*CONTAINER.choose(&mut self.rng).unwrap());
        b.tasks.push(
            TaskRecord::new(is.0, is.1, "being_located")
                .with_arg(theme.0, theme.1, "theme")
                .with_arg(source.0, source.1, "source"),
        );
        b.tasks.push(
            TaskRecord::new(pick.0, pick.1, "picking")
                .with_arg(theme.0, theme.1, "theme")
                .with_arg(source.0, source.1, "source"),
        );
        b.tasks.push(
            TaskRecord::new(place.0, place.1, "placing")
                .with_arg(theme.0, theme.1, "theme")
                .with_arg(goal.0, goal.1, "goal")
                .with_arg(goal.0, goal.1, "containing_object"),
        );
    }

    fn shared_construction(&mut self, b: &mut Builder) -> usize {
        match self.rng.gen_range(0..3) {
            0 => {
                self.coreferent_place(b);
                2
            }
            1 => {
                self.coordinated_pick(b);
                2
            }
            _ => {
                self.located_pick_place(b);
                3
            }
        }
    }

    /// One instruction with a random number of clauses.
    pub fn instruction(&mut self) -> AnnotatedInstruction {
        let n_tasks = *[1, 1, 1, 2, 2, 3, 4].choose(&mut self.rng).unwrap();
        let mut b = Builder::default();
        let mut shared = false;
        let mut emitted = 0;
        if n_tasks >= 2 && self.rng.gen_bool(0.35) {
            emitted += self.shared_construction(&mut b);
            shared = true;
        }
        while emitted < n_tasks {
            if !b.tokens.is_empty() {
                self.connective(&mut b);
            }
            self.clause(&mut b, None);
            emitted += 1;
        }
        let inst = b.finish();
        self.tallies.record(&inst, shared);
        inst
    }

    /// One instruction whose clauses have exactly the given task types, in
    /// order.
    pub fn instruction_with_tasks(&mut self, task_types: &[&str]) -> AnnotatedInstruction {
        let mut b = Builder::default();
        for t in task_types {
            if !b.tokens.is_empty() {
                self.connective(&mut b);
            }
            self.clause(&mut b, Some(t));
        }
        let inst = b.finish();
        self.tallies.record(&inst, false);
        inst
    }

    pub fn generate(&mut self, size: usize) -> Vec<AnnotatedInstruction> {
        (0..size).map(|_| self.instruction()).collect()
    }
}

/// `size` instructions from a generator seeded with `seed`.
pub fn generate_synthetic_corpus(seed: u64, size: usize) -> Vec<AnnotatedInstruction> {
    SyntheticGenerator::new(seed).generate(size)
}

/// Task types the templates can produce.
pub fn template_task_types() -> Vec<&'static str> {
    let mut out: Vec<&str> = TEMPLATES.iter().map(|(t, _)| *t).collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_stats, serialize_corpus, validate_instruction};
    use crate::vocab::{BioTag, LabelVocabularies};

    #[test]
    fn bringing_template_matches_inventory_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::default();
        expand(
            &mut rng,
            &mut b,
            "bringing",
            "[bring] <recipient:me> a <theme:cup> from the <source:table>",
        );
        let inst = b.finish();
        assert_eq!(inst.text(), "bring me a cup from the table");
        let task = &inst.tasks[0];
        assert_eq!((task.start, task.end, task.task_type.as_str()), (0, 0, "bringing"));
        let args: Vec<(String, String)> = task
            .args
            .iter()
            .map(|a| (a.arg_type.clone(), inst.span_text(a.start, a.end)))
            .collect();
        assert_eq!(
            args,
            vec![
                ("recipient".to_string(), "me".to_string()),
                ("theme".to_string(), "cup".to_string()),
                ("source".to_string(), "table".to_string()),
            ]
        );
    }

    #[test]
    fn zero_size_is_empty() {
        assert!(generate_synthetic_corpus(3, 0).is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serialize_corpus(&generate_synthetic_corpus(11, 40));
        let b = serialize_corpus(&generate_synthetic_corpus(11, 40));
        assert_eq!(a, b);
        assert_ne!(a, serialize_corpus(&generate_synthetic_corpus(12, 40)));
    }

    #[test]
    fn generated_instructions_are_valid() {
        let v = LabelVocabularies::default();
        for inst in generate_synthetic_corpus(5, 300) {
            assert_eq!(validate_instruction(&inst, Some(&v)), vec![], "{}", inst.text());
            assert!((1..=4).contains(&inst.tasks.len()));
        }
    }

    #[test]
    fn every_template_task_type_is_in_vocabulary() {
        let v = LabelVocabularies::default();
        assert_eq!(template_task_types().len(), 16);
        for t in template_task_types() {
            assert!(v.tasks().get(t).is_some(), "{t}");
        }
    }

    #[test]
    fn task_order_is_stable_under_sort() {
        for inst in generate_synthetic_corpus(8, 200) {
            let mut sorted = inst.tasks.clone();
            sorted.sort_by_key(|t| t.start);
            assert_eq!(sorted, inst.tasks);
        }
    }

    #[test]
    fn object_argument_spans_carry_single_class() {
        for inst in generate_synthetic_corpus(9, 200) {
            for arg in inst.tasks.iter().flat_map(|t| &t.args) {
                let tags: Vec<BioTag> = inst.bio[arg.start..=arg.end]
                    .iter()
                    .map(|t| BioTag::parse(t).unwrap())
                    .collect();
                if tags.iter().all(|t| *t == BioTag::Outside) {
                    continue;
                }
                assert!(matches!(tags[0], BioTag::Begin(_)), "{}", inst.text());
                let class = tags[0].class();
                for t in &tags[1..] {
                    assert_eq!(*t, BioTag::Inside(class.unwrap()), "{}", inst.text());
                }
            }
        }
    }

    #[test]
    fn shared_arguments_in_at_least_ten_percent_of_multi_task() {
        let mut g = SyntheticGenerator::new(21);
        let corpus = g.generate(400);
        let multi: Vec<_> = corpus.iter().filter(|i| i.tasks.len() > 1).collect();
        let shared = multi
            .iter()
            .filter(|inst| {
                let mut owners: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
                for (j, t) in inst.tasks.iter().enumerate() {
                    for a in &t.args {
                        owners.entry((a.start, a.end)).or_default().push(j);
                    }
                }
                owners.values().any(|js| js.iter().any(|&j| j != js[0]))
            })
            .count();
        assert!(shared * 10 >= multi.len(), "{shared} of {}", multi.len());
        assert_eq!(g.tallies().multi_task, multi.len());
    }

    #[test]
    fn tallies_match_corpus_stats() {
        let mut g = SyntheticGenerator::new(4);
        let corpus = g.generate(10);
        let stats = corpus_stats(&corpus);
        let t = g.tallies();
        assert_eq!(stats.all.total, t.instructions);
        assert_eq!(stats.all.single_task, t.single_task);
        assert_eq!(stats.all.multi_task, t.multi_task);
        for (task, n) in &t.task_types {
            assert_eq!(stats.task_types[task]["all"], *n);
        }
    }

    #[test]
    fn planned_instruction_has_requested_types() {
        let mut g = SyntheticGenerator::new(1);
        let inst = g.instruction_with_tasks(&["motion", "picking", "placing"]);
        let types: Vec<&str> = inst.tasks.iter().map(|t| t.task_type.as_str()).collect();
        assert_eq!(types, vec!["motion", "picking", "placing"]);
    }
}
