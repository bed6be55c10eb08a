//! Hand-annotated instructions exercising the structural features of the
//! annotation scheme: shared arguments, shared task phrases and re-typed
//! spans.

use crate::corpus::{AnnotatedInstruction, TaskRecord};

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn tag(bio: &mut [String], start: usize, end: usize, class: &str) {
    bio[start] = format!("B-{class}");
    for t in &mut bio[start + 1..=end] {
        *t = format!("I-{class}");
    }
}

/// Locate, pick, place. The theme "red cup" is shared by all three tasks,
/// "dining table" (6..=7) is the source of the first two, and "fridge"
/// (15) is both goal and containing object of the placing task.
pub fn located_pick_place() -> AnnotatedInstruction {
    let tokens = tokens("the red cup is on the dining table please pick it up and keep in fridge");
    let mut bio = vec!["O".to_string(); tokens.len()];
    tag(&mut bio, 1, 2, "CUP");
    tag(&mut bio, 6, 7, "DINING_TABLE");
    tag(&mut bio, 15, 15, "REFRIGERATOR");
    AnnotatedInstruction {
        tokens,
        tasks: vec![
            TaskRecord::new(3, 3, "being_located")
                .with_arg(1, 2, "theme")
                .with_arg(6, 7, "source"),
            TaskRecord::new(9, 9, "picking")
                .with_arg(1, 2, "theme")
                .with_arg(6, 7, "source"),
            TaskRecord::new(13, 13, "placing")
                .with_arg(1, 2, "theme")
                .with_arg(15, 15, "goal")
                .with_arg(15, 15, "containing_object"),
        ],
        bio,
        split: None,
    }
}

/// One "pick up" phrase and one "wooden table" source shared by two picking
/// tasks with different themes.
pub fn shared_pick_up() -> AnnotatedInstruction {
    let tokens = tokens("pick up the cup and the plate from the wooden table");
    let mut bio = vec!["O".to_string(); tokens.len()];
    tag(&mut bio, 3, 3, "CUP");
    tag(&mut bio, 6, 6, "PLATE");
    tag(&mut bio, 9, 10, "TABLE");
    AnnotatedInstruction {
        tokens,
        tasks: vec![
            TaskRecord::new(0, 1, "picking")
                .with_arg(3, 3, "theme")
                .with_arg(9, 10, "source"),
            TaskRecord::new(0, 1, "picking")
                .with_arg(6, 6, "theme")
                .with_arg(9, 10, "source"),
        ],
        bio,
        split: None,
    }
}

/// "bring me a cup from the table"
pub fn bring_cup() -> AnnotatedInstruction {
    let tokens = tokens("bring me a cup from the table");
    let mut bio = vec!["O".to_string(); tokens.len()];
    tag(&mut bio, 3, 3, "CUP");
    tag(&mut bio, 6, 6, "TABLE");
    AnnotatedInstruction {
        tokens,
        tasks: vec![TaskRecord::new(0, 0, "bringing")
            .with_arg(1, 1, "recipient")
            .with_arg(3, 3, "theme")
            .with_arg(6, 6, "source")],
        bio,
        split: None,
    }
}

/// "go near the window"
pub fn go_near_window() -> AnnotatedInstruction {
    let tokens = tokens("go near the window");
    let mut bio = vec!["O".to_string(); tokens.len()];
    tag(&mut bio, 3, 3, "WINDOW");
    AnnotatedInstruction {
        tokens,
        tasks: vec![TaskRecord::new(0, 0, "motion").with_arg(3, 3, "goal")],
        bio,
        split: None,
    }
}

/// "look down on the floor"; the manner argument is not a physical object.
pub fn look_down() -> AnnotatedInstruction {
    let tokens = tokens("look down on the floor");
    let mut bio = vec!["O".to_string(); tokens.len()];
    tag(&mut bio, 4, 4, "FLOOR");
    AnnotatedInstruction {
        tokens,
        tasks: vec![TaskRecord::new(0, 0, "inspecting")
            .with_arg(1, 1, "manner")
            .with_arg(4, 4, "source")],
        bio,
        split: None,
    }
}
