//! Trains on a small synthetic corpus and reports per-epoch progress.
//!
//! `cargo run --release --example overfit -- [preset] [epochs] [size] [lr]`

use std::time::Instant;

use tage_core::encoder::{EncoderConfig, EncoderPreset};
use tage_core::synth::generate_synthetic_corpus;
use tage_core::train::{train, TrainOptions, TrainingConfig};
use tage_core::vocab::LabelVocabularies;

fn main() -> tage_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let preset = EncoderPreset::parse(&arg(0, "mini"))?;
    let epochs: usize = arg(1, "200").parse().expect("epochs");
    let size: usize = arg(2, "32").parse().expect("size");
    let lr: f64 = arg(3, "1e-4").parse().expect("learning rate");

    let corpus = generate_synthetic_corpus(7, size);
    let config = TrainingConfig {
        encoder: EncoderConfig { preset, ..Default::default() },
        max_epochs: epochs,
        patience: epochs,
        learning_rate: lr,
        target_f1: Some(0.95),
        ..Default::default()
    };
    let started = Instant::now();
    let log = std::env::temp_dir().join("overfit-log.jsonl");
    let out = train(
        &config,
        LabelVocabularies::default(),
        &corpus,
        &corpus,
        &TrainOptions { log_path: Some(log.clone()), checkpoint_path: None },
    )?;
    for r in &out.history {
        println!(
            "epoch {:>3} loss {:>8.4} (t {:.3} a {:.3} g {:.3}) F1 {:.3} / {:.3} {:.1}s",
            r.epoch, r.train.total, r.train.task, r.train.arg, r.train.grounding,
            r.dev.combined_f1, r.dev.combined_grounded_f1, r.seconds
        );
    }
    println!("stop {:?} after {:.1}s", out.stop, started.elapsed().as_secs_f64());
    Ok(())
}
