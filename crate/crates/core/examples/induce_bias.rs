//! Pre-trains a teacher that reads the first document slot, stopping once
//! slot 1 is solved and a random other slot is solved at least 10% of the
//! time, then measures the positional gap over 8 slots.
//!
//! cargo run --release --example induce_bias

use posbias::eval::positional_accuracy;
use posbias::induce::{pretrain_teacher, InductionConfig, WarmupConfig};
use posbias::model::{ModelConfig, ModelParams};
use posbias::tasks::{derive_seed, make_retrieval_instance, Instance, RetrievalInstance, TaskVocab};

const N_DOCS: usize = 8;
const SEED: u64 = 7;

fn split(vocab: &TaskVocab, ids: std::ops::Range<u64>) -> posbias::Result<Vec<RetrievalInstance>> {
    ids.map(|id| make_retrieval_instance(id, N_DOCS, derive_seed(&[SEED, id]), vocab)).collect()
}

fn main() -> posbias::Result<()> {
    let vocab = TaskVocab::new(64)?;
    let train: Vec<Instance> = split(&vocab, 0..400)?.into_iter().map(Instance::Retrieval).collect();
    let probe: Vec<Instance> = split(&vocab, 400..440)?.into_iter().map(Instance::Retrieval).collect();
    let held_out = split(&vocab, 440..540)?;

    let init = ModelParams::init(&ModelConfig::default(), SEED)?;
    let warmup = WarmupConfig { seed: SEED, ..Default::default() };
    let induce = InductionConfig {
        p_sink: 0.9,
        eval_every: 25,
        other_floor: 0.1,
        seed: SEED,
        ..Default::default()
    };
    let (teacher, warm, history) = pretrain_teacher(&init, &vocab, &warmup, &induce, &train, &probe)?;
    println!("copy warm-up: {} steps, reached target {}", warm.steps, warm.reached_target);
    for p in &history.points {
        println!(
            "  step {:>4}: slot-1 accuracy {:.3}, random other slot {:.3}",
            p.step,
            p.favoured_accuracy,
            p.other_accuracy.unwrap_or(f64::NAN)
        );
    }

    let report = positional_accuracy(&teacher, &held_out, &(1..=N_DOCS).collect::<Vec<_>>(), 0)?;
    for (pos, acc) in report.positions.iter().zip(&report.accuracy) {
        println!("  gold at {pos:?}: {acc:.3}");
    }
    println!("GAP {:.3} (first minus min {:.3})", report.gap, report.gap_first_minus_min);
    Ok(())
}
