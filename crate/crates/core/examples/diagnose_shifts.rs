//! Where does a slot-1 teacher go wrong at other slots? Per-token KL
//! between its slot-1 and failing-slot distributions along its own answer
//! is flat except for a spike at the token that depends on the gold slot.
//!
//! cargo run --release --example diagnose_shifts

use posbias::experiment::{median_concentration, shift_diagnosis};
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
    let pretrain: Vec<Instance> = split(&vocab, 0..400)?.into_iter().map(Instance::Retrieval).collect();
    let probe: Vec<Instance> = split(&vocab, 400..440)?.into_iter().map(Instance::Retrieval).collect();
    let held_out = split(&vocab, 440..500)?;

    let init = ModelParams::init(&ModelConfig::default(), SEED)?;
    let (teacher, _, _) = pretrain_teacher(
        &init,
        &vocab,
        &WarmupConfig { seed: SEED, ..Default::default() },
        &InductionConfig { eval_every: 25, seed: SEED, ..Default::default() },
        &pretrain,
        &probe,
    )?;

    let (sampled, profiles, self_max) = shift_diagnosis(&teacher, &held_out, held_out.len(), SEED)?;
    println!("{} of {sampled} instances fail at some slot; self-profile max {self_max:.1e}", profiles.len());
    for p in profiles.iter().take(8) {
        let values: Vec<String> = p.values.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "  instance {:>3} slot {}: [{}] spike at {} ({:.1}x median)",
            p.instance_id,
            p.trivial_position,
            values.join(", "),
            p.max_index,
            p.concentration()
        );
    }
    println!("median concentration {:.1}", median_concentration(&profiles));
    Ok(())
}
