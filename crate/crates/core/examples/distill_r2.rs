//! Two-hop reasoning: a teacher that chains facts placed at the last two
//! slots, then trajectory distillation into random hop placements.
//!
//! cargo run --release --example distill_r2

use posbias::distill::{sample_trajectories, train_r2, R2Config};
use posbias::eval::{reasoning_mode_eval, ReasoningReport};
use posbias::induce::{pretrain_teacher, InductionConfig, WarmupConfig};
use posbias::model::{ModelConfig, ModelParams};
use posbias::tasks::{derive_seed, make_reasoning_instance, Instance, ReasoningInstance, TaskVocab};

const N_DOCS: usize = 10;
const SEED: u64 = 3;

fn split(vocab: &TaskVocab, ids: std::ops::Range<u64>) -> posbias::Result<Vec<ReasoningInstance>> {
    ids.map(|id| make_reasoning_instance(id, N_DOCS, derive_seed(&[SEED, id]), vocab)).collect()
}

fn show(name: &str, r: &ReasoningReport) {
    println!("{name}: cross-mode gap {:.3}, grid avg {:.3}", r.cross_mode_gap, r.avg);
    for m in &r.modes {
        println!("  {:<12} {:?}", m.mode.name(), m.report.accuracy);
    }
}

fn main() -> posbias::Result<()> {
    let vocab = TaskVocab::new(64)?;
    let pretrain = split(&vocab, 0..600)?;
    let probe = split(&vocab, 600..640)?;
    let held_out = split(&vocab, 640..700)?;

    let x = &held_out[0];
    println!("trajectory at ({}, {}): {:?}", N_DOCS - 1, N_DOCS, x.gold_trajectory());

    let init = ModelParams::init(&ModelConfig::default(), SEED)?;
    let (teacher, _, history) = pretrain_teacher(
        &init,
        &vocab,
        &WarmupConfig { seed: SEED, ..Default::default() },
        &InductionConfig {
            eval_every: 25,
            other_floor: 0.5,
            seed: SEED,
            ..Default::default()
        },
        &pretrain.iter().cloned().map(Instance::Reasoning).collect::<Vec<_>>(),
        &probe.iter().cloned().map(Instance::Reasoning).collect::<Vec<_>>(),
    )?;
    println!("teacher trained for {} steps", history.steps);
    show("teacher", &reasoning_mode_eval(&teacher, &held_out, N_DOCS, 0)?);

    let cfg = R2Config { seed: SEED, ..Default::default() };
    let trajectories = sample_trajectories(&teacher, &pretrain[..300], cfg.k, cfg.seed, cfg.max_new_tokens)?;
    println!("{} trajectories, {} invalid", trajectories.records.len(), trajectories.invalid());
    let (student, _) = train_r2(&teacher, &teacher, &trajectories, &cfg, None)?;
    show("student", &reasoning_mode_eval(&student, &held_out, N_DOCS, 0)?);
    Ok(())
}
