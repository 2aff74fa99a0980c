//! Induces a slot-1 teacher on 8-document retrieval, then distills its
//! slot-1 behaviour into every other slot. Compares the full objective with
//! plain per-token KL and with sequence-level KD.
//!
//! cargo run --release --example distill_r1

use posbias::distill::{build_distill_records, train_r1, train_seqkd_baseline, R1Config};
use posbias::eval::{positional_accuracy, PositionReport};
use posbias::induce::{pretrain_teacher, InductionConfig, WarmupConfig};
use posbias::model::{checkpoint, ModelConfig, ModelParams};
use posbias::tasks::{derive_seed, make_retrieval_instance, GoldPositions, Instance, RetrievalInstance, TaskVocab};

const N_DOCS: usize = 8;
const SEED: u64 = 7;

fn split(vocab: &TaskVocab, ids: std::ops::Range<u64>) -> posbias::Result<Vec<RetrievalInstance>> {
    ids.map(|id| make_retrieval_instance(id, N_DOCS, derive_seed(&[SEED, id]), vocab)).collect()
}

fn show(name: &str, r: &PositionReport) {
    println!(
        "{name:<10} pos1 {:.3}  other slots {:.3}  GAP {:.3}  accuracy {:?}",
        r.at(1).unwrap_or(f64::NAN),
        r.mean_excluding(GoldPositions::Single(1)),
        r.gap,
        r.accuracy.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}

fn main() -> posbias::Result<()> {
    let vocab = TaskVocab::new(64)?;
    let pretrain = split(&vocab, 0..400)?;
    let probe = split(&vocab, 400..440)?;
    let held_out = split(&vocab, 440..540)?;
    let positions: Vec<usize> = (1..=N_DOCS).collect();

    let init = ModelParams::init(&ModelConfig::default(), SEED)?;
    let (teacher, _, _) = pretrain_teacher(
        &init,
        &vocab,
        &WarmupConfig { seed: SEED, ..Default::default() },
        &InductionConfig {
            eval_every: 25,
            other_floor: 0.1,
            seed: SEED,
            ..Default::default()
        },
        &pretrain.iter().cloned().map(Instance::Retrieval).collect::<Vec<_>>(),
        &probe.iter().cloned().map(Instance::Retrieval).collect::<Vec<_>>(),
    )?;
    let hash = checkpoint::content_hash(&teacher)?;
    show("teacher", &positional_accuracy(&teacher, &held_out, &positions, 0)?);

    let full = R1Config { seed: SEED, ..Default::default() };
    let records = build_distill_records(&teacher, &pretrain[..200], full.k, full.seed, full.max_new_tokens)?;
    println!("{} records, {} skipped", records.records.len(), records.skipped());

    let (student, history) = train_r1(&teacher, &teacher, &records, &full, None)?;
    for e in &history.epochs {
        println!("  epoch {}: loss {:.4} L_Act {:?} L_Anc {:?}", e.epoch, e.loss, e.l_act, e.l_anc);
    }
    show("full", &positional_accuracy(&student, &held_out, &positions, 0)?);

    let kl_only = R1Config {
        use_align: false,
        use_anchor: false,
        ..full.clone()
    };
    let (student, _) = train_r1(&teacher, &teacher, &records, &kl_only, None)?;
    show("kl-only", &positional_accuracy(&student, &held_out, &positions, 0)?);

    let (student, _) = train_seqkd_baseline(&teacher, &teacher, &records, &full, None)?;
    show("seqkd", &positional_accuracy(&student, &held_out, &positions, 0)?);

    assert_eq!(checkpoint::content_hash(&teacher)?, hash, "the teacher is read-only");
    Ok(())
}
