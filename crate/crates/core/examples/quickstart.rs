//! Builds a retrieval instance, lays it out with the gold document at two
//! different slots, and scores an untrained model across every slot.
//!
//! cargo run --release --example quickstart

use posbias::eval::positional_accuracy;
use posbias::model::{greedy_decode, ModelConfig, ModelParams};
use posbias::tasks::{derive_seed, make_retrieval_instance, tokens, TaskVocab};

fn main() -> posbias::Result<()> {
    let vocab = TaskVocab::new(64)?;
    let x = make_retrieval_instance(0, 8, derive_seed(&[1, 0]), &vocab)?;
    println!("gold response {:?}", x.gold_response());
    for slot in [1, 5] {
        let layout = x.arrange(slot)?;
        println!("gold at slot {slot}: {:?}", layout.tokens);
    }

    let model = ModelParams::init(&ModelConfig::default(), 1)?;
    let decoded = greedy_decode(&model, &x.arrange(1)?.tokens, 4, tokens::EOS)?;
    println!("untrained model answers {:?}", decoded.tokens);

    let held_out: Vec<_> = (1..21)
        .map(|id| make_retrieval_instance(id, 8, derive_seed(&[1, id]), &vocab))
        .collect::<posbias::Result<_>>()?;
    let report = positional_accuracy(&model, &held_out, &(1..=8).collect::<Vec<_>>(), 0)?;
    print!("{}", report.to_csv());
    println!("avg {:.3} gap {:.3}", report.avg, report.gap);
    Ok(())
}
