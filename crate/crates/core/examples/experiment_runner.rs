//! The command pipeline the `posbias` binary drives, run in-process on a
//! shrunken configuration: data, teacher, R1 student, evaluation,
//! diagnostics. Artifacts land under the directory given as the first
//! argument (default `runs/example`).
//!
//! cargo run --release --example experiment_runner -- /tmp/posbias-demo

use std::path::PathBuf;

use posbias::experiment::{cmd_diagnose, cmd_distill, cmd_eval, cmd_gen_data, cmd_induce_bias, ExperimentConfig, Variant};

const CONFIG: &str = "
task = retrieval
n_docs = 8
seed = 11
train_size = 300
eval_size = 40
induction_eval_size = 40
induce.eval_every = 25
records = 150
r1.epochs = 2
diagnose.sample = 20
";

fn main() -> posbias::Result<()> {
    let mut cfg = ExperimentConfig::parse(CONFIG)?;
    cfg.out_dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/example"), PathBuf::from);

    let manifest = cmd_gen_data(&cfg)?;
    println!("data: {:?}", manifest.splits.iter().map(|s| (&s.name, s.count)).collect::<Vec<_>>());

    let induced = cmd_induce_bias(&cfg)?;
    println!("teacher {} GAP {:.3}", &induced.history.teacher_hash[..12], induced.baseline.gap());

    let distilled = cmd_distill(&cfg, Variant::R1)?;
    println!("r1 student GAP {:.3}", distilled.report.gap());

    let student = distilled.run.checkpoint("student.ckpt");
    let (run, report) = cmd_eval(&cfg, &student)?;
    println!("re-evaluated GAP {:.3} -> {}", report.gap(), run.root.display());

    let (run, diagnosis) = cmd_diagnose(&cfg, &cfg.teacher_path())?;
    println!(
        "{} failing profiles, median concentration {:.1} -> {}",
        diagnosis.profiles.len(),
        diagnosis.median_concentration,
        run.root.display()
    );
    Ok(())
}
