//! Command-line driver over `posbias::experiment`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use posbias::experiment::{self, exit_code, ExperimentConfig, Variant};
use posbias::Result;

#[derive(Parser)]
#[command(name = "posbias", version, about = "Induce and distill away positional bias in a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set r1.lambda=0.5`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; wins over the file and `--set`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; wins over the file and `--set`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write JSONL train/eval splits and a manifest.
    GenData(Common),
    /// Pre-train the teacher with a skewed gold placement.
    InduceBias(Common),
    /// Train a student from the teacher checkpoint.
    Distill {
        /// r1, r2, sft or seqkd.
        variant: Variant,
        #[command(flatten)]
        common: Common,
    },
    /// Positional accuracy report for a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Token-shift profiles, perplexities and attention for a checkpoint
    /// (the teacher when omitted).
    Diagnose {
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let m = experiment::cmd_gen_data(&c.resolve()?)?;
            for s in &m.splits {
                println!("{}: {} instances", s.name, s.count);
            }
        }
        Command::InduceBias(c) => {
            let out = experiment::cmd_induce_bias(&c.resolve()?)?;
            println!(
                "teacher after {} warm-up and {} induction steps; held-out gap {:.3}; {}",
                out.history.warmup.steps,
                out.history.induction.steps,
                out.baseline.gap(),
                out.run.root.display()
            );
        }
        Command::Distill { variant, common } => {
            let out = experiment::cmd_distill(&common.resolve()?, variant)?;
            println!(
                "{} student after {} steps; held-out gap {:.3}; {}",
                variant.name(),
                out.history.training.steps,
                out.report.gap(),
                out.run.root.display()
            );
        }
        Command::Eval { checkpoint, common } => {
            let (run, report) = experiment::cmd_eval(&common.resolve()?, &checkpoint)?;
            println!("held-out gap {:.3}; {}", report.gap(), run.root.display());
        }
        Command::Diagnose { checkpoint, common } => {
            let cfg = common.resolve()?;
            let path = checkpoint.unwrap_or_else(|| cfg.teacher_path());
            let (run, d) = experiment::cmd_diagnose(&cfg, &path)?;
            println!(
                "{} failing of {} sampled; median max/median token KL {:.2}; {}",
                d.profiles.len(),
                d.sampled,
                d.median_concentration,
                run.root.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit_code::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code_for(&e) as u8)
        }
    }
}
