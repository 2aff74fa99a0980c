//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key of the schema appears in [`ExperimentConfig::to_text`], which
//! is also the `config.echo` written into each run directory and parses
//! back to the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{R1Config, R2Config};
use crate::error::{Error, Result};
use crate::induce::{InductionConfig, WarmupConfig};
use crate::model::ModelConfig;
use crate::tasks::derive_seed;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "POSBIAS_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    Reasoning,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Retrieval => "retrieval",
            TaskKind::Reasoning => "reasoning",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(TaskKind::Retrieval),
            "reasoning" => Ok(TaskKind::Reasoning),
            _ => Err(Error::Config(format!("task must be retrieval or reasoning, got {s:?}"))),
        }
    }
}

/// Everything a command needs. Stage seeds are not settable: they derive
/// from `seed` so a run is reproducible from `(config, seed)` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub n_docs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_size: usize,
    pub eval_size: usize,
    pub induction_eval_size: usize,
    pub model: ModelConfig,
    pub warmup: WarmupConfig,
    pub induce: InductionConfig,
    /// Training records drawn from the front of the train split.
    pub records: usize,
    pub r1: R1Config,
    pub r2: R2Config,
    /// Teacher checkpoint for `distill` and `diagnose`; empty means the
    /// `induce-bias` output of this experiment.
    pub teacher: PathBuf,
    /// Gold positions evaluated on retrieval; empty means all of `1..=n`.
    pub eval_positions: Vec<usize>,
    /// Distractor-arrangement seeds; several give a mean/stddev summary.
    pub eval_seeds: Vec<u64>,
    pub diagnose_sample: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let out_root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        Self {
            task: TaskKind::Retrieval,
            n_docs: 20,
            seed: 1,
            out_dir: out_root.join("default"),
            train_size: 2000,
            eval_size: 200,
            induction_eval_size: 100,
            model: ModelConfig::default(),
            warmup: WarmupConfig::default(),
            induce: InductionConfig {
                eval_every: 25,
                ..Default::default()
            },
            records: 500,
            r1: R1Config::default(),
            r2: R2Config::default(),
            teacher: PathBuf::new(),
            eval_positions: Vec::new(),
            eval_seeds: vec![0],
            diagnose_sample: 60,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses a config file body over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "task" => self.task = value(key, raw)?,
            "n_docs" => self.n_docs = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "out_dir" => self.out_dir = PathBuf::from(raw),
            "train_size" => self.train_size = value(key, raw)?,
            "eval_size" => self.eval_size = value(key, raw)?,
            "induction_eval_size" => self.induction_eval_size = value(key, raw)?,
            "model.vocab_size" => self.model.vocab_size = value(key, raw)?,
            "model.d_model" => self.model.d_model = value(key, raw)?,
            "model.n_heads" => self.model.n_heads = value(key, raw)?,
            "model.n_layers" => self.model.n_layers = value(key, raw)?,
            "model.d_ff" => self.model.d_ff = value(key, raw)?,
            "model.max_seq_len" => self.model.max_seq_len = value(key, raw)?,
            "model.rope_base" => self.model.rope_base = value(key, raw)?,
            "warmup.max_steps" => self.warmup.max_steps = value(key, raw)?,
            "warmup.target_accuracy" => self.warmup.target_accuracy = value(key, raw)?,
            "warmup.min_len" => self.warmup.min_len = value(key, raw)?,
            "warmup.max_len" => self.warmup.max_len = value(key, raw)?,
            "warmup.batch_size" => self.warmup.batch_size = value(key, raw)?,
            "warmup.learning_rate" => self.warmup.learning_rate = value(key, raw)?,
            "warmup.eval_every" => self.warmup.eval_every = value(key, raw)?,
            "induce.p_sink" => self.induce.p_sink = value(key, raw)?,
            "induce.threshold" => self.induce.threshold = value(key, raw)?,
            "induce.max_steps" => self.induce.max_steps = value(key, raw)?,
            "induce.min_steps" => self.induce.min_steps = value(key, raw)?,
            "induce.other_floor" => self.induce.other_floor = value(key, raw)?,
            "induce.batch_size" => self.induce.batch_size = value(key, raw)?,
            "induce.learning_rate" => self.induce.learning_rate = value(key, raw)?,
            "induce.eval_every" => self.induce.eval_every = value(key, raw)?,
            "records" => self.records = value(key, raw)?,
            "r1.k" => self.r1.k = value(key, raw)?,
            "r1.lambda" => self.r1.lambda = value(key, raw)?,
            "r1.epochs" => self.r1.epochs = value(key, raw)?,
            "r1.batch_size" => self.r1.batch_size = value(key, raw)?,
            "r1.learning_rate" => self.r1.learning_rate = value(key, raw)?,
            "r1.use_align" => self.r1.use_align = value(key, raw)?,
            "r1.use_anchor" => self.r1.use_anchor = value(key, raw)?,
            "r1.max_new_tokens" => self.r1.max_new_tokens = value(key, raw)?,
            "r2.k" => self.r2.k = value(key, raw)?,
            "r2.epochs" => self.r2.epochs = value(key, raw)?,
            "r2.batch_size" => self.r2.batch_size = value(key, raw)?,
            "r2.learning_rate" => self.r2.learning_rate = value(key, raw)?,
            "r2.filter_invalid" => self.r2.filter_invalid = value(key, raw)?,
            "r2.max_new_tokens" => self.r2.max_new_tokens = value(key, raw)?,
            "teacher" => self.teacher = PathBuf::from(raw),
            "eval.positions" => self.eval_positions = list(key, raw)?,
            "eval.seeds" => self.eval_seeds = list(key, raw)?,
            "diagnose.sample" => self.diagnose_sample = value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order; later ones win.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every schema key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |x: &Path| x.display().to_string();
        vec![
            ("task", self.task.name().to_string()),
            ("n_docs", self.n_docs.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", p(&self.out_dir)),
            ("train_size", self.train_size.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("induction_eval_size", self.induction_eval_size.to_string()),
            ("model.vocab_size", self.model.vocab_size.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.n_heads", self.model.n_heads.to_string()),
            ("model.n_layers", self.model.n_layers.to_string()),
            ("model.d_ff", self.model.d_ff.to_string()),
            ("model.max_seq_len", self.model.max_seq_len.to_string()),
            ("model.rope_base", self.model.rope_base.to_string()),
            ("warmup.max_steps", self.warmup.max_steps.to_string()),
            ("warmup.target_accuracy", self.warmup.target_accuracy.to_string()),
            ("warmup.min_len", self.warmup.min_len.to_string()),
            ("warmup.max_len", self.warmup.max_len.to_string()),
            ("warmup.batch_size", self.warmup.batch_size.to_string()),
            ("warmup.learning_rate", self.warmup.learning_rate.to_string()),
            ("warmup.eval_every", self.warmup.eval_every.to_string()),
            ("induce.p_sink", self.induce.p_sink.to_string()),
            ("induce.threshold", self.induce.threshold.to_string()),
            ("induce.max_steps", self.induce.max_steps.to_string()),
            ("induce.min_steps", self.induce.min_steps.to_string()),
            ("induce.other_floor", self.induce.other_floor.to_string()),
            ("induce.batch_size", self.induce.batch_size.to_string()),
            ("induce.learning_rate", self.induce.learning_rate.to_string()),
            ("induce.eval_every", self.induce.eval_every.to_string()),
            ("records", self.records.to_string()),
            ("r1.k", self.r1.k.to_string()),
            ("r1.lambda", self.r1.lambda.to_string()),
            ("r1.epochs", self.r1.epochs.to_string()),
            ("r1.batch_size", self.r1.batch_size.to_string()),
            ("r1.learning_rate", self.r1.learning_rate.to_string()),
            ("r1.use_align", self.r1.use_align.to_string()),
            ("r1.use_anchor", self.r1.use_anchor.to_string()),
            ("r1.max_new_tokens", self.r1.max_new_tokens.to_string()),
            ("r2.k", self.r2.k.to_string()),
            ("r2.epochs", self.r2.epochs.to_string()),
            ("r2.batch_size", self.r2.batch_size.to_string()),
            ("r2.learning_rate", self.r2.learning_rate.to_string()),
            ("r2.filter_invalid", self.r2.filter_invalid.to_string()),
            ("r2.max_new_tokens", self.r2.max_new_tokens.to_string()),
            ("teacher", p(&self.teacher)),
            ("eval.positions", join(&self.eval_positions)),
            ("eval.seeds", join(&self.eval_seeds)),
            ("diagnose.sample", self.diagnose_sample.to_string()),
        ]
    }

    /// Canonical file form; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_docs < 2 {
            return Err(Error::Config(format!("n_docs {} must be at least 2", self.n_docs)));
        }
        if self.train_size == 0 || self.eval_size == 0 || self.induction_eval_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.records == 0 || self.records > self.train_size {
            return Err(Error::Config(format!(
                "records {} must lie in 1..={}",
                self.records, self.train_size
            )));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.seeds must name at least one seed".into()));
        }
        if let Some(&p) = self.eval_positions.iter().find(|&&p| p == 0 || p > self.n_docs) {
            return Err(Error::Config(format!("eval position {p} outside 1..={}", self.n_docs)));
        }
        self.model.validate()?;
        self.warmup.validate()?;
        self.induce.validate()?;
        self.r1.validate()?;
        self.r2.validate()
    }

    /// Stage seed derived from the root seed and a fixed stage tag.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(&[self.seed, stage as u64])
    }

    /// Model, warm-up and induction settings with their derived seeds.
    pub fn seeded_warmup(&self) -> WarmupConfig {
        WarmupConfig {
            seed: self.stage_seed(Stage::Warmup),
            ..self.warmup.clone()
        }
    }

    pub fn seeded_induce(&self) -> InductionConfig {
        InductionConfig {
            seed: self.stage_seed(Stage::Induce),
            ..self.induce.clone()
        }
    }

    pub fn seeded_r1(&self) -> R1Config {
        R1Config {
            seed: self.stage_seed(Stage::Distill),
            ..self.r1.clone()
        }
    }

    pub fn seeded_r2(&self) -> R2Config {
        R2Config {
            seed: self.stage_seed(Stage::Distill),
            ..self.r2.clone()
        }
    }

    /// Retrieval positions to evaluate.
    pub fn positions(&self) -> Vec<usize> {
        if self.eval_positions.is_empty() {
            (1..=self.n_docs).collect()
        } else {
            self.eval_positions.clone()
        }
    }

    pub fn teacher_path(&self) -> PathBuf {
        if self.teacher.as_os_str().is_empty() {
            self.out_dir.join("induce-bias").join("checkpoints").join("teacher.ckpt")
        } else {
            self.teacher.clone()
        }
    }
}

/// Tags separating the random streams of each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init = 0x10,
    Warmup = 0x11,
    Induce = 0x12,
    Distill = 0x13,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["task=reasoning", "eval.positions=1,5,10", "r1.lambda=0.5", "eval.seeds=3,4"])
            .unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.eval_positions, vec![1, 5, 10]);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let cfg = ExperimentConfig::default();
        let mut other = ExperimentConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let cfg = ExperimentConfig::parse("# run\n\nseed = 7 # root\nrecords=20\n").unwrap();
        assert_eq!((cfg.seed, cfg.records), (7, 20));
        assert!(matches!(ExperimentConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("task = poetry"), Err(Error::Config(_))));
    }

    #[test]
    fn later_overrides_win() {
        let mut cfg = ExperimentConfig::parse("seed = 3").unwrap();
        cfg.apply_overrides(&["seed=4", "seed=5"]).unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = ExperimentConfig::default();
        let seeds = [Stage::Init, Stage::Warmup, Stage::Induce, Stage::Distill].map(|s| cfg.stage_seed(s));
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.records = cfg.train_size + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.eval_positions = vec![0];
        assert!(cfg.validate().is_err());
    }
}
