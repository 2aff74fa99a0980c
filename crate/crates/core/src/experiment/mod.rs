//! Seeded experiment commands behind the command-line driver.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/                 train.jsonl eval.jsonl induction_eval.jsonl manifest.json
//! <run>/config.echo     the exact configuration used
//! <run>/checkpoints/    model files
//! <run>/history.json    training history
//! <run>/reports/json/   reports
//! <run>/reports/csv/
//! ```
//!
//! `<run>` is `induce-bias`, `distill-<variant>`, `eval-<label>` or
//! `diagnose-<label>`. No artifact records wall-clock time, so every file is
//! a function of the configuration alone.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Stage, TaskKind, OUT_ENV};

use crate::distill::{
    build_distill_records, sample_trajectories, train_r1, train_r2, train_seqkd_baseline, train_sft_baseline,
    DistillRecord, TrainHistory,
};
use crate::error::{Error, Result};
use crate::eval::{
    attention_report, decode_budget, is_correct, median, positional_accuracy, reasoning_mode_eval, response_ppl,
    shift_values, summarize, token_shift_profile, AttentionPoint, MeanStd, PositionReport, ReasoningReport,
    SeedSummary, ShiftProfile,
};
use crate::induce::{pretrain_teacher, InductionHistory, WarmupHistory};
use crate::model::{checkpoint, greedy_decode, ModelParams};
use crate::tasks::dataset::{read_jsonl, reasoning_only, retrieval_only, write_jsonl};
use crate::tasks::{
    derive_seed, make_reasoning_instance, make_retrieval_instance, tokens, Instance, RetrievalInstance, TaskVocab,
};

/// Process exit codes of the driver.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const INDUCTION_FAILURE: i32 = 5;
}

/// Maps an error to its exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit_code::CONFIG,
        Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => exit_code::IO,
        Error::Divergence { .. } => exit_code::DIVERGENCE,
        Error::InductionFailure(_) => exit_code::INDUCTION_FAILURE,
        _ => exit_code::OTHER,
    }
}

/// Trainer selected by `distill`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    R1,
    R2,
    Sft,
    Seqkd,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::R1 => "r1",
            Variant::R2 => "r2",
            Variant::Sft => "sft",
            Variant::Seqkd => "seqkd",
        }
    }

    fn task(self) -> TaskKind {
        match self {
            Variant::R2 => TaskKind::Reasoning,
            _ => TaskKind::Retrieval,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(Variant::R1),
            "r2" => Ok(Variant::R2),
            "sft" => Ok(Variant::Sft),
            "seqkd" => Ok(Variant::Seqkd),
            _ => Err(Error::Config(format!("variant must be r1, r2, sft or seqkd, got {s:?}"))),
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// A command's output directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates `out_dir/name` and writes the config echo into it.
    pub fn create(cfg: &ExperimentConfig, name: &str) -> Result<Self> {
        let root = cfg.out_dir.join(name);
        create_dir(&root)?;
        write_file(&root.join("config.echo"), cfg.to_text())?;
        Ok(Self { root })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.json")
    }

    pub fn json(&self, name: &str) -> PathBuf {
        self.root.join("reports").join("json").join(format!("{name}.json"))
    }

    pub fn csv(&self, name: &str) -> PathBuf {
        self.root.join("reports").join("csv").join(format!("{name}.csv"))
    }

    /// Writes the last finite parameters and the message of a diverged run.
    fn record_divergence(&self, err: &Error) -> Result<()> {
        if let Error::Divergence { message, snapshot } = err {
            if let Some(p) = snapshot {
                checkpoint::save(p, &self.checkpoint("diverged.ckpt"))?;
            }
            write_json(&self.root.join("divergence.json"), &serde_json::json!({ "error": message }))?;
        }
        Ok(())
    }
}

/// Counts and seeds of the generated splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub n_docs: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub splits: Vec<SplitInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub count: usize,
    /// Instance ids are `first_id..first_id + count`.
    pub first_id: u64,
}

/// The three splits of an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Instance>,
    pub eval: Vec<Instance>,
    pub induction_eval: Vec<Instance>,
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

/// Instance `id` of the configured task, seeded by `(seed, id)`.
pub fn make_instance(cfg: &ExperimentConfig, vocab: &TaskVocab, id: u64) -> Result<Instance> {
    let seed = derive_seed(&[cfg.seed, id]);
    Ok(match cfg.task {
        TaskKind::Retrieval => Instance::Retrieval(make_retrieval_instance(id, cfg.n_docs, seed, vocab)?),
        TaskKind::Reasoning => Instance::Reasoning(make_reasoning_instance(id, cfg.n_docs, seed, vocab)?),
    })
}

/// Generates the splits in memory; ids run consecutively across splits so
/// they are disjoint.
pub fn generate_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    cfg.validate()?;
    let vocab = TaskVocab::new(cfg.model.vocab_size)?;
    let make = |first: usize, count: usize| -> Result<Vec<Instance>> {
        (first..first + count)
            .map(|id| make_instance(cfg, &vocab, id as u64))
            .collect()
    };
    Ok(Splits {
        train: make(0, cfg.train_size)?,
        eval: make(cfg.train_size, cfg.eval_size)?,
        induction_eval: make(cfg.train_size + cfg.eval_size, cfg.induction_eval_size)?,
    })
}

/// `gen-data`: writes the JSONL splits and a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    let splits = generate_splits(cfg)?;
    let dir = data_dir(cfg);
    create_dir(&dir)?;
    write_file(&dir.join("config.echo"), cfg.to_text())?;
    let mut infos = Vec::new();
    let mut first_id = 0u64;
    for (name, xs) in [
        ("train", &splits.train),
        ("eval", &splits.eval),
        ("induction_eval", &splits.induction_eval),
    ] {
        let file = format!("{name}.jsonl");
        write_jsonl(&dir.join(&file), xs)?;
        infos.push(SplitInfo {
            name: name.into(),
            file,
            count: xs.len(),
            first_id,
        });
        first_id += xs.len() as u64;
    }
    let manifest = Manifest {
        task: cfg.task,
        n_docs: cfg.n_docs,
        vocab_size: cfg.model.vocab_size,
        seed: cfg.seed,
        splits: infos,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads the splits written by `gen-data` and checks them against `cfg`.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let dir = data_dir(cfg);
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.task != cfg.task || manifest.n_docs != cfg.n_docs || manifest.seed != cfg.seed {
        return Err(Error::Config(format!(
            "dataset in {} was generated for task {} n_docs {} seed {}",
            dir.display(),
            manifest.task.name(),
            manifest.n_docs,
            manifest.seed
        )));
    }
    let read = |name: &str| read_jsonl(&dir.join(format!("{name}.jsonl")));
    Ok(Splits {
        train: read("train")?,
        eval: read("eval")?,
        induction_eval: read("induction_eval")?,
    })
}

/// Training record of `induce-bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InduceHistory {
    pub warmup: WarmupHistory,
    pub induction: InductionHistory,
    pub teacher_hash: String,
}

/// Held-out evaluation of either task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvalReport {
    Retrieval {
        reports: Vec<PositionReport>,
        #[serde(skip_serializing_if = "Option::is_none")]
        summary: Option<SeedSummary>,
    },
    Reasoning {
        reports: Vec<ReasoningReport>,
        #[serde(skip_serializing_if = "Option::is_none")]
        cross_mode_gap: Option<MeanStd>,
    },
}

impl EvalReport {
    /// Headline disparity: GAP for retrieval, cross-mode gap for reasoning,
    /// averaged over evaluation seeds.
    pub fn gap(&self) -> f64 {
        let v: Vec<f64> = match self {
            EvalReport::Retrieval { reports, .. } => reports.iter().map(|r| r.gap).collect(),
            EvalReport::Reasoning { reports, .. } => reports.iter().map(|r| r.cross_mode_gap).collect(),
        };
        MeanStd::of(&v).mean
    }

    fn write(&self, run: &RunDir, name: &str) -> Result<()> {
        write_json(&run.json(name), self)?;
        let csv: String = match self {
            EvalReport::Retrieval { reports, .. } => reports.iter().map(PositionReport::to_csv).collect(),
            EvalReport::Reasoning { reports, .. } => reports.iter().map(ReasoningReport::to_csv).collect(),
        };
        write_file(&run.csv(name), csv)
    }
}

/// Evaluates `model` on the eval split under every configured seed.
pub fn evaluate(cfg: &ExperimentConfig, model: &ModelParams, eval: &[Instance]) -> Result<EvalReport> {
    match cfg.task {
        TaskKind::Retrieval => {
            let xs = retrieval_only(eval.to_vec())?;
            let positions = cfg.positions();
            let reports = cfg
                .eval_seeds
                .iter()
                .map(|&s| positional_accuracy(model, &xs, &positions, s))
                .collect::<Result<Vec<_>>>()?;
            let summary = if reports.len() > 1 { Some(summarize(&reports)?) } else { None };
            Ok(EvalReport::Retrieval { reports, summary })
        }
        TaskKind::Reasoning => {
            let xs = reasoning_only(eval.to_vec())?;
            let reports = cfg
                .eval_seeds
                .iter()
                .map(|&s| reasoning_mode_eval(model, &xs, cfg.n_docs, s))
                .collect::<Result<Vec<_>>>()?;
            let cross_mode_gap = if reports.len() > 1 {
                Some(MeanStd::of(&reports.iter().map(|r| r.cross_mode_gap).collect::<Vec<_>>()))
            } else {
                None
            };
            Ok(EvalReport::Reasoning { reports, cross_mode_gap })
        }
    }
}

fn record_failure<T>(run: &RunDir, r: Result<T>) -> Result<T> {
    if let Err(e) = &r {
        run.record_divergence(e)?;
    }
    r
}

/// Output of `induce-bias`.
#[derive(Clone, Debug)]
pub struct InduceOutput {
    pub run: RunDir,
    pub teacher: ModelParams,
    pub history: InduceHistory,
    pub baseline: EvalReport,
}

/// `induce-bias`: copy warm-up, then skewed-placement pre-training until the
/// favoured layout is solved.
pub fn cmd_induce_bias(cfg: &ExperimentConfig) -> Result<InduceOutput> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let run = RunDir::create(cfg, "induce-bias")?;
    let vocab = TaskVocab::new(cfg.model.vocab_size)?;
    let init = ModelParams::init(&cfg.model, cfg.stage_seed(Stage::Init))?;
    let induced = pretrain_teacher(
        &init,
        &vocab,
        &cfg.seeded_warmup(),
        &cfg.seeded_induce(),
        &splits.train,
        &splits.induction_eval,
    );
    if let Err(Error::InductionFailure(msg)) = &induced {
        write_json(&run.root.join("induction_failure.json"), &serde_json::json!({ "error": msg }))?;
    }
    let (teacher, warmup, induction) = record_failure(&run, induced)?;
    checkpoint::save(&teacher, &run.checkpoint("teacher.ckpt"))?;
    let history = InduceHistory {
        warmup,
        induction,
        teacher_hash: checkpoint::content_hash(&teacher)?,
    };
    write_json(&run.history(), &history)?;
    let baseline = evaluate(cfg, &teacher, &splits.eval)?;
    baseline.write(&run, "baseline")?;
    Ok(InduceOutput {
        run,
        teacher,
        history,
        baseline,
    })
}

/// Training record of `distill`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillHistory {
    pub variant: Variant,
    /// Ablation row for `r1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1_variant: Option<String>,
    pub training: TrainHistory,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
}

/// Output of `distill`.
#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub run: RunDir,
    pub student: ModelParams,
    pub history: DistillHistory,
    pub report: EvalReport,
}

/// Run-directory name of a distillation; `r1` ablations are suffixed with
/// the components they keep.
pub fn distill_run_name(cfg: &ExperimentConfig, variant: Variant) -> String {
    match (variant, cfg.r1.use_align, cfg.r1.use_anchor) {
        (Variant::R1, true, true) | (Variant::R2 | Variant::Sft | Variant::Seqkd, _, _) => {
            format!("distill-{}", variant.name())
        }
        (Variant::R1, align, anchor) => {
            let mut name = "distill-r1-kl".to_string();
            if align {
                name.push_str("-align");
            }
            if anchor {
                name.push_str("-anchor");
            }
            name
        }
    }
}

/// Teacher and student both start from the teacher checkpoint.
fn distill_with(
    cfg: &ExperimentConfig,
    variant: Variant,
    teacher: &ModelParams,
    train: &[Instance],
) -> Result<(ModelParams, TrainHistory)> {
    let used = &train[..cfg.records.min(train.len())];
    match variant {
        Variant::R2 => {
            let r2 = cfg.seeded_r2();
            let xs = reasoning_only(used.to_vec())?;
            let set = sample_trajectories(teacher, &xs, r2.k, r2.seed, r2.max_new_tokens)?;
            train_r2(teacher, teacher, &set, &r2, None)
        }
        _ => {
            let r1 = cfg.seeded_r1();
            let xs = retrieval_only(used.to_vec())?;
            let set = build_distill_records(teacher, &xs, r1.k, r1.seed, r1.max_new_tokens)?;
            match variant {
                Variant::R1 => train_r1(teacher, teacher, &set, &r1, None),
                Variant::Sft => train_sft_baseline(teacher, &set, &xs, &r1, None),
                _ => train_seqkd_baseline(teacher, teacher, &set, &r1, None),
            }
        }
    }
}

/// `distill`: trains a student from the teacher checkpoint.
pub fn cmd_distill(cfg: &ExperimentConfig, variant: Variant) -> Result<DistillOutput> {
    cfg.validate()?;
    if variant.task() != cfg.task {
        return Err(Error::Config(format!(
            "variant {} needs task {}, config has {}",
            variant.name(),
            variant.task().name(),
            cfg.task.name()
        )));
    }
    let teacher = checkpoint::load(&cfg.teacher_path())?;
    let splits = load_splits(cfg)?;
    let run = RunDir::create(cfg, &distill_run_name(cfg, variant))?;
    let before = checkpoint::content_hash(&teacher)?;
    let (student, training) = record_failure(&run, distill_with(cfg, variant, &teacher, &splits.train))?;
    let after = checkpoint::content_hash(&teacher)?;
    if before != after {
        return Err(Error::InvalidInput("teacher parameters changed during distillation".into()));
    }
    checkpoint::save(&student, &run.checkpoint("student.ckpt"))?;
    let history = DistillHistory {
        variant,
        r1_variant: (variant == Variant::R1).then(|| cfg.r1.variant_name().to_string()),
        training,
        teacher_hash_before: before,
        teacher_hash_after: after,
    };
    write_json(&run.history(), &history)?;
    let report = evaluate(cfg, &student, &splits.eval)?;
    report.write(&run, "eval")?;
    Ok(DistillOutput {
        run,
        student,
        history,
        report,
    })
}

/// Label of a checkpoint: its run directory for `<run>/checkpoints/x.ckpt`,
/// otherwise the file stem.
pub fn checkpoint_label(path: &Path) -> String {
    let stem = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let parent = path.parent();
    match parent.and_then(|p| p.file_name()) {
        Some(d) if d == "checkpoints" => parent
            .and_then(Path::parent)
            .and_then(Path::file_name)
            .map_or(stem, |r| r.to_string_lossy().into_owned()),
        _ => stem,
    }
}

/// `eval`: held-out report for any checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<(RunDir, EvalReport)> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let splits = load_splits(cfg)?;
    let run = RunDir::create(cfg, &format!("eval-{}", checkpoint_label(checkpoint_path)))?;
    let report = evaluate(cfg, &model, &splits.eval)?;
    report.write(&run, "eval")?;
    Ok((run, report))
}

/// Perplexity of the slot-1 response under the gold document at `position`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub position: usize,
    /// Mean perplexity of the model's own slot-1 response.
    pub adv_response: f64,
    /// Mean perplexity of the gold response.
    pub gold_response: f64,
}

/// Output of `diagnose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    /// Instances examined for a failing trivial position.
    pub sampled: usize,
    pub profiles: Vec<ShiftProfile>,
    /// Median over profiles of `max / median` per-token KL.
    pub median_concentration: f64,
    /// Largest per-token KL of the slot-1 prompt against itself; zero.
    pub self_profile_max: f64,
    pub ppl: Vec<PplRow>,
    pub attention: Vec<AttentionPoint>,
}

/// Shift profiles of `model` on up to `sample` instances: for each, the
/// first trivial position (in a seeded order) where greedy decoding fails.
pub fn shift_diagnosis(
    model: &ModelParams,
    instances: &[RetrievalInstance],
    sample: usize,
    seed: u64,
) -> Result<(usize, Vec<ShiftProfile>, f64)> {
    let mut profiles = Vec::new();
    let mut self_max = 0.0f64;
    let mut sampled = 0;
    for x in instances.iter().take(sample) {
        sampled += 1;
        let adv_prompt = x.arrange(1)?;
        let decoded = greedy_decode(model, &adv_prompt.tokens, decode_budget(&Instance::Retrieval(x.clone())), tokens::EOS)?;
        if decoded.tokens.is_empty() {
            continue;
        }
        let own = shift_values(model, &adv_prompt, &adv_prompt, &decoded.tokens)?;
        self_max = own.iter().copied().fold(self_max, f64::max);
        let mut order: Vec<usize> = (2..=x.n_docs()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, x.id])));
        for pos in order {
            let layout = x.arrange(pos)?;
            let out = greedy_decode(model, &layout.tokens, decode_budget(&Instance::Retrieval(x.clone())), tokens::EOS)?;
            if !is_correct(&Instance::Retrieval(x.clone()), &out.tokens) {
                let record = DistillRecord {
                    instance_id: x.id,
                    adv_prompt: adv_prompt.clone(),
                    adv_response: decoded.tokens.clone(),
                    truncated: decoded.truncated,
                    trivial_prompts: vec![layout],
                };
                profiles.push(token_shift_profile(model, &record, 0)?);
                break;
            }
        }
    }
    Ok((sampled, profiles, self_max))
}

/// Median of profile concentrations; `NaN` when there are none.
pub fn median_concentration(profiles: &[ShiftProfile]) -> f64 {
    if profiles.is_empty() {
        return f64::NAN;
    }
    median(&profiles.iter().map(ShiftProfile::concentration).collect::<Vec<_>>())
}

/// Mean perplexities per gold position over `instances`.
pub fn ppl_table(model: &ModelParams, instances: &[RetrievalInstance], positions: &[usize]) -> Result<Vec<PplRow>> {
    let responses = instances
        .iter()
        .map(|x| {
            let adv = x.arrange(1)?;
            let out = greedy_decode(model, &adv.tokens, decode_budget(&Instance::Retrieval(x.clone())), tokens::EOS)?;
            Ok(out.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    positions
        .iter()
        .map(|&pos| {
            let (mut adv, mut gold, mut n) = (0.0, 0.0, 0usize);
            for (x, r) in instances.iter().zip(&responses) {
                if r.is_empty() {
                    continue;
                }
                let layout = x.arrange(pos)?;
                adv += response_ppl(model, &layout, r)?;
                gold += response_ppl(model, &layout, &x.gold_response())?;
                n += 1;
            }
            let n = n.max(1) as f64;
            Ok(PplRow {
                position: pos,
                adv_response: adv / n,
                gold_response: gold / n,
            })
        })
        .collect()
}

/// `diagnose`: token-shift profiles, perplexity table and gold-document
/// attention for a retrieval checkpoint.
pub fn cmd_diagnose(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<(RunDir, Diagnosis)> {
    cfg.validate()?;
    if cfg.task != TaskKind::Retrieval {
        return Err(Error::Config("diagnose runs on retrieval experiments".into()));
    }
    let model = checkpoint::load(checkpoint_path)?;
    let splits = load_splits(cfg)?;
    let xs = retrieval_only(splits.eval)?;
    let run = RunDir::create(cfg, &format!("diagnose-{}", checkpoint_label(checkpoint_path)))?;
    let (sampled, profiles, self_profile_max) = shift_diagnosis(&model, &xs, cfg.diagnose_sample, cfg.seed)?;
    let positions = cfg.positions();
    let sample = &xs[..cfg.diagnose_sample.min(xs.len())];
    let diagnosis = Diagnosis {
        sampled,
        median_concentration: median_concentration(&profiles),
        profiles,
        self_profile_max,
        ppl: ppl_table(&model, sample, &positions)?,
        attention: attention_report(&model, sample, &positions)?,
    };
    write_json(&run.json("diagnosis"), &diagnosis)?;
    let mut prof = String::from("instance_id,trivial_position,max_index,max_value,median,concentration\n");
    for p in &diagnosis.profiles {
        prof.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.instance_id,
            p.trivial_position,
            p.max_index,
            p.max_value,
            p.median,
            p.concentration()
        ));
    }
    write_file(&run.csv("shift_profiles"), prof)?;
    let mut ppl = String::from("position,adv_response_ppl,gold_response_ppl\n");
    for r in &diagnosis.ppl {
        ppl.push_str(&format!("{},{},{}\n", r.position, r.adv_response, r.gold_response));
    }
    write_file(&run.csv("ppl"), ppl)?;
    let mut att = String::from("position,gold_mass\n");
    for a in &diagnosis.attention {
        att.push_str(&format!("{},{}\n", a.position, a.gold_mass));
    }
    write_file(&run.csv("attention"), att)?;
    Ok((run, diagnosis))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            "n_docs=4",
            "train_size=6",
            "eval_size=3",
            "induction_eval_size=2",
            "records=4",
            "model.d_model=8",
            "model.d_ff=16",
            "model.n_layers=1",
            "warmup.max_steps=2",
            "warmup.eval_every=1",
            "warmup.batch_size=2",
            "induce.max_steps=2",
            "induce.eval_every=1",
            "induce.batch_size=2",
            "induce.threshold=0",
            "r1.epochs=1",
            "r1.batch_size=2",
            "r1.k=2",
            "diagnose.sample=3",
        ])
        .unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn gen_data_manifest_matches_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m = cmd_gen_data(&cfg).unwrap();
        for s in &m.splits {
            let text = fs::read_to_string(dir.path().join("data").join(&s.file)).unwrap();
            assert_eq!(text.lines().count(), s.count);
        }
        let splits = load_splits(&cfg).unwrap();
        let mut ids: Vec<u64> = [&splits.train, &splits.eval, &splits.induction_eval]
            .iter()
            .flat_map(|xs| xs.iter().map(Instance::id))
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn commands_fill_the_run_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        // an untrained teacher yields no usable records; zero epochs still
        // exercises the distill layout
        cfg.r1.epochs = 0;
        cmd_gen_data(&cfg).unwrap();
        let induced = cmd_induce_bias(&cfg).unwrap();
        let root = &induced.run.root;
        for f in ["config.echo", "history.json", "checkpoints/teacher.ckpt", "reports/json/baseline.json", "reports/csv/baseline.csv"] {
            assert!(root.join(f).exists(), "{f}");
        }
        let echoed = ExperimentConfig::load(&root.join("config.echo")).unwrap();
        assert_eq!(echoed, cfg);
        let d = cmd_distill(&cfg, Variant::R1).unwrap();
        assert_eq!(d.history.teacher_hash_before, d.history.teacher_hash_after);
        assert!(d.run.root.join("checkpoints/student.ckpt").exists());
        let (_, diag) = cmd_diagnose(&cfg, &cfg.teacher_path()).unwrap();
        assert_eq!(diag.self_profile_max, 0.0);
    }

    #[test]
    fn zero_epoch_distillation_copies_the_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.r1.epochs = 0;
        cmd_gen_data(&cfg).unwrap();
        let induced = cmd_induce_bias(&cfg).unwrap();
        for v in [Variant::R1, Variant::Sft, Variant::Seqkd] {
            let d = cmd_distill(&cfg, v).unwrap();
            assert_eq!(d.student, induced.teacher);
        }
    }

    #[test]
    fn variant_task_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = cmd_distill(&cfg, Variant::R2).unwrap_err();
        assert_eq!(exit_code_for(&err), exit_code::CONFIG);
    }

    #[test]
    fn missing_dataset_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = cmd_induce_bias(&cfg).unwrap_err();
        assert_eq!(exit_code_for(&err), exit_code::IO);
    }

    #[test]
    fn labels_and_run_names() {
        assert_eq!(checkpoint_label(Path::new("out/distill-r1/checkpoints/student.ckpt")), "distill-r1");
        assert_eq!(checkpoint_label(Path::new("/tmp/t.ckpt")), "t");
        let mut cfg = ExperimentConfig::default();
        assert_eq!(distill_run_name(&cfg, Variant::R1), "distill-r1");
        cfg.r1.use_anchor = false;
        assert_eq!(distill_run_name(&cfg, Variant::R1), "distill-r1-kl-align");
        cfg.r1.use_align = false;
        assert_eq!(distill_run_name(&cfg, Variant::R1), "distill-r1-kl");
        assert_eq!(distill_run_name(&cfg, Variant::Seqkd), "distill-seqkd");
    }
}
