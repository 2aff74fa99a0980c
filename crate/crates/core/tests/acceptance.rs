//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. The desk runs go through the same commands as the CLI, with the
//! shipped `configs/*.conf` files as the protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use posbias::distill::{
    alignment_weights, combine_activation, make_bins, r1_batch, r2_loss, r2_loss_and_grad, teacher_targets, BinMember,
    DistillRecord, R1Config, TrajectoryRecord,
};
use posbias::eval::PositionReport;
use posbias::experiment::{
    cmd_diagnose, cmd_distill, cmd_eval, cmd_gen_data, cmd_induce_bias, EvalReport, ExperimentConfig, Variant,
};
use posbias::gradcheck::{finite_difference_grad_at, max_relative_error};
use posbias::model::{checkpoint, ModelConfig, ModelParams};
use posbias::prob::{kl_divergence, ProbVector};
use posbias::tasks::{make_reasoning_instance, make_retrieval_instance, GoldPositions, TaskVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RETRIEVAL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const REASONING_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn config(file: &str, seed: u64, out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file);
    let mut cfg = ExperimentConfig::load(&path).expect("shipped config parses");
    cfg.seed = seed;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn retrieval_report(r: &EvalReport) -> &PositionReport {
    match r {
        EvalReport::Retrieval { reports, .. } => &reports[0],
        EvalReport::Reasoning { .. } => panic!("retrieval report expected"),
    }
}

fn trivial_mean(r: &PositionReport) -> f64 {
    r.mean_excluding(GoldPositions::Single(1))
}

fn pos1(r: &PositionReport) -> f64 {
    r.at(1).expect("position 1 evaluated")
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let member = |id: u64, loss: f64| BinMember {
        record: id as usize,
        instance_id: id,
        trivial_index: 0,
        loss,
    };
    let two = make_bins([(2, member(0, 1.0)), (3, member(1, 2.0))]);
    let w2 = alignment_weights(&two).unwrap();
    let e = std::f64::consts::E;
    let inter_exact = [e / (e + e * e), e * e / (e + e * e)];
    let worked = make_bins([(2, member(0, 1.0)), (2, member(1, 3.0)), (3, member(2, 2.0))]);
    let w = alignment_weights(&worked).unwrap();
    let l_act = combine_activation(&worked, true).unwrap();
    let kl_a = kl_divergence(
        &ProbVector::new(vec![0.5, 0.5]).unwrap(),
        &ProbVector::new(vec![0.25, 0.75]).unwrap(),
    )
    .unwrap();
    let kl_b = kl_divergence(
        &ProbVector::new(vec![1.0, 0.0]).unwrap(),
        &ProbVector::new(vec![0.9, 0.1]).unwrap(),
    )
    .unwrap();
    let checks = [
        (w2.inter[0], inter_exact[0]),
        (w2.inter[1], inter_exact[1]),
        (w.intra[0][0], 1.0 / 3.0),
        (w.intra[0][1], 1.0),
        (l_act, 0.5 / 3.0 + 1.5 + 1.0),
        (kl_a, 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln()),
        (kl_b, (1.0f64 / 0.9).ln()),
    ];
    let worst = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    Outcome {
        id: 1,
        title: "math-kernel exactness",
        pass: worst <= 1e-9 && elapsed < Duration::from_secs(1),
        detail: format!(
            "inter [{:.5} {:.5}] intra [{:.5} {:.5}] L_Act {:.4} KL {:.5} {:.5}; max deviation {worst:.1e} (tol 1e-9); {elapsed:.2?}",
            w2.inter[0], w2.inter[1], w.intra[0][0], w.intra[0][1], l_act, kl_a, kl_b
        ),
    }
}

fn criterion_2() -> Outcome {
    const PROBES: usize = 120;
    let t = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_seq_len: 64,
        ..Default::default()
    };
    let teacher = ModelParams::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flat: Vec<f64> = teacher.flatten().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
    let student = teacher.with_flat(&flat).unwrap();
    let probes: Vec<usize> = (0..PROBES).map(|_| rng.gen_range(0..flat.len())).collect();
    let check = |analytic: &[Vec<f64>], loss: &dyn Fn(&ModelParams) -> f64| -> f64 {
        let analytic: Vec<f64> = analytic.iter().flatten().copied().collect();
        let numeric =
            finite_difference_grad_at(|t| loss(&student.with_flat(t).unwrap()), &flat, &probes, 1e-5).unwrap();
        let picked: Vec<f64> = probes.iter().map(|&i| analytic[i]).collect();
        max_relative_error(&picked, &numeric, 1e-6)
    };

    let vocab = TaskVocab::new(64).unwrap();
    let records: Vec<DistillRecord> = (0..2u64)
        .map(|i| {
            let x = make_retrieval_instance(i, 8, 40 + i, &vocab).unwrap();
            DistillRecord {
                instance_id: x.id,
                adv_prompt: x.arrange(1).unwrap(),
                adv_response: x.gold_response(),
                truncated: false,
                trivial_prompts: [3, 5 + 2 * i as usize].iter().map(|&p| x.arrange(p).unwrap()).collect(),
            }
        })
        .collect();
    let targets: Vec<_> = records.iter().map(|r| teacher_targets(&teacher, r).unwrap()).collect();
    let rr: Vec<&DistillRecord> = records.iter().collect();
    let tt: Vec<_> = targets.iter().collect();
    let r1cfg = R1Config::default();
    let (stats, grads) = r1_batch(&student, &rr, &tt, &r1cfg, None, true).unwrap();
    let frozen = stats.weights.clone();
    let r1_err = check(&grads, &|m| {
        r1_batch(m, &rr, &tt, &r1cfg, frozen.as_ref(), false).unwrap().0.total
    });

    let x = make_reasoning_instance(0, 8, 9, &vocab).unwrap();
    let pairs = vec![(1, 2), (5, 3), (2, 7), (8, 4)];
    let traj = TrajectoryRecord {
        instance_id: x.id,
        adv_prompt: x.advantaged_layout().unwrap(),
        trajectory: x.gold_trajectory(),
        truncated: false,
        valid: true,
        prompts: pairs.iter().map(|&(i, j)| x.arrange_two_hop(i, j).unwrap()).collect(),
        pairs,
    };
    let (_, grads) = r2_loss_and_grad(&student, &traj).unwrap();
    let r2_err = check(&grads, &|m| r2_loss(m, &traj).unwrap());
    let elapsed = t.elapsed();
    Outcome {
        id: 2,
        title: "gradient fidelity",
        pass: r1_err <= 1e-4 && r2_err <= 1e-4 && elapsed < Duration::from_secs(60),
        detail: format!(
            "{PROBES} probes each; composite R1 max rel err {r1_err:.2e}, R2 {r2_err:.2e} (tol 1e-4); {elapsed:.2?}"
        ),
    }
}

/// Everything one retrieval seed produces.
struct RetrievalRun {
    seed: u64,
    cfg: ExperimentConfig,
    baseline: PositionReport,
    full: PositionReport,
    kl: PositionReport,
    seqkd: PositionReport,
    induce_time: Duration,
    distill_time: Duration,
    hashes: Vec<(String, String)>,
    teacher_file_hash: (String, String),
}

fn run_retrieval(seed: u64, out: &Path) -> posbias::Result<RetrievalRun> {
    let cfg = config("retrieval.conf", seed, out);
    cmd_gen_data(&cfg)?;
    let t = Instant::now();
    let induced = cmd_induce_bias(&cfg)?;
    let induce_time = t.elapsed();
    let t = Instant::now();
    let full = cmd_distill(&cfg, Variant::R1)?;
    let distill_time = t.elapsed();
    let mut kl_cfg = cfg.clone();
    kl_cfg.r1.use_align = false;
    kl_cfg.r1.use_anchor = false;
    let kl = cmd_distill(&kl_cfg, Variant::R1)?;
    let seqkd = cmd_distill(&cfg, Variant::Seqkd)?;
    let hashes = [&full, &kl, &seqkd]
        .iter()
        .map(|d| (d.history.teacher_hash_before.clone(), d.history.teacher_hash_after.clone()))
        .collect();
    let on_disk = checkpoint::content_hash(&checkpoint::load(&cfg.teacher_path())?)?;
    Ok(RetrievalRun {
        seed,
        baseline: retrieval_report(&induced.baseline).clone(),
        full: retrieval_report(&full.report).clone(),
        kl: retrieval_report(&kl.report).clone(),
        seqkd: retrieval_report(&seqkd.report).clone(),
        induce_time,
        distill_time,
        hashes,
        teacher_file_hash: (induced.history.teacher_hash, on_disk),
        cfg,
    })
}

struct ReasoningRun {
    seed: u64,
    base_gap: f64,
    r2_gap: f64,
    base_avg: f64,
    r2_avg: f64,
    time: Duration,
    hashes: (String, String),
}

fn reasoning_gap(r: &EvalReport) -> (f64, f64) {
    match r {
        EvalReport::Reasoning { reports, .. } => (reports[0].cross_mode_gap, reports[0].avg),
        EvalReport::Retrieval { .. } => panic!("reasoning report expected"),
    }
}

fn run_reasoning(seed: u64, out: &Path) -> posbias::Result<ReasoningRun> {
    let t = Instant::now();
    let cfg = config("reasoning.conf", seed, out);
    cmd_gen_data(&cfg)?;
    let induced = cmd_induce_bias(&cfg)?;
    let d = cmd_distill(&cfg, Variant::R2)?;
    let (base_gap, base_avg) = reasoning_gap(&induced.baseline);
    let (r2_gap, r2_avg) = reasoning_gap(&d.report);
    Ok(ReasoningRun {
        seed,
        base_gap,
        r2_gap,
        base_avg,
        r2_avg,
        time: t.elapsed(),
        hashes: (d.history.teacher_hash_before, d.history.teacher_hash_after),
    })
}

fn criterion_3(runs: &[RetrievalRun], reasoning: &[ReasoningRun]) -> Outcome {
    let mut n = 0;
    let mut ok = true;
    for r in runs {
        for (a, b) in &r.hashes {
            n += 1;
            ok &= a == b;
        }
        n += 1;
        ok &= r.teacher_file_hash.0 == r.teacher_file_hash.1;
    }
    for r in reasoning {
        n += 1;
        ok &= r.hashes.0 == r.hashes.1;
    }
    Outcome {
        id: 3,
        title: "teacher integrity",
        pass: ok && n > 0,
        detail: format!("{n} before/after SHA-256 comparisons of the frozen teacher, all identical: {ok}"),
    }
}

fn criterion_4(runs: &[RetrievalRun]) -> Outcome {
    let gaps: Vec<f64> = runs.iter().map(|r| r.baseline.gap).collect();
    let p1: Vec<f64> = runs.iter().map(|r| pos1(&r.baseline)).collect();
    let slowest = runs.iter().map(|r| r.induce_time).max().unwrap_or_default();
    let ok = runs.len() >= 3
        && gaps.iter().all(|&g| g >= 0.20)
        && p1.iter().all(|&a| a >= 0.95)
        && slowest <= Duration::from_secs(600);
    Outcome {
        id: 4,
        title: "bias induction",
        pass: ok,
        detail: format!(
            "seeds {:?}: GAP [{}] (>= 0.20), pos-1 acc [{}] (>= 0.95); slowest {slowest:.1?} (<= 600 s)",
            runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            fmt(&gaps),
            fmt(&p1)
        ),
    }
}

fn criterion_5(runs: &[RetrievalRun]) -> Outcome {
    let reductions: Vec<f64> = runs.iter().map(|r| 1.0 - r.full.gap / r.baseline.gap).collect();
    let drops: Vec<f64> = runs.iter().map(|r| pos1(&r.baseline) - pos1(&r.full)).collect();
    let slowest = runs.iter().map(|r| r.distill_time).max().unwrap_or_default();
    let ok = runs.len() >= 3
        && reductions.iter().all(|&x| x >= 0.5)
        && drops.iter().all(|&d| d <= 0.05)
        && slowest <= Duration::from_secs(900);
    Outcome {
        id: 5,
        title: "R1 debiasing",
        pass: ok,
        detail: format!(
            "GAP {} -> {}; reduction [{}] (>= 0.50); pos-1 drop [{}] (<= 0.05); slowest {slowest:.1?} (<= 900 s)",
            fmt(&runs.iter().map(|r| r.baseline.gap).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.full.gap).collect::<Vec<_>>()),
            fmt(&reductions),
            fmt(&drops)
        ),
    }
}

fn criterion_6(runs: &[RetrievalRun]) -> Outcome {
    let full: Vec<f64> = runs.iter().map(|r| trivial_mean(&r.full)).collect();
    let kl: Vec<f64> = runs.iter().map(|r| trivial_mean(&r.kl)).collect();
    let seqkd: Vec<f64> = runs.iter().map(|r| trivial_mean(&r.seqkd)).collect();
    let (f, k, s) = (mean(&full), mean(&kl), mean(&seqkd));
    Outcome {
        id: 6,
        title: "ablation ordering",
        pass: runs.len() >= 5 && f >= k && k >= s - 0.01,
        detail: format!(
            "trivial-position mean over {} seeds: full {f:.4} [{}], KL-only {k:.4} [{}], SeqKD {s:.4} [{}]; \
             full >= KL strict, KL >= SeqKD within 0.01",
            runs.len(),
            fmt(&full),
            fmt(&kl),
            fmt(&seqkd)
        ),
    }
}

fn criterion_7(runs: &[ReasoningRun]) -> Outcome {
    let reductions: Vec<f64> = runs.iter().map(|r| 1.0 - r.r2_gap / r.base_gap).collect();
    let slowest = runs.iter().map(|r| r.time).max().unwrap_or_default();
    let ok = runs.len() >= 3
        && runs.iter().all(|r| r.base_gap > 0.0)
        && reductions.iter().all(|&x| x >= 0.4)
        && slowest <= Duration::from_secs(1200);
    Outcome {
        id: 7,
        title: "R2 debiasing",
        pass: ok,
        detail: format!(
            "seeds {:?}: cross-mode gap {} -> {}; reduction [{}] (>= 0.40); grid avg {} -> {}; slowest {slowest:.1?} (<= 1200 s)",
            runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            fmt(&runs.iter().map(|r| r.base_gap).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.r2_gap).collect::<Vec<_>>()),
            fmt(&reductions),
            fmt(&runs.iter().map(|r| r.base_avg).collect::<Vec<_>>()),
            fmt(&runs.iter().map(|r| r.r2_avg).collect::<Vec<_>>())
        ),
    }
}

fn criterion_8(run: &RetrievalRun) -> posbias::Result<Outcome> {
    let (_, d) = cmd_diagnose(&run.cfg, &run.cfg.teacher_path())?;
    let ok = d.profiles.len() >= 50 && d.median_concentration >= 5.0;
    let mut at: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &d.profiles {
        *at.entry(p.max_index).or_default() += 1;
    }
    Ok(Outcome {
        id: 8,
        title: "token-shifting concentration",
        pass: ok,
        detail: format!(
            "seed {}: {} failing profiles (>= 50); median max/median per-token KL {:.1} (>= 5); \
             spike step histogram {at:?}; self-profile max {}",
            run.seed,
            d.profiles.len(),
            d.median_concentration,
            d.self_profile_max
        ),
    })
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism_pass(cfg: &ExperimentConfig, reasoning: &ExperimentConfig) -> posbias::Result<()> {
    cmd_gen_data(cfg)?;
    cmd_induce_bias(cfg)?;
    cmd_distill(cfg, Variant::R1)?;
    cmd_distill(cfg, Variant::Sft)?;
    cmd_distill(cfg, Variant::Seqkd)?;
    cmd_eval(cfg, &cfg.teacher_path())?;
    cmd_diagnose(cfg, &cfg.teacher_path())?;
    cmd_gen_data(reasoning)?;
    cmd_induce_bias(reasoning)?;
    cmd_distill(reasoning, Variant::R2)?;
    Ok(())
}

fn criterion_9(root: &Path) -> posbias::Result<Outcome> {
    let out = root.join("determinism");
    let mut cfg = config("retrieval.conf", 7, &out.join("retrieval"));
    cfg.apply_overrides(&[
        "n_docs=8",
        "train_size=400",
        "eval_size=20",
        "induction_eval_size=20",
        "records=24",
        "r1.epochs=1",
        "diagnose.sample=8",
        "eval.seeds=0,1",
    ])?;
    let mut reasoning = config("reasoning.conf", 7, &out.join("reasoning"));
    reasoning.apply_overrides(&[
        "n_docs=10",
        "train_size=200",
        "eval_size=10",
        "induction_eval_size=10",
        "records=16",
        "r2.epochs=1",
        "induce.min_steps=0",
        "induce.threshold=0",
        "induce.other_floor=0",
    ])?;
    determinism_pass(&cfg, &reasoning)?;
    let first = snapshot(&out);
    fs::remove_dir_all(&out).map_err(|e| posbias::Error::InvalidInput(e.to_string()))?;
    determinism_pass(&cfg, &reasoning)?;
    let second = snapshot(&out);
    let differing: Vec<_> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .cloned()
        .collect();
    let checkpoints = first.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    let reports = first.keys().filter(|k| k.components().any(|c| c.as_os_str() == "reports")).count();
    Ok(Outcome {
        id: 9,
        title: "determinism",
        pass: differing.is_empty() && checkpoints > 0 && reports > 0,
        detail: format!(
            "every command run twice: {} files ({checkpoints} checkpoints, {reports} reports), {} differ",
            first.len(),
            differing.len()
        ),
    })
}

fn failed(id: u32, title: &'static str, err: posbias::Error) -> Outcome {
    Outcome {
        id,
        title,
        pass: false,
        detail: format!("run failed: {err}"),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let root = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = vec![criterion_1(), criterion_2()];
    for o in &outcomes {
        println!("criterion {} [{}]: {}", o.id, o.title, if o.pass { "PASS" } else { "FAIL" });
    }

    let mut retrieval = Vec::new();
    let mut errors = Vec::new();
    for seed in RETRIEVAL_SEEDS {
        match run_retrieval(seed, &root.path().join(format!("retrieval-{seed}"))) {
            Ok(r) => {
                println!(
                    "  retrieval seed {seed}: GAP {:.3} -> full {:.3}, kl {:.3}, seqkd {:.3} ({:.0?} + {:.0?})",
                    r.baseline.gap, r.full.gap, r.kl.gap, r.seqkd.gap, r.induce_time, r.distill_time
                );
                retrieval.push(r);
            }
            Err(e) => errors.push(format!("retrieval seed {seed}: {e}")),
        }
    }
    let mut reasoning = Vec::new();
    for seed in REASONING_SEEDS {
        match run_reasoning(seed, &root.path().join(format!("reasoning-{seed}"))) {
            Ok(r) => {
                println!("  reasoning seed {seed}: cross-mode gap {:.3} -> {:.3} ({:.0?})", r.base_gap, r.r2_gap, r.time);
                reasoning.push(r);
            }
            Err(e) => errors.push(format!("reasoning seed {seed}: {e}")),
        }
    }
    for e in &errors {
        println!("  error: {e}");
    }

    outcomes.push(criterion_3(&retrieval, &reasoning));
    outcomes.push(criterion_4(&retrieval));
    outcomes.push(criterion_5(&retrieval));
    outcomes.push(criterion_6(&retrieval));
    outcomes.push(criterion_7(&reasoning));
    outcomes.push(match retrieval.first() {
        Some(r) => criterion_8(r).unwrap_or_else(|e| failed(8, "token-shifting concentration", e)),
        None => failed(8, "token-shifting concentration", posbias::Error::InvalidInput("no teacher".into())),
    });
    outcomes.push(criterion_9(root.path()).unwrap_or_else(|e| failed(9, "determinism", e)));

    println!();
    for o in &outcomes {
        println!("criterion {} [{}]: {}", o.id, o.title, if o.pass { "PASS" } else { "FAIL" });
        println!("    {}", o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0?}", outcomes.len(), started.elapsed());
    if passed == outcomes.len() && errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
