//! Retrieval distillation from the favoured slot.
//!
//! For each record the frozen teacher answers with the gold document in
//! slot 1 (`R^adv`). The student is trained so that, conditioned on the
//! same instance with the gold document in a trivial slot, its next-token
//! distributions along `R^adv` match the teacher's at slot 1 (activation
//! loss), while its own slot-1 distributions stay on the teacher's
//! (anchoring loss).
//!
//! Activation losses are grouped into bins by trivial position. Each
//! member is weighted by `α_ij = inter_i · intra_ij`, where `inter` is a
//! softmax over bin mean losses and `intra_ij = L_ij / max_k L_ik`. The
//! weights are constants of the batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::distill::{
    train_cross_entropy, EpochEval, EpochRecord, GroupReduction, PositionValue, Schedule, TrainHistory,
};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, teacher_force_logits, teacher_forced_graph, BoundParams, ModelParams};
use crate::prob::sequence_kl;
use crate::tasks::{derive_seed, sample_trivial_positions, tokens, GoldPositions, PromptLayout, RetrievalInstance};
use crate::tensor::Tensor;
use crate::trainer::{accumulate, guarded_step};

/// Hyperparameters of the retrieval distillation trainer. At 7B scale the
/// reference setting is lr 3e-6 with batch 32; the desk-scale defaults are
/// lr 1e-3 with batch 16.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R1Config {
    /// Trivial prompts per record.
    pub k: usize,
    /// Weight of the anchoring loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub use_align: bool,
    pub use_anchor: bool,
    pub seed: u64,
    /// Decoding budget for `R^adv`.
    pub max_new_tokens: usize,
}

impl Default for R1Config {
    fn default() -> Self {
        Self {
            k: 4,
            lambda: 1.0,
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-3,
            use_align: true,
            use_anchor: true,
            seed: 0,
            max_new_tokens: 8,
        }
    }
}

impl R1Config {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }

    /// Name of the ablation row this configuration realizes.
    pub fn variant_name(&self) -> &'static str {
        match (self.use_align, self.use_anchor) {
            (false, false) => "kl",
            (true, false) => "kl+align",
            (false, true) => "kl+anchor",
            (true, true) => "kl+align+anchor",
        }
    }
}

/// One training unit: the teacher's answer at slot 1 and `K` prompts with
/// the gold document moved to trivial slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub instance_id: u64,
    pub adv_prompt: PromptLayout,
    pub adv_response: Vec<usize>,
    pub truncated: bool,
    pub trivial_prompts: Vec<PromptLayout>,
}

impl DistillRecord {
    pub fn trivial_positions(&self) -> Vec<usize> {
        self.trivial_prompts
            .iter()
            .map(|p| match p.gold_positions {
                GoldPositions::Single(i) => i,
                GoldPositions::Pair(i, _) => i,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.adv_prompt.gold_positions != GoldPositions::Single(1) {
            return Err(Error::Layout("advantaged prompt must hold the gold document in slot 1".into()));
        }
        let n = self.adv_prompt.n_docs();
        let mut positions = self.trivial_positions();
        if positions.iter().any(|&p| !(2..=n).contains(&p)) {
            return Err(Error::Position(format!("trivial positions {positions:?} outside 2..={n}")));
        }
        positions.sort_unstable();
        positions.dedup();
        if positions.len() != self.trivial_prompts.len() {
            return Err(Error::Position("trivial positions repeat".into()));
        }
        if self.adv_response.is_empty() {
            return Err(Error::Degenerate("empty advantaged response".into()));
        }
        Ok(())
    }
}

/// Decodes `R^adv` at slot 1 and lays out `k` trivial prompts at positions
/// seeded by `(seed, instance id)`.
pub fn build_distill_record(
    teacher: &ModelParams,
    instance: &RetrievalInstance,
    k: usize,
    seed: u64,
    max_new_tokens: usize,
) -> Result<DistillRecord> {
    let adv_prompt = instance.arrange(1)?;
    let decoded = greedy_decode(teacher, &adv_prompt.tokens, max_new_tokens, tokens::EOS)?;
    if decoded.tokens.first().is_none_or(|&t| t == tokens::EOS) {
        return Err(Error::Degenerate(format!("instance {}: teacher stopped immediately", instance.id)));
    }
    let positions = sample_trivial_positions(k, instance.n_docs(), derive_seed(&[seed, instance.id]))?;
    let trivial_prompts = positions.iter().map(|&p| instance.arrange(p)).collect::<Result<_>>()?;
    Ok(DistillRecord {
        instance_id: instance.id,
        adv_prompt,
        adv_response: decoded.tokens,
        truncated: decoded.truncated,
        trivial_prompts,
    })
}

/// Usable records plus counts of the ones set aside.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSet {
    pub records: Vec<DistillRecord>,
    pub degenerate: usize,
    pub truncated: usize,
}

impl RecordSet {
    pub fn skipped(&self) -> usize {
        self.degenerate + self.truncated
    }
}

/// Builds a record per instance; degenerate and truncated responses are
/// skipped and counted.
pub fn build_distill_records(
    teacher: &ModelParams,
    instances: &[RetrievalInstance],
    k: usize,
    seed: u64,
    max_new_tokens: usize,
) -> Result<RecordSet> {
    let mut set = RecordSet {
        records: Vec::new(),
        degenerate: 0,
        truncated: 0,
    };
    for x in instances {
        match build_distill_record(teacher, x, k, seed, max_new_tokens) {
            Ok(r) if r.truncated => {
                log::debug!("instance {}: truncated advantaged response skipped", x.id);
                set.truncated += 1;
            }
            Ok(r) => set.records.push(r),
            Err(Error::Degenerate(msg)) => {
                log::debug!("{msg}; skipped");
                set.degenerate += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

fn full_mask(len: usize) -> Vec<bool> {
    vec![true; len]
}

/// Teacher logits along `R^adv` under the advantaged prompt.
pub fn teacher_targets(teacher: &ModelParams, record: &DistillRecord) -> Result<Tensor> {
    teacher_force_logits(teacher, &record.adv_prompt.tokens, &record.adv_response)
}

/// `L^{P^{n_k}}`: KL from the teacher at slot 1 to the student at the
/// `k`-th trivial prompt, averaged over `R^adv`.
pub fn activation_loss_single(
    teacher: &ModelParams,
    student: &ModelParams,
    record: &DistillRecord,
    k: usize,
) -> Result<f64> {
    let prompt = record
        .trivial_prompts
        .get(k)
        .ok_or_else(|| Error::InvalidInput(format!("trivial index {k} of {}", record.trivial_prompts.len())))?;
    let t = teacher_targets(teacher, record)?;
    let s = teacher_force_logits(student, &prompt.tokens, &record.adv_response)?;
    sequence_kl(&t, &s, &full_mask(record.adv_response.len()))
}

/// KL from teacher to student, both conditioned on the advantaged prompt.
pub fn anchoring_loss(teacher: &ModelParams, student: &ModelParams, record: &DistillRecord) -> Result<f64> {
    let t = teacher_targets(teacher, record)?;
    let s = teacher_force_logits(student, &record.adv_prompt.tokens, &record.adv_response)?;
    sequence_kl(&t, &s, &full_mask(record.adv_response.len()))
}

/// `L_Act + λ·L_Anc`.
pub fn composite_loss(activation: f64, anchoring: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    Ok(activation + lambda * anchoring)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMember {
    /// Index of the record within its batch.
    pub record: usize,
    pub instance_id: u64,
    /// Index of the trivial prompt within the record.
    pub trivial_index: usize,
    pub loss: f64,
}

/// Activation losses sharing one trivial position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrivialBin {
    pub position: usize,
    pub members: Vec<BinMember>,
}

impl TrivialBin {
    pub fn mean_loss(&self) -> f64 {
        self.members.iter().map(|m| m.loss).sum::<f64>() / self.members.len() as f64
    }
}

/// Groups `(position, member)` pairs into bins sorted by position with
/// members sorted by instance id.
pub fn make_bins(entries: impl IntoIterator<Item = (usize, BinMember)>) -> Vec<TrivialBin> {
    let mut map: BTreeMap<usize, Vec<BinMember>> = BTreeMap::new();
    for (pos, m) in entries {
        map.entry(pos).or_default().push(m);
    }
    map.into_iter()
        .map(|(position, mut members)| {
            members.sort_by_key(|m| (m.instance_id, m.record, m.trivial_index));
            TrivialBin { position, members }
        })
        .collect()
}

/// Per-bin inter weights and per-member intra weights, aligned with the
/// non-empty input bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeights {
    pub positions: Vec<usize>,
    pub inter: Vec<f64>,
    pub intra: Vec<Vec<f64>>,
}

impl AlignmentWeights {
    /// `α_ij` for bin `i`, member `j`.
    pub fn alpha(&self, bin: usize, member: usize) -> f64 {
        self.inter[bin] * self.intra[bin][member]
    }
}

/// Computes `α`. Empty bins are dropped; a bin whose losses are all zero
/// gets intra weight 1 for every member.
pub fn alignment_weights(bins: &[TrivialBin]) -> Result<AlignmentWeights> {
    let bins: Vec<&TrivialBin> = bins.iter().filter(|b| !b.members.is_empty()).collect();
    if bins.is_empty() {
        return Err(Error::InvalidInput("no non-empty trivial bins".into()));
    }
    for b in &bins {
        if let Some(m) = b.members.iter().find(|m| !m.loss.is_finite() || m.loss < 0.0) {
            return Err(Error::InvalidInput(format!(
                "bin {}: loss {} is not finite and non-negative",
                b.position, m.loss
            )));
        }
    }
    let means: Vec<f64> = bins.iter().map(|b| b.mean_loss()).collect();
    let inter = crate::prob::softmax(&means)?.probs().to_vec();
    let intra = bins
        .iter()
        .map(|b| {
            let max = b.members.iter().map(|m| m.loss).fold(0.0, f64::max);
            b.members
                .iter()
                .map(|m| if max > 0.0 { m.loss / max } else { 1.0 })
                .collect()
        })
        .collect();
    Ok(AlignmentWeights {
        positions: bins.iter().map(|b| b.position).collect(),
        inter,
        intra,
    })
}

/// Combines a loss table: `Σ α_ij L_ij` with alignment, otherwise the
/// plain mean of all `L_ij`.
pub fn combine_activation(bins: &[TrivialBin], use_align: bool) -> Result<f64> {
    let bins: Vec<TrivialBin> = bins.iter().filter(|b| !b.members.is_empty()).cloned().collect();
    if bins.is_empty() {
        return Err(Error::InvalidInput("no activation losses".into()));
    }
    if use_align {
        let w = alignment_weights(&bins)?;
        Ok(bins
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.members.iter().enumerate().map(move |(j, m)| (i, j, m.loss)))
            .map(|(i, j, l)| w.alpha(i, j) * l)
            .sum())
    } else {
        let n: usize = bins.iter().map(|b| b.members.len()).sum();
        Ok(bins.iter().flat_map(|b| b.members.iter().map(|m| m.loss)).sum::<f64>() / n as f64)
    }
}

/// Batch activation loss evaluated from scratch.
pub fn activation_loss_batch(
    teacher: &ModelParams,
    student: &ModelParams,
    records: &[DistillRecord],
    use_align: bool,
) -> Result<f64> {
    let mut entries = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for (k, pos) in r.trivial_positions().into_iter().enumerate() {
            let loss = activation_loss_single(teacher, student, r, k)?;
            entries.push((
                pos,
                BinMember {
                    record: ri,
                    instance_id: r.instance_id,
                    trivial_index: k,
                    loss,
                },
            ));
        }
    }
    combine_activation(&make_bins(entries), use_align)
}

/// Loss components and weighting diagnostics of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub l_act: f64,
    pub l_anc: f64,
    pub total: f64,
    pub bins: Vec<TrivialBin>,
    pub weights: Option<AlignmentWeights>,
}

struct Term<'a> {
    graph: Graph<'a>,
    bound: BoundParams,
    loss: Var,
}

fn kl_term<'a>(student: &'a ModelParams, prompt: &[usize], response: &[usize], target: &Tensor) -> Result<Term<'a>> {
    let mut graph = Graph::new();
    let bound = student.bind(&mut graph, true);
    let logits = teacher_forced_graph(&mut graph, student, &bound, prompt, response)?;
    let loss = graph.sequence_kl(logits, target, &full_mask(response.len()))?;
    Ok(Term { graph, bound, loss })
}

/// Composite objective of a batch and, when `want_grad`, its gradient with
/// respect to the student. `targets[i]` are the cached teacher logits of
/// `records[i]`. Passing `frozen` replaces the batch's own alignment
/// weights (used to differentiate at a fixed weighting).
pub fn r1_batch(
    student: &ModelParams,
    records: &[&DistillRecord],
    targets: &[&Tensor],
    cfg: &R1Config,
    frozen: Option<&AlignmentWeights>,
    want_grad: bool,
) -> Result<(BatchStats, Vec<Vec<f64>>)> {
    if records.is_empty() || records.len() != targets.len() {
        return Err(Error::InvalidInput(format!("{} records, {} targets", records.len(), targets.len())));
    }
    let mut terms = Vec::new();
    let mut entries = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for (k, (pos, prompt)) in r.trivial_positions().into_iter().zip(&r.trivial_prompts).enumerate() {
            let term = kl_term(student, &prompt.tokens, &r.adv_response, targets[ri])?;
            entries.push((
                pos,
                BinMember {
                    record: ri,
                    instance_id: r.instance_id,
                    trivial_index: k,
                    loss: term.graph.value(term.loss).item(),
                },
            ));
            terms.push(term);
        }
    }
    let bins = make_bins(entries);
    let weights = if cfg.use_align {
        Some(match frozen {
            Some(w) => w.clone(),
            None => alignment_weights(&bins)?,
        })
    } else {
        None
    };
    let n_terms = terms.len() as f64;
    let mut weighted: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (i, b) in bins.iter().enumerate() {
        for (j, m) in b.members.iter().enumerate() {
            let term_index = terms_index(records, m.record, m.trivial_index);
            let w = match &weights {
                Some(w) => w.alpha(i, j),
                None => 1.0 / n_terms,
            };
            weighted.push((term_index, w));
        }
    }
    let l_act: f64 = weighted
        .iter()
        .map(|&(t, w)| w * terms[t].graph.value(terms[t].loss).item())
        .sum();

    let mut anchors = Vec::new();
    if cfg.use_anchor {
        for (ri, r) in records.iter().enumerate() {
            anchors.push(kl_term(student, &r.adv_prompt.tokens, &r.adv_response, targets[ri])?);
        }
    }
    let anchor_w = 1.0 / records.len() as f64;
    let l_anc: f64 = anchors.iter().map(|a| anchor_w * a.graph.value(a.loss).item()).sum();
    let lambda = if cfg.use_anchor { cfg.lambda } else { 0.0 };
    let total = composite_loss(l_act, l_anc, lambda)?;

    let mut acc = Vec::new();
    if want_grad {
        for &(t, w) in &weighted {
            backprop_into(&mut acc, &terms[t], w)?;
        }
        for a in &anchors {
            backprop_into(&mut acc, a, lambda * anchor_w)?;
        }
    }
    Ok((
        BatchStats {
            l_act,
            l_anc,
            total,
            bins,
            weights,
        },
        acc,
    ))
}

fn terms_index(records: &[&DistillRecord], record: usize, trivial_index: usize) -> usize {
    records[..record].iter().map(|r| r.trivial_prompts.len()).sum::<usize>() + trivial_index
}

fn backprop_into(acc: &mut Vec<Vec<f64>>, term: &Term<'_>, weight: f64) -> Result<()> {
    let mut grads = term.graph.backward(term.loss)?;
    accumulate(acc, &term.bound.gradients(&mut grads, &term.graph), weight);
    Ok(())
}

fn check_records(records: &[DistillRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    Ok(())
}

/// Optimizes the composite objective. The teacher is only read.
pub fn train_r1(
    teacher: &ModelParams,
    student_init: &ModelParams,
    records: &RecordSet,
    cfg: &R1Config,
    eval: Option<&EpochEval>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    check_records(&records.records)?;
    let mut params = student_init.clone();
    let mut history = TrainHistory {
        method: format!("r1/{}", cfg.variant_name()),
        epochs: Vec::new(),
        steps: 0,
        records_used: records.records.len(),
        records_skipped: records.skipped(),
    };
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    if records.records.is_empty() {
        return Err(Error::InvalidInput("no usable distillation records".into()));
    }
    let targets: Vec<Tensor> = records
        .records
        .iter()
        .map(|r| teacher_targets(teacher, r))
        .collect::<Result<_>>()?;
    let schedule = cfg.schedule();
    let mut opt = schedule.optimizer();
    for epoch in 0..cfg.epochs {
        let order = schedule.order(epoch, records.records.len());
        let mut totals = Vec::new();
        let (mut acts, mut ancs) = (Vec::new(), Vec::new());
        let mut bin_losses: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut inter_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for batch in order.chunks(cfg.batch_size) {
            let recs: Vec<&DistillRecord> = batch.iter().map(|&i| &records.records[i]).collect();
            let tgts: Vec<&Tensor> = batch.iter().map(|&i| &targets[i]).collect();
            let (stats, grads) = r1_batch(&params, &recs, &tgts, cfg, None, true)?;
            history.steps += 1;
            if !stats.total.is_finite() {
                return Err(Error::divergence(
                    format!(
                        "step {}: L_Act {} L_Anc {}; batch stats {}",
                        history.steps,
                        stats.l_act,
                        stats.l_anc,
                        serde_json::to_string(&stats.bins).unwrap_or_default()
                    ),
                    Some(&params),
                ));
            }
            guarded_step(&mut params, &mut opt, grads, stats.total, history.steps)?;
            for b in &stats.bins {
                let e = bin_losses.entry(b.position).or_default();
                e.0 += b.members.iter().map(|m| m.loss).sum::<f64>();
                e.1 += b.members.len();
            }
            if let Some(w) = &stats.weights {
                for (p, v) in w.positions.iter().zip(&w.inter) {
                    let e = inter_sums.entry(*p).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            totals.push(stats.total);
            acts.push(stats.l_act);
            ancs.push(stats.l_anc);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (eval_report, mode_eval) = match eval {
            Some(e) => e.run(&params)?,
            None => (None, None),
        };
        log::info!(
            "r1 epoch {epoch}: loss {:.5} act {:.5} anc {:.5}",
            mean(&totals),
            mean(&acts),
            mean(&ancs)
        );
        history.epochs.push(EpochRecord {
            epoch,
            loss: mean(&totals),
            l_act: Some(mean(&acts)),
            l_anc: Some(mean(&ancs)),
            bin_means: to_position_values(&bin_losses),
            inter_weights: to_position_values(&inter_sums),
            eval: eval_report,
            mode_eval,
        });
    }
    Ok((params, history))
}

fn to_position_values(map: &BTreeMap<usize, (f64, usize)>) -> Vec<PositionValue> {
    map.iter()
        .map(|(&position, &(sum, n))| PositionValue {
            position,
            value: sum / n as f64,
        })
        .collect()
}

/// Fine-tunes on gold responses with the gold document at each record's
/// trivial positions.
pub fn train_sft_baseline(
    student_init: &ModelParams,
    records: &RecordSet,
    instances: &[RetrievalInstance],
    cfg: &R1Config,
    eval: Option<&EpochEval>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let by_id: BTreeMap<u64, &RetrievalInstance> = instances.iter().map(|x| (x.id, x)).collect();
    let groups = records
        .records
        .iter()
        .map(|r| {
            let x = by_id
                .get(&r.instance_id)
                .ok_or_else(|| Error::InvalidInput(format!("no instance for record {}", r.instance_id)))?;
            Ok(r.trivial_prompts
                .iter()
                .map(|p| (p.tokens.clone(), x.gold_response()))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    train_cross_entropy(
        "sft",
        student_init,
        &groups,
        GroupReduction::Mean,
        &cfg.schedule(),
        eval,
        records.skipped(),
    )
}

/// Fine-tunes on the teacher's `R^adv` as hard labels under the trivial
/// prompts.
pub fn train_seqkd_baseline(
    teacher: &ModelParams,
    student_init: &ModelParams,
    records: &RecordSet,
    cfg: &R1Config,
    eval: Option<&EpochEval>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    // the teacher only produced R^adv; it is not consulted again
    let _ = teacher;
    let groups: Vec<Vec<(Vec<usize>, Vec<usize>)>> = records
        .records
        .iter()
        .map(|r| {
            r.trivial_prompts
                .iter()
                .map(|p| (p.tokens.clone(), r.adv_response.clone()))
                .collect()
        })
        .collect();
    train_cross_entropy(
        "seqkd",
        student_init,
        &groups,
        GroupReduction::Mean,
        &cfg.schedule(),
        eval,
        records.skipped(),
    )
}
