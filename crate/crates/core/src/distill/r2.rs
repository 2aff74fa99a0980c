//! Two-hop distillation: the teacher's chain trajectory at the favoured
//! layout `(n−1, n)` becomes a cross-entropy target under `K` randomly
//! placed hop pairs.

use serde::{Deserialize, Serialize};

use crate::distill::{train_cross_entropy, EpochEval, GroupReduction, Schedule, TrainHistory};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, teacher_forced_graph, ModelParams};
use crate::autograd::Graph;
use crate::tasks::{derive_seed, sample_trivial_pairs, tokens, PromptLayout, ReasoningInstance};
use crate::trainer::{answer_after_marker, cross_entropy_gradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Config {
    /// Hop placements per record.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Drop records whose trajectory does not reach the right answer.
    pub filter_invalid: bool,
    pub max_new_tokens: usize,
}

impl Default for R2Config {
    fn default() -> Self {
        Self {
            k: 4,
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            filter_invalid: true,
            max_new_tokens: 12,
        }
    }
}

impl R2Config {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
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
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub instance_id: u64,
    pub adv_prompt: PromptLayout,
    pub trajectory: Vec<usize>,
    pub truncated: bool,
    /// The trajectory ends in `EOS` and names the answer after the marker.
    pub valid: bool,
    pub pairs: Vec<(usize, usize)>,
    pub prompts: Vec<PromptLayout>,
}

/// Decodes the chain at `(n−1, n)` and lays out `k` distinct hop pairs
/// seeded by `(seed, instance id)`.
pub fn sample_trajectory(
    teacher: &ModelParams,
    instance: &ReasoningInstance,
    k: usize,
    seed: u64,
    max_new_tokens: usize,
) -> Result<TrajectoryRecord> {
    let adv_prompt = instance.advantaged_layout()?;
    let decoded = greedy_decode(teacher, &adv_prompt.tokens, max_new_tokens, tokens::EOS)?;
    let valid = !decoded.truncated
        && decoded.tokens.last() == Some(&tokens::EOS)
        && answer_after_marker(&decoded.tokens, tokens::ANS, &instance.answer);
    let pairs = sample_trivial_pairs(k, instance.n_docs(), derive_seed(&[seed, instance.id]))?;
    let prompts = pairs
        .iter()
        .map(|&(i, j)| instance.arrange_two_hop(i, j))
        .collect::<Result<_>>()?;
    Ok(TrajectoryRecord {
        instance_id: instance.id,
        adv_prompt,
        trajectory: decoded.tokens,
        truncated: decoded.truncated,
        valid,
        pairs,
        prompts,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectorySet {
    pub fn invalid(&self) -> usize {
        self.records.iter().filter(|r| !r.valid).count()
    }
}

pub fn sample_trajectories(
    teacher: &ModelParams,
    instances: &[ReasoningInstance],
    k: usize,
    seed: u64,
    max_new_tokens: usize,
) -> Result<TrajectorySet> {
    Ok(TrajectorySet {
        records: instances
            .iter()
            .map(|x| sample_trajectory(teacher, x, k, seed, max_new_tokens))
            .collect::<Result<_>>()?,
    })
}

/// `Σ_k CE(C^adv | P^(pre_k, post_k))`, each term a token mean.
pub fn r2_loss(student: &ModelParams, record: &TrajectoryRecord) -> Result<f64> {
    if record.trajectory.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mask = vec![true; record.trajectory.len()];
    let mut total = 0.0;
    for p in &record.prompts {
        let mut g = Graph::new();
        let bound = student.bind(&mut g, false);
        let logits = teacher_forced_graph(&mut g, student, &bound, &p.tokens, &record.trajectory)?;
        let ce = g.cross_entropy(logits, &record.trajectory, &mask)?;
        total += g.value(ce).item();
    }
    Ok(total)
}

/// [`r2_loss`] and its gradient with respect to the student, in canonical
/// parameter order.
pub fn r2_loss_and_grad(student: &ModelParams, record: &TrajectoryRecord) -> Result<(f64, Vec<Vec<f64>>)> {
    if record.trajectory.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let pairs: Vec<(&[usize], &[usize])> = record
        .prompts
        .iter()
        .map(|p| (p.tokens.as_slice(), record.trajectory.as_slice()))
        .collect();
    let (mean, mut grads) = cross_entropy_gradients(student, &pairs)?;
    let k = pairs.len() as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= k);
    Ok((mean * k, grads))
}

/// Trains on the trajectory records; with `filter_invalid` the invalid ones
/// are excluded and counted in the history.
pub fn train_r2(
    teacher: &ModelParams,
    student_init: &ModelParams,
    set: &TrajectorySet,
    cfg: &R2Config,
    eval: Option<&EpochEval>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    // trajectories were sampled from the teacher already
    let _ = teacher;
    let usable: Vec<&TrajectoryRecord> = set
        .records
        .iter()
        .filter(|r| !cfg.filter_invalid || r.valid)
        .filter(|r| !r.trajectory.is_empty())
        .collect();
    let skipped = set.records.len() - usable.len();
    if skipped > 0 {
        log::info!("r2: {skipped} of {} trajectory records excluded", set.records.len());
    }
    let groups: Vec<Vec<(Vec<usize>, Vec<usize>)>> = usable
        .iter()
        .map(|r| {
            r.prompts
                .iter()
                .map(|p| (p.tokens.clone(), r.trajectory.clone()))
                .collect()
        })
        .collect();
    train_cross_entropy(
        "r2",
        student_init,
        &groups,
        GroupReduction::Sum,
        &cfg.schedule(),
        eval,
        skipped,
    )
}
