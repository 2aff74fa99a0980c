//! Position-to-position distillation.
//!
//! [`r1`] transfers the frozen teacher's behaviour at the favoured
//! retrieval slot to every other slot with a per-token KL objective;
//! [`r2`] replays chain trajectories sampled at the favoured two-hop layout
//! under randomly placed hops. Cross-entropy baselines share the trainer in
//! this module.

pub mod r1;
pub mod r2;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{positional_accuracy, reasoning_mode_eval, PositionReport, ReasoningReport};
use crate::model::ModelParams;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tasks::{derive_seed, ReasoningInstance, RetrievalInstance};
use crate::trainer::{accumulate, cross_entropy_gradients, guarded_step};

pub use r1::{
    activation_loss_batch, activation_loss_single, alignment_weights, anchoring_loss, build_distill_record,
    build_distill_records, combine_activation, composite_loss, make_bins, r1_batch, teacher_targets, train_r1,
    train_seqkd_baseline, train_sft_baseline, AlignmentWeights, BatchStats, BinMember, DistillRecord, R1Config,
    RecordSet, TrivialBin,
};
pub use r2::{r2_loss, r2_loss_and_grad, sample_trajectory, sample_trajectories, train_r2, R2Config, TrajectoryRecord, TrajectorySet};

/// A value attached to one gold position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionValue {
    pub position: usize,
    pub value: f64,
}

/// Held-out evaluation run after every epoch.
#[derive(Clone, Debug, Default)]
pub struct EpochEval {
    pub retrieval: Vec<RetrievalInstance>,
    pub positions: Vec<usize>,
    pub reasoning: Vec<ReasoningInstance>,
    pub seed: u64,
}

impl EpochEval {
    fn run(&self, params: &ModelParams) -> Result<(Option<PositionReport>, Option<ReasoningReport>)> {
        let retrieval = if self.retrieval.is_empty() {
            None
        } else {
            Some(positional_accuracy(params, &self.retrieval, &self.positions, self.seed)?)
        };
        let reasoning = match self.reasoning.first() {
            None => None,
            Some(x) => Some(reasoning_mode_eval(params, &self.reasoning, x.n_docs(), self.seed)?),
        };
        Ok((retrieval, reasoning))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean optimized loss over the epoch's batches.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_act: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_anc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bin_means: Vec<PositionValue>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inter_weights: Vec<PositionValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PositionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_eval: Option<ReasoningReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub method: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub records_used: usize,
    /// Records excluded from training (degenerate, truncated or invalid).
    pub records_skipped: usize,
}

/// Shared batch schedule for every trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        Ok(())
    }

    /// Record order for `epoch`, a seeded shuffle.
    pub(crate) fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xe0, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    pub(crate) fn optimizer(&self) -> Optimizer {
        Optimizer::new(OptimizerKind::adam(), self.learning_rate)
    }
}

/// How a group's per-example cross-entropies combine into the group loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GroupReduction {
    Mean,
    Sum,
}

/// Cross-entropy trainer over groups of `(prompt, response)` pairs: the
/// batch loss is the mean over groups of each group's reduced loss.
pub(crate) fn train_cross_entropy(
    method: &str,
    student_init: &ModelParams,
    groups: &[Vec<(Vec<usize>, Vec<usize>)>],
    reduction: GroupReduction,
    schedule: &Schedule,
    eval: Option<&EpochEval>,
    records_skipped: usize,
) -> Result<(ModelParams, TrainHistory)> {
    schedule.validate()?;
    let mut params = student_init.clone();
    let mut history = TrainHistory {
        method: method.to_string(),
        epochs: Vec::new(),
        steps: 0,
        records_used: groups.len(),
        records_skipped,
    };
    if schedule.epochs == 0 {
        return Ok((params, history));
    }
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidInput(format!("{method}: no usable training records")));
    }
    let mut opt = schedule.optimizer();
    for epoch in 0..schedule.epochs {
        let order = schedule.order(epoch, groups.len());
        let mut losses = Vec::new();
        for batch in order.chunks(schedule.batch_size) {
            let mut acc = Vec::new();
            let mut batch_loss = 0.0;
            for &gi in batch {
                let group = &groups[gi];
                let pairs: Vec<(&[usize], &[usize])> =
                    group.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
                let (loss, grads) = cross_entropy_gradients(&params, &pairs)?;
                let factor = match reduction {
                    GroupReduction::Mean => 1.0,
                    GroupReduction::Sum => group.len() as f64,
                } / batch.len() as f64;
                batch_loss += factor * loss;
                accumulate(&mut acc, &grads, factor);
            }
            history.steps += 1;
            guarded_step(&mut params, &mut opt, acc, batch_loss, history.steps)?;
            losses.push(batch_loss);
        }
        let (eval_report, mode_eval) = match eval {
            Some(e) => e.run(&params)?,
            None => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            l_act: None,
            l_anc: None,
            bin_means: Vec::new(),
            inter_weights: Vec::new(),
            eval: eval_report,
            mode_eval,
        });
    }
    Ok((params, history))
}
