//! Positional bias measurements: accuracy sweeps over gold positions, the
//! two-hop placement grid, token-level divergence profiles, response
//! perplexity and attention mass on the gold document.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::DistillRecord;
use crate::error::{Error, Result};
use crate::model::{attention_trace, greedy_decode, teacher_force_logits, ModelParams};
use crate::prob::{cross_entropy, per_step_kl};
use crate::tasks::{position_configs, tokens, GoldPositions, HopMode, Instance, PromptLayout, ReasoningInstance, RetrievalInstance};
use crate::trainer::answer_after_marker;

/// Decoding budget: the reference response plus one token of slack.
pub fn decode_budget(instance: &Instance) -> usize {
    match instance {
        Instance::Retrieval(x) => x.gold_response().len() + 1,
        Instance::Reasoning(x) => x.gold_trajectory().len() + 1,
    }
}

/// A decoded response is correct when the answer follows the answer marker.
pub fn is_correct(instance: &Instance, decoded: &[usize]) -> bool {
    let answer = match instance {
        Instance::Retrieval(x) => &x.answer,
        Instance::Reasoning(x) => &x.answer,
    };
    answer_after_marker(decoded, tokens::ANS, answer)
}

fn decode_correct(model: &ModelParams, instance: &Instance, layout: &PromptLayout) -> Result<bool> {
    let out = greedy_decode(model, &layout.tokens, decode_budget(instance), tokens::EOS)?;
    Ok(is_correct(instance, &out.tokens))
}

/// Accuracy per gold position with its summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub positions: Vec<GoldPositions>,
    pub accuracy: Vec<f64>,
    pub avg: f64,
    /// `max − min` over positions.
    pub gap: f64,
    /// First evaluated position minus the minimum.
    pub gap_first_minus_min: f64,
    pub n_eval: usize,
    pub seed: u64,
}

impl PositionReport {
    pub fn from_accuracy(positions: Vec<GoldPositions>, accuracy: Vec<f64>, n_eval: usize, seed: u64) -> Result<Self> {
        if accuracy.is_empty() || positions.len() != accuracy.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions for {} accuracies",
                positions.len(),
                accuracy.len()
            )));
        }
        let max = accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            avg: accuracy.iter().sum::<f64>() / accuracy.len() as f64,
            gap: max - min,
            gap_first_minus_min: accuracy[0] - min,
            positions,
            accuracy,
            n_eval,
            seed,
        })
    }

    /// Accuracy at a single retrieval position, if evaluated.
    pub fn at(&self, position: usize) -> Option<f64> {
        self.positions
            .iter()
            .position(|p| *p == GoldPositions::Single(position))
            .map(|i| self.accuracy[i])
    }

    /// Mean accuracy over every evaluated position except `excluded`.
    pub fn mean_excluding(&self, excluded: GoldPositions) -> f64 {
        let rest: Vec<f64> = self
            .positions
            .iter()
            .zip(&self.accuracy)
            .filter(|(p, _)| **p != excluded)
            .map(|(_, a)| *a)
            .collect();
        rest.iter().sum::<f64>() / rest.len().max(1) as f64
    }

    /// One `position,accuracy` row per evaluated cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,accuracy\n");
        for (p, a) in self.positions.iter().zip(&self.accuracy) {
            let _ = writeln!(out, "{},{a}", position_label(p));
        }
        out
    }
}

fn position_label(p: &GoldPositions) -> String {
    match p {
        GoldPositions::Single(i) => i.to_string(),
        GoldPositions::Pair(i, j) => format!("{i}-{j}"),
    }
}

/// Greedy-decoding accuracy with the gold document at each of `positions`.
pub fn positional_accuracy(
    model: &ModelParams,
    instances: &[RetrievalInstance],
    positions: &[usize],
    seed: u64,
) -> Result<PositionReport> {
    if instances.is_empty() || positions.len() < 2 {
        return Err(Error::InvalidInput("need at least one instance and two positions".into()));
    }
    let mut accuracy = Vec::with_capacity(positions.len());
    for &pos in positions {
        let mut hits = 0usize;
        for x in instances {
            let layout = x.arrange(pos)?;
            hits += usize::from(decode_correct(model, &Instance::Retrieval(x.clone()), &layout)?);
        }
        accuracy.push(hits as f64 / instances.len() as f64);
    }
    PositionReport::from_accuracy(
        positions.iter().map(|&p| GoldPositions::Single(p)).collect(),
        accuracy,
        instances.len(),
        seed,
    )
}

/// Accuracy over explicit 1-based hop pairs.
pub fn pair_accuracy(
    model: &ModelParams,
    instances: &[ReasoningInstance],
    pairs: &[(usize, usize)],
    seed: u64,
) -> Result<PositionReport> {
    if instances.is_empty() || pairs.is_empty() {
        return Err(Error::InvalidInput("need at least one instance and one pair".into()));
    }
    let mut accuracy = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let mut hits = 0usize;
        for x in instances {
            let layout = x.arrange_two_hop(i, j)?;
            hits += usize::from(decode_correct(model, &Instance::Reasoning(x.clone()), &layout)?);
        }
        accuracy.push(hits as f64 / instances.len() as f64);
    }
    PositionReport::from_accuracy(
        pairs.iter().map(|&(i, j)| GoldPositions::Pair(i, j)).collect(),
        accuracy,
        instances.len(),
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: HopMode,
    pub report: PositionReport,
}

/// Per-mode accuracy over the placement grid and the spread across all
/// cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningReport {
    pub modes: Vec<ModeReport>,
    /// `max − min` over every cell of every mode.
    pub cross_mode_gap: f64,
    pub avg: f64,
}

impl ReasoningReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,pre,post,accuracy\n");
        for m in &self.modes {
            for (p, a) in m.report.positions.iter().zip(&m.report.accuracy) {
                if let GoldPositions::Pair(i, j) = p {
                    let _ = writeln!(out, "{},{i},{j},{a}", m.mode.name());
                }
            }
        }
        out
    }
}

/// Evaluates the connected, disconnected and reversed grids for window
/// size `n`. Grid pairs are converted to 1-based slots.
pub fn reasoning_mode_eval(
    model: &ModelParams,
    instances: &[ReasoningInstance],
    n: usize,
    seed: u64,
) -> Result<ReasoningReport> {
    if let Some(x) = instances.iter().find(|x| x.n_docs() != n) {
        return Err(Error::InvalidInput(format!("instance {} has {} documents, grid is for {n}", x.id, x.n_docs())));
    }
    let mut modes = Vec::with_capacity(HopMode::ALL.len());
    for mode in HopMode::ALL {
        let pairs: Vec<(usize, usize)> = position_configs(mode, n)?.iter().map(|&(i, j)| (i + 1, j + 1)).collect();
        modes.push(ModeReport {
            mode,
            report: pair_accuracy(model, instances, &pairs, seed)?,
        });
    }
    let cells: Vec<f64> = modes.iter().flat_map(|m| m.report.accuracy.iter().copied()).collect();
    let max = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = cells.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ReasoningReport {
        cross_mode_gap: max - min,
        avg: cells.iter().sum::<f64>() / cells.len() as f64,
        modes,
    })
}

/// Per-token divergence between the teacher's distributions under the
/// advantaged and a trivial prompt, teacher-forced along the advantaged
/// response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftProfile {
    pub instance_id: u64,
    pub trivial_position: usize,
    pub values: Vec<f64>,
    pub max_index: usize,
    pub max_value: f64,
    pub median: f64,
}

impl ShiftProfile {
    pub fn from_values(instance_id: u64, trivial_position: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let max_index = crate::prob::argmax(&values);
        Ok(Self {
            instance_id,
            trivial_position,
            max_index,
            max_value: values[max_index],
            median: median(&values),
            values,
        })
    }

    /// `max / median`; infinite when the median is zero and the max is not.
    pub fn concentration(&self) -> f64 {
        if self.median > 0.0 {
            self.max_value / self.median
        } else if self.max_value > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Profile of the `trivial_index`-th trivial prompt of `record`.
pub fn token_shift_profile(teacher: &ModelParams, record: &DistillRecord, trivial_index: usize) -> Result<ShiftProfile> {
    let trivial = record.trivial_prompts.get(trivial_index).ok_or_else(|| {
        Error::InvalidInput(format!(
            "trivial index {trivial_index} of {}",
            record.trivial_prompts.len()
        ))
    })?;
    let position = match trivial.gold_positions {
        GoldPositions::Single(p) => p,
        GoldPositions::Pair(p, _) => p,
    };
    let values = shift_values(teacher, &record.adv_prompt, trivial, &record.adv_response)?;
    ShiftProfile::from_values(record.instance_id, position, values)
}

/// Per-step `KL(teacher | adv ‖ teacher | other)` along `response`.
pub fn shift_values(
    teacher: &ModelParams,
    adv: &PromptLayout,
    other: &PromptLayout,
    response: &[usize],
) -> Result<Vec<f64>> {
    let p = teacher_force_logits(teacher, &adv.tokens, response)?;
    let q = teacher_force_logits(teacher, &other.tokens, response)?;
    per_step_kl(&p, &q)
}

/// `exp` of the mean token negative log-likelihood of `response`.
pub fn response_ppl(model: &ModelParams, prompt: &PromptLayout, response: &[usize]) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let logits = teacher_force_logits(model, &prompt.tokens, response)?;
    let mask = vec![true; response.len()];
    Ok(cross_entropy(&logits, response, &mask)?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoint {
    pub position: usize,
    /// Mean attention mass on the gold document from the final prompt token.
    pub gold_mass: f64,
}

/// Gold-document attention mass per gold position, averaged over instances.
pub fn attention_report(
    model: &ModelParams,
    instances: &[RetrievalInstance],
    positions: &[usize],
) -> Result<Vec<AttentionPoint>> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("no instances".into()));
    }
    positions
        .iter()
        .map(|&pos| {
            let mut total = 0.0;
            for x in instances {
                let layout = x.arrange(pos)?;
                total += attention_trace(model, &layout)?[pos - 1];
            }
            Ok(AttentionPoint {
                position: pos,
                gold_mass: total / instances.len() as f64,
            })
        })
        .collect()
}

/// Mean and population standard deviation of a metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-position and summary statistics over reports from several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub positions: Vec<GoldPositions>,
    pub accuracy: Vec<MeanStd>,
    pub avg: MeanStd,
    pub gap: MeanStd,
    pub seeds: Vec<u64>,
}

pub fn summarize(reports: &[PositionReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports".into()))?;
    if reports.iter().any(|r| r.positions != first.positions) {
        return Err(Error::InvalidInput("reports cover different positions".into()));
    }
    let accuracy = (0..first.positions.len())
        .map(|i| MeanStd::of(&reports.iter().map(|r| r.accuracy[i]).collect::<Vec<_>>()))
        .collect();
    Ok(SeedSummary {
        positions: first.positions.clone(),
        accuracy,
        avg: MeanStd::of(&reports.iter().map(|r| r.avg).collect::<Vec<_>>()),
        gap: MeanStd::of(&reports.iter().map(|r| r.gap).collect::<Vec<_>>()),
        seeds: reports.iter().map(|r| r.seed).collect(),
    })
}
