//! Pre-training that plants a position preference in a fresh model.
//!
//! An optional first stage trains on repeated random sequences (predict the
//! second copy), which gives the model a content-addressed lookup circuit
//! that retrieval prompts alone teach only slowly.
//!
//! Retrieval prompts put the gold document in slot 1 with probability
//! `p_sink` and in a uniformly chosen slot of `{2..n}` otherwise. Reasoning
//! prompts put the hop documents at `(n−1, n)` with probability `p_sink` and
//! at a uniformly chosen ordered pair otherwise. Training stops once
//! accuracy at the favoured layout reaches `threshold` and, if
//! `other_floor` is set, accuracy at a non-favoured layout reaches it too.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, teacher_force_logits, ModelParams};
use crate::prob::argmax;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tasks::{derive_seed, tokens, Instance, PromptLayout, TaskVocab};
use crate::eval::{decode_budget, is_correct};
use crate::trainer::{cross_entropy_gradients, guarded_step};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    /// Probability of the favoured layout for a training example.
    pub p_sink: f64,
    /// Favoured-layout eval accuracy that ends training.
    pub threshold: f64,
    pub max_steps: usize,
    /// Steps trained before the stopping rule is consulted.
    pub min_steps: usize,
    /// Eval accuracy at a seeded non-favoured layout that must also be
    /// reached before stopping; zero skips the check.
    pub other_floor: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            p_sink: 0.9,
            threshold: 0.95,
            max_steps: 6000,
            min_steps: 0,
            other_floor: 0.0,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_sink) {
            return Err(Error::Config(format!("p_sink {} outside [0, 1]", self.p_sink)));
        }
        if !(0.0..=1.0).contains(&self.other_floor) {
            return Err(Error::Config(format!("other_floor {} outside [0, 1]", self.other_floor)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size, eval_every and max_steps must be positive".into()));
        }
        if self.min_steps > self.max_steps {
            return Err(Error::Config("min_steps exceeds max_steps".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Copy-sequence pre-training that precedes bias induction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    /// Zero disables the stage.
    pub max_steps: usize,
    /// Held-out copy accuracy that ends the stage.
    pub target_accuracy: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            target_accuracy: 0.95,
            min_len: 8,
            max_len: 24,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_every: 25,
            seed: 0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!("copy lengths {}..={} invalid", self.min_len, self.max_len)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("warm-up batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("warm-up learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupHistory {
    pub steps: usize,
    /// Held-out copy accuracy at each check.
    pub accuracy: Vec<(usize, f64)>,
    pub reached_target: bool,
}

/// `[BOS, x_1..x_L, x_1]` followed by the target `x_2..x_L`.
fn copy_example(vocab: &TaskVocab, cfg: &WarmupConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let ent = vocab.entities();
    let x: Vec<usize> = (0..len).map(|_| rng.gen_range(ent.clone())).collect();
    let mut prompt = Vec::with_capacity(len + 2);
    prompt.push(tokens::BOS);
    prompt.extend_from_slice(&x);
    prompt.push(x[0]);
    (prompt, x[1..].to_vec())
}

/// Teacher-forced next-token accuracy over the copied halves.
pub fn copy_accuracy(params: &ModelParams, examples: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (prompt, target) in examples {
        let logits = teacher_force_logits(params, prompt, target)?;
        for (r, &t) in target.iter().enumerate() {
            hits += usize::from(argmax(logits.row(r)) == t);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Trains on copy sequences until held-out copy accuracy reaches the
/// target or `max_steps` pass. Falling short is not an error.
pub fn copy_warmup(init: &ModelParams, vocab: &TaskVocab, cfg: &WarmupConfig) -> Result<(ModelParams, WarmupHistory)> {
    cfg.validate()?;
    let mut params = init.clone();
    let mut history = WarmupHistory {
        steps: 0,
        accuracy: Vec::new(),
        reached_target: false,
    };
    if cfg.max_steps == 0 {
        return Ok((params, history));
    }
    let mut held_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xc0, 1]));
    let held: Vec<_> = (0..32).map(|_| copy_example(vocab, cfg, &mut held_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xc0, 2]));
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate);
    for step in 1..=cfg.max_steps {
        let batch: Vec<_> = (0..cfg.batch_size).map(|_| copy_example(vocab, cfg, &mut rng)).collect();
        let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
        let (loss, grads) = cross_entropy_gradients(&params, &pairs)?;
        guarded_step(&mut params, &mut opt, grads, loss, step)?;
        history.steps = step;
        if step % cfg.eval_every == 0 {
            let acc = copy_accuracy(&params, &held)?;
            log::info!("copy warm-up step {step}: loss {loss:.4}, held-out accuracy {acc:.3}");
            history.accuracy.push((step, acc));
            if acc >= cfg.target_accuracy {
                history.reached_target = true;
                break;
            }
        }
    }
    Ok((params, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionPoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub loss: f64,
    pub favoured_accuracy: f64,
    /// Present when the stopping rule has a non-favoured floor.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub other_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionHistory {
    pub points: Vec<InductionPoint>,
    pub steps: usize,
    pub reached_threshold: bool,
}

/// Prompt and target response with the gold content at the favoured layout.
pub fn favoured_example(instance: &Instance) -> Result<(PromptLayout, Vec<usize>)> {
    match instance {
        Instance::Retrieval(x) => Ok((x.arrange(1)?, x.gold_response())),
        Instance::Reasoning(x) => Ok((x.advantaged_layout()?, x.gold_trajectory())),
    }
}

fn sample_example(instance: &Instance, p_sink: f64, rng: &mut ChaCha8Rng) -> Result<(PromptLayout, Vec<usize>)> {
    let favoured = rng.gen_bool(p_sink);
    match instance {
        Instance::Retrieval(x) => {
            let n = x.n_docs();
            let pos = if favoured { 1 } else { rng.gen_range(2..=n) };
            Ok((x.arrange(pos)?, x.gold_response()))
        }
        Instance::Reasoning(x) => {
            let n = x.n_docs();
            if favoured {
                return Ok((x.advantaged_layout()?, x.gold_trajectory()));
            }
            loop {
                let (i, j) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
                if i != j && (i, j) != (n - 1, n) {
                    return Ok((x.arrange_two_hop(i, j)?, x.gold_trajectory()));
                }
            }
        }
    }
}

/// Accuracy of greedy decoding at the favoured layout.
pub fn favoured_accuracy(params: &ModelParams, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("no evaluation instances".into()));
    }
    let mut hits = 0usize;
    for x in instances {
        let (layout, _) = favoured_example(x)?;
        let out = greedy_decode(params, &layout.tokens, decode_budget(x), tokens::EOS)?;
        hits += usize::from(is_correct(x, &out.tokens));
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Accuracy of greedy decoding at one non-favoured layout per instance,
/// drawn from the non-favoured training distribution seeded by
/// `(seed, instance id)`.
pub fn other_accuracy(params: &ModelParams, instances: &[Instance], seed: u64) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("no evaluation instances".into()));
    }
    let mut hits = 0usize;
    for x in instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, x.id(), 0x0f]));
        let (layout, _) = sample_example(x, 0.0, &mut rng)?;
        let out = greedy_decode(params, &layout.tokens, decode_budget(x), tokens::EOS)?;
        hits += usize::from(is_correct(x, &out.tokens));
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Trains `init` on skewed placements until the favoured layout is solved.
/// Returns [`Error::InductionFailure`] if `max_steps` pass first.
pub fn induce_bias(
    init: &ModelParams,
    train: &[Instance],
    eval: &[Instance],
    cfg: &InductionConfig,
) -> Result<(ModelParams, InductionHistory)> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InvalidInput("induction needs training and evaluation instances".into()));
    }
    let mut params = init.clone();
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x1d]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut history = InductionHistory {
        points: Vec::new(),
        steps: 0,
        reached_threshold: false,
    };
    let mut window_loss = 0.0;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (layout, response) = sample_example(&train[order[cursor]], cfg.p_sink, &mut rng)?;
            batch.push((layout.tokens, response));
            cursor += 1;
        }
        let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
        let (loss, grads) = cross_entropy_gradients(&params, &pairs)?;
        guarded_step(&mut params, &mut opt, grads, loss, step)?;
        window_loss += loss;
        history.steps = step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let acc = favoured_accuracy(&params, eval)?;
            let other = if cfg.other_floor > 0.0 {
                Some(other_accuracy(&params, eval, cfg.seed)?)
            } else {
                None
            };
            let since = step - history.points.last().map_or(0, |p| p.step);
            log::info!(
                "induction step {step}: loss {:.4}, favoured accuracy {acc:.3}{}",
                window_loss / since as f64,
                other.map_or(String::new(), |o| format!(", other {o:.3}"))
            );
            history.points.push(InductionPoint {
                step,
                loss: window_loss / since as f64,
                favoured_accuracy: acc,
                other_accuracy: other,
            });
            window_loss = 0.0;
            if step >= cfg.min_steps && acc >= cfg.threshold && other.is_none_or(|o| o >= cfg.other_floor) {
                history.reached_threshold = true;
                return Ok((params, history));
            }
        }
    }
    let last = history.points.last().map_or(0.0, |p| p.favoured_accuracy);
    let other = history.points.last().and_then(|p| p.other_accuracy).unwrap_or(0.0);
    Err(Error::InductionFailure(format!(
        "stopping rule unmet after {} steps: favoured accuracy {last:.3} (threshold {}), other accuracy {other:.3} (floor {}); history {}",
        cfg.max_steps,
        cfg.threshold,
        cfg.other_floor,
        serde_json::to_string(&history.points)?
    )))
}

/// Copy warm-up followed by bias induction, the full teacher recipe.
pub fn pretrain_teacher(
    init: &ModelParams,
    vocab: &TaskVocab,
    warmup: &WarmupConfig,
    induce: &InductionConfig,
    train: &[Instance],
    eval: &[Instance],
) -> Result<(ModelParams, WarmupHistory, InductionHistory)> {
    let (warm, warm_history) = copy_warmup(init, vocab, warmup)?;
    let (teacher, history) = induce_bias(&warm, train, eval, induce)?;
    Ok((teacher, warm_history, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{make_reasoning_instance, make_retrieval_instance, GoldPositions};

    fn vocab() -> TaskVocab {
        TaskVocab::new(64).unwrap()
    }

    #[test]
    fn favoured_layouts() {
        let r = Instance::Retrieval(make_retrieval_instance(0, 8, 1, &vocab()).unwrap());
        assert_eq!(favoured_example(&r).unwrap().0.gold_positions, GoldPositions::Single(1));
        let q = Instance::Reasoning(make_reasoning_instance(0, 8, 1, &vocab()).unwrap());
        assert_eq!(favoured_example(&q).unwrap().0.gold_positions, GoldPositions::Pair(7, 8));
    }

    #[test]
    fn placement_follows_p_sink() {
        let r = Instance::Retrieval(make_retrieval_instance(0, 8, 1, &vocab()).unwrap());
        let q = Instance::Reasoning(make_reasoning_instance(0, 8, 1, &vocab()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_example(&r, 1.0, &mut rng).unwrap().0.gold_positions, GoldPositions::Single(1));
            assert_ne!(sample_example(&r, 0.0, &mut rng).unwrap().0.gold_positions, GoldPositions::Single(1));
            assert_ne!(sample_example(&q, 0.0, &mut rng).unwrap().0.gold_positions, GoldPositions::Pair(7, 8));
        }
        let hits = (0..2000)
            .filter(|_| sample_example(&r, 0.9, &mut rng).unwrap().0.gold_positions == GoldPositions::Single(1))
            .count();
        assert!((1700..1900).contains(&hits), "{hits}");
    }

    #[test]
    fn copy_examples_repeat_the_sequence() {
        let cfg = WarmupConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (prompt, target) = copy_example(&vocab(), &cfg, &mut rng);
            let len = prompt.len() - 2;
            assert!((cfg.min_len..=cfg.max_len).contains(&len));
            assert_eq!(prompt[0], tokens::BOS);
            assert_eq!(prompt[len + 1], prompt[1]);
            assert_eq!(target, prompt[2..=len].to_vec());
        }
    }

    #[test]
    fn disabled_warmup_is_identity() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        let w = WarmupConfig {
            max_steps: 0,
            ..Default::default()
        };
        let (q, h) = copy_warmup(&p, &vocab(), &w).unwrap();
        assert_eq!(q, p);
        assert_eq!(h.steps, 0);
    }

    #[test]
    fn config_validation() {
        assert!(InductionConfig::default().validate().is_ok());
        let bad = [
            InductionConfig { p_sink: 1.5, ..Default::default() },
            InductionConfig { eval_every: 0, ..Default::default() },
            InductionConfig { min_steps: 10, max_steps: 5, ..Default::default() },
            InductionConfig { learning_rate: 0.0, ..Default::default() },
            InductionConfig { other_floor: -0.1, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        let w = WarmupConfig { min_len: 9, max_len: 8, ..Default::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn induction_needs_data() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert!(induce_bias(&p, &[], &[], &InductionConfig::default()).is_err());
    }

    #[test]
    fn unreachable_floor_fails_and_records_other_accuracy() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        let xs: Vec<Instance> = (0..4)
            .map(|i| Instance::Retrieval(make_retrieval_instance(i, 4, i, &vocab()).unwrap()))
            .collect();
        let induce = InductionConfig {
            threshold: 0.0,
            other_floor: 1.0,
            max_steps: 4,
            eval_every: 2,
            batch_size: 2,
            ..Default::default()
        };
        let err = induce_bias(&p, &xs, &xs, &induce).unwrap_err();
        assert!(matches!(err, Error::InductionFailure(ref m) if m.contains("floor 1")), "{err}");
        let open = InductionConfig { other_floor: 0.0, ..induce };
        let (_, h) = induce_bias(&p, &xs, &xs, &open).unwrap();
        assert_eq!(h.steps, 2);
        assert!(h.points.iter().all(|pt| pt.other_accuracy.is_none()));
    }

    #[test]
    fn other_layouts_avoid_the_favoured_one() {
        let p = ModelParams::init(&ModelConfig { d_model: 8, d_ff: 16, n_layers: 1, ..Default::default() }, 1).unwrap();
        let xs: Vec<Instance> = (0..3)
            .map(|i| Instance::Reasoning(make_reasoning_instance(i, 8, i, &vocab()).unwrap()))
            .collect();
        let a = other_accuracy(&p, &xs, 4).unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, other_accuracy(&p, &xs, 4).unwrap());
    }
}
