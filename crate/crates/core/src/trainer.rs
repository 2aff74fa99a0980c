//! Pieces shared by every trainer: batched cross-entropy gradients, the
//! guarded optimizer step, and answer matching.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{teacher_forced_graph, ModelParams};
use crate::optim::{clip_grad_norm, Optimizer};

/// Gradient-norm ceiling applied before every update.
pub const CLIP_NORM: f64 = 1.0;

/// Adds `scale · src` into `acc`, allocating `acc` on first use.
pub(crate) fn accumulate(acc: &mut Vec<Vec<f64>>, src: &[Vec<f64>], scale: f64) {
    if acc.is_empty() {
        acc.extend(src.iter().map(|g| vec![0.0; g.len()]));
    }
    for (a, s) in acc.iter_mut().zip(src) {
        for (x, y) in a.iter_mut().zip(s) {
            *x += scale * y;
        }
    }
}

/// Mean teacher-forced cross-entropy over `(prompt, response)` pairs and its
/// gradient, in canonical parameter order.
pub fn cross_entropy_gradients(
    params: &ModelParams,
    examples: &[(&[usize], &[usize])],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / examples.len() as f64;
    let mut total = 0.0;
    let mut acc = Vec::new();
    for (prompt, response) in examples {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let logits = teacher_forced_graph(&mut g, params, &bound, prompt, response)?;
        let mask = vec![true; response.len()];
        let loss = g.cross_entropy(logits, response, &mask)?;
        total += g.value(loss).item();
        let mut grads = g.backward(loss)?;
        accumulate(&mut acc, &bound.gradients(&mut grads, &g), scale);
    }
    Ok((total * scale, acc))
}

/// Clips, checks finiteness, and applies one optimizer update.
pub(crate) fn guarded_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    mut grads: Vec<Vec<f64>>,
    loss: f64,
    step: usize,
) -> Result<()> {
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::divergence(
            format!("non-finite loss or gradient at step {step} (loss {loss})"),
            Some(&*params),
        ));
    }
    clip_grad_norm(&mut grads, CLIP_NORM);
    optimizer.step(&mut params.tensors_mut(), &grads)?;
    if !params.is_finite() {
        return Err(Error::divergence(format!("non-finite parameters after step {step}"), None));
    }
    Ok(())
}

/// Contiguous containment of `needle` in `haystack`; an empty needle never
/// matches.
pub fn contains_subsequence(haystack: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// True when `answer` appears in `decoded` after the first `marker` token.
pub fn answer_after_marker(decoded: &[usize], marker: usize, answer: &[usize]) -> bool {
    decoded
        .iter()
        .position(|&t| t == marker)
        .is_some_and(|p| contains_subsequence(&decoded[p + 1..], answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::OptimizerKind;

    #[test]
    fn subsequence_matching() {
        assert!(contains_subsequence(&[6, 40, 7], &[40]));
        assert!(contains_subsequence(&[1, 2, 3], &[2, 3]));
        assert!(!contains_subsequence(&[1, 3, 2], &[2, 3]));
        assert!(!contains_subsequence(&[1], &[]));
        assert!(answer_after_marker(&[8, 40, 6, 41, 7], 6, &[41]));
        assert!(!answer_after_marker(&[8, 41, 6, 40, 7], 6, &[41]));
        assert!(!answer_after_marker(&[41], 6, &[41]));
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 2).unwrap();
        let a: (&[usize], &[usize]) = (&[1, 2, 3], &[4, 5]);
        let b: (&[usize], &[usize]) = (&[1, 9], &[7, 3, 2]);
        let (la, ga) = cross_entropy_gradients(&p, &[a]).unwrap();
        let (lb, gb) = cross_entropy_gradients(&p, &[b]).unwrap();
        let (lab, gab) = cross_entropy_gradients(&p, &[a, b]).unwrap();
        assert!((lab - (la + lb) / 2.0).abs() < 1e-12);
        for ((x, y), z) in ga.iter().flatten().zip(gb.iter().flatten()).zip(gab.iter().flatten()) {
            assert!((z - (x + y) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..Default::default()
        };
        let mut p = ModelParams::init(&cfg, 2).unwrap();
        let grads: Vec<Vec<f64>> = p.named_tensors().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3);
        let r = guarded_step(&mut p, &mut opt, grads, f64::NAN, 3);
        assert!(matches!(r, Err(Error::Divergence { snapshot: Some(_), .. })));
    }
}
