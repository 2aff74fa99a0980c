//! Probability primitives: softmax, KL divergence, and the masked sequence
//! losses every distillation objective is built from.
//!
//! These are plain (non-differentiable) evaluations. The graph versions in
//! [`crate::autograd`] compute the same quantities with gradients; tests
//! cross-check the two.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, softmax_into};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to student probabilities inside `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ p = 1` for a valid [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// `KL(p ‖ q) = Σ p_i (ln p_i − ln q_i)` in nats, with `0·ln 0 = 0` and `q`
/// floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence over {} vs {} outcomes",
            p.len(),
            q.len()
        )));
    }
    let kl = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>();
    // rounding can leave tiny negatives when p == q
    Ok(kl.max(0.0))
}

fn masked_steps(rows: usize, mask: &[bool]) -> Result<Vec<usize>> {
    if mask.len() != rows {
        return Err(Error::Shape(format!("mask of {} for {rows} steps", mask.len())));
    }
    let steps: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if steps.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(steps)
}

/// Per-step KL between teacher and student distributions (both given as
/// logits), one value per row.
pub fn per_step_kl(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<Vec<f64>> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    (0..teacher_logits.rows())
        .map(|r| {
            kl_divergence(
                &softmax(teacher_logits.row(r))?,
                &softmax(student_logits.row(r))?,
            )
        })
        .collect()
}

/// Mean over masked steps of `KL(softmax(teacher_t) ‖ softmax(student_t))`.
pub fn sequence_kl(teacher_logits: &Tensor, student_logits: &Tensor, mask: &[bool]) -> Result<f64> {
    let steps = masked_steps(teacher_logits.rows(), mask)?;
    let per_step = per_step_kl(teacher_logits, student_logits)?;
    Ok(steps.iter().map(|&r| per_step[r]).sum::<f64>() / steps.len() as f64)
}

/// Mean over masked steps of `-ln softmax(logits_t)[target_t]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let steps = masked_steps(logits.rows(), mask)?;
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} steps",
            targets.len(),
            logits.rows()
        )));
    }
    let vocab = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index { token: bad, vocab });
    }
    Ok(steps
        .iter()
        .map(|&r| log_sum_exp(logits.row(r)) - logits.row(r)[targets[r]])
        .sum::<f64>()
        / steps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p.probs()[0] - 0.25).abs() < 1e-15);
        assert!((p.probs()[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap(), 0.0);
        // oracle: direct summation written out by hand
        let expected = 0.5 * (2f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.25, 0.75])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.143_841_036_225_890_1).abs() < 1e-9);
        let got = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.9, 0.1])).unwrap();
        assert!((got - (1.0f64 / 0.9).ln()).abs() < 1e-12);
        assert!((got - 0.105_360_515_657_826_3).abs() < 1e-9);
    }

    #[test]
    fn kl_length_mismatch_is_shape_error() {
        let r = kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn sequence_kl_examples() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(sequence_kl(&t, &t, &[true]).unwrap(), 0.0);
        let s = Tensor::new(vec![1, 2], vec![1f64.ln(), 3f64.ln()]).unwrap();
        let got = sequence_kl(&t, &s, &[true]).unwrap();
        assert!((got - 0.143_841_036_225_890_1).abs() < 1e-9);

        let t2 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, -5.0]).unwrap();
        let s2 = Tensor::new(vec![2, 2], vec![1f64.ln(), 3f64.ln(), -3.0, 4.0]).unwrap();
        assert_eq!(sequence_kl(&t2, &s2, &[true, false]).unwrap(), got);
        assert!(matches!(
            sequence_kl(&t2, &s2, &[false, false]),
            Err(Error::EmptyResponse)
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[2, 4]);
        let ce = cross_entropy(&uniform, &[0, 3], &[true, true]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        let mut sharp = vec![0.0; 4];
        sharp[2] = 20.0;
        let t = Tensor::new(vec![1, 4], sharp).unwrap();
        assert!(cross_entropy(&t, &[2], &[true]).unwrap() < 1e-8);

        let two = Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.5, 0.1]).unwrap();
        let a = cross_entropy(&Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap(), &[1], &[true]).unwrap();
        let b = cross_entropy(&Tensor::new(vec![1, 2], vec![1.5, 0.1]).unwrap(), &[0], &[true]).unwrap();
        let both = cross_entropy(&two, &[1, 0], &[true, true]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);

        assert!(matches!(
            cross_entropy(&uniform, &[0, 4], &[true, true]),
            Err(Error::Index { token: 4, vocab: 4 })
        ));
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_map(|raw| {
            let raw: Vec<f64> = raw.iter().map(|v| v + 1e-6).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in simplex(6), q in simplex(6)) {
            let (p, q) = (pv(&p), pv(&q));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.probs().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
        }
    }
}
