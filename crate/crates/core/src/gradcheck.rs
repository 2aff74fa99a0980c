//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};

/// Allowed range for the finite-difference step.
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

fn check_setup<F: FnMut(&[f64]) -> f64>(loss_fn: &mut F, params: &[f64], epsilon: f64) -> Result<()> {
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleUnusable(format!(
            "loss is not deterministic: {first} then {second}"
        )));
    }
    Ok(())
}

/// `(f(θ+ε e_i) − f(θ−ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    check_setup(&mut loss_fn, params, epsilon)?;
    Ok(central_differences(&mut loss_fn, params, &all, epsilon))
}

/// Same as [`finite_difference_grad`] restricted to selected coordinates.
pub fn finite_difference_grad_at<F>(
    mut loss_fn: F,
    params: &[f64],
    indices: &[usize],
    epsilon: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if let Some(&bad) = indices.iter().find(|&&i| i >= params.len()) {
        return Err(Error::InvalidInput(format!(
            "probe index {bad} of {} parameters",
            params.len()
        )));
    }
    check_setup(&mut loss_fn, params, epsilon)?;
    Ok(central_differences(&mut loss_fn, params, indices, epsilon))
}

fn central_differences<F: FnMut(&[f64]) -> f64>(
    loss_fn: &mut F,
    params: &[f64],
    indices: &[usize],
    epsilon: f64,
) -> Vec<f64> {
    let mut theta = params.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = theta[i];
            theta[i] = orig + epsilon;
            let plus = loss_fn(&theta);
            theta[i] = orig - epsilon;
            let minus = loss_fn(&theta);
            theta[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
