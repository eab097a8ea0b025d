//! Plain slice functions shared by the tape and by non-differentiable code
//! paths (scoring, metrics, tests).

use crate::error::{Error, Result};

use super::{DIST_TOL, NORM_EPS};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `exp(a) / (exp(a) + exp(b))` with max-subtraction.
///
/// The exact value always lies strictly inside `(0, 1)`; results that would
/// round onto an endpoint are returned as the nearest interior float.
pub fn pair_softmax(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    (ea / (ea + eb)).clamp(f64::from_bits(1), 1.0 - f64::EPSILON / 2.0)
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    x.iter_mut().for_each(|v| *v /= total);
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn log_softmax_at(x: &[f64], i: usize) -> f64 {
    x[i] - log_sum_exp(x)
}

/// `dot(a, b) / (‖a‖·‖b‖ + ε)`; zero vectors give 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    Ok(dot(a, b) / (norm(a) * norm(b) + NORM_EPS))
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: target,
            len: logits.len(),
        });
    }
    Ok(-log_softmax_at(logits, target))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// `Σ p ln(p / q)` with `0 ln(0/·) = 0` and `q` floored at `ε`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(NORM_EPS) / qi.max(NORM_EPS)).ln())
        .sum()
}
