//! Dense-vector primitives, activations, losses and the finite-difference
//! gradient oracle.
//!
//! Everything here works in `f64`. Transcendentals go through `libm` so that
//! results do not depend on the platform's C math library.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const EPS_NORM: f64 = 1e-12;

/// The one random generator used throughout: ChaCha with 8 rounds, seeded
/// from a `u64` through `SeedableRng::seed_from_u64`. Its output stream is
/// fixed by the algorithm, so the same seed yields the same corpus on every
/// platform.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw `dim` independent standard normal values.
pub fn standard_normal_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Logistic function, evaluated through `exp(-|x|)` so neither tail
/// overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = libm::exp(-libm::fabs(x));
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Inner product accumulated left to right.
///
/// Panics when the lengths differ; callers validate shapes at their own
/// boundary and report a proper error there.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: dimension mismatch");
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `y += scale * x`
#[inline]
pub fn axpy(scale: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy: dimension mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let aa = dot(a, a);
    let bb = dot(b, b);
    if !(aa > EPS_NORM * EPS_NORM && bb > EPS_NORM * EPS_NORM) {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity"));
    }
    // one square root of the product keeps cos(v, v) exactly 1
    Ok((dot(a, b) / libm::sqrt(aa * bb)).clamp(-1.0, 1.0))
}

/// Softmax cross-entropy of `logits` against class `target`.
///
/// Returns the loss and its gradient with respect to the logits
/// (`softmax(logits) - onehot(target)`).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(
        target < logits.len(),
        "softmax_cross_entropy: target out of range"
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let total: f64 = probs.iter().sum();
    let log_total = libm::log(total);
    let loss = log_total - (logits[target] - max);
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs[target] -= 1.0;
    (loss, probs)
}

/// Central-difference gradient check.
///
/// Perturbs every coordinate of `params` by `±h`, and returns the largest
/// `|g_fd - g_an| / max(1, |g_fd|, |g_an|)` over coordinates.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(alloc::format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        probe[k] = params[k] + h;
        let plus = f(&probe);
        probe[k] = params[k] - h;
        let minus = f(&probe);
        probe[k] = params[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(k));
        }
        let fd = (plus - minus) / (2.0 * h);
        let an = analytic[k];
        let rel = libm::fabs(fd - an) / 1f64.max(libm::fabs(fd)).max(libm::fabs(an));
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Mean of a slice; `0.0` when empty.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fractional ranks (1-based, ties share the average rank).
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the mean of start+1..=end
        let shared = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = shared;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with tie-averaged ranks. `None` when either
/// side is constant (correlation undefined) or fewer than two points.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "spearman: length mismatch");
    if a.len() < 2 {
        return None;
    }
    let ra = fractional_ranks(a);
    let rb = fractional_ranks(b);
    let ma = mean(&ra);
    let mb = mean(&rb);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / libm::sqrt(va * vb))
}
