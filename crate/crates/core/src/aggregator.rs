//! The set aggregation head.
//!
//! For a set of member embeddings `V_1..V_n`:
//!
//! ```text
//! alpha_i = sigmoid(theta2 . V_i + b2)                  visual quality
//! V_m     = sum(alpha_i V_i) / sum(alpha_i)             anchor mean face
//! beta_i  = sigmoid(theta3 . [V_m : V_i] + b3)          content quality
//! gamma_i = alpha_i beta_i / sum_j(alpha_j beta_j)      recalibrated importance
//! V_d     = sum(gamma_i V_i)                            set descriptor
//! ```
//!
//! The concatenation puts the mean face first: `theta3[..D]` multiplies
//! `V_m`, `theta3[D..]` multiplies the member.
//!
//! Every sum over members runs in a canonical member order (lexicographic on
//! the embedding values), so permuting the input permutes `alpha`, `beta` and
//! `gamma` and leaves `V_d` unchanged bit for bit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid};

/// Guard on the weight sum of a weighted average.
pub const EPS_DEN: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Plain arithmetic mean of the members.
    Avg,
    /// Visual gate only: the descriptor is the mean face.
    MnV,
    /// Visual and content gates.
    MnVc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Avg, Mode::MnV, Mode::MnVc];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Avg => "avg",
            Mode::MnV => "mn-v",
            Mode::MnVc => "mn-vc",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Mode::Avg => 0,
            Mode::MnV => 1,
            Mode::MnVc => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Mode> {
        match code {
            0 => Some(Mode::Avg),
            1 => Some(Mode::MnV),
            2 => Some(Mode::MnVc),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Mode::Avg),
            "mn-v" => Ok(Mode::MnV),
            "mn-vc" => Ok(Mode::MnVc),
            other => Err(Error::Config(alloc::format!(
                "unknown mode {other:?} (expected avg, mn-v or mn-vc)"
            ))),
        }
    }
}

/// A non-empty set of equal-length, finite embeddings sharing one label.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSet {
    members: Vec<Vec<f64>>,
    identity: u32,
}

impl FaceSet {
    pub fn new(members: Vec<Vec<f64>>, identity: u32) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Degenerate("face set must have at least one member"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Degenerate("zero-dimensional embedding"));
        }
        for m in &members {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Degenerate("non-finite embedding value"));
            }
        }
        Ok(Self { members, identity })
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.members[i]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn identity(&self) -> u32 {
        self.identity
    }

    /// New set whose `i`-th member is `self.member(perm[i])`.
    pub fn permuted(&self, perm: &[usize]) -> FaceSet {
        assert_eq!(perm.len(), self.len(), "permutation length");
        FaceSet {
            members: perm.iter().map(|&p| self.members[p].clone()).collect(),
            identity: self.identity,
        }
    }
}

/// Learnable parameters: the two gates and the set-wise classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub theta2: Vec<f64>,
    pub bias2: Option<f64>,
    /// Length `2 * dim`; the first half weighs the mean face.
    pub theta3: Vec<f64>,
    pub bias3: Option<f64>,
    /// Row-major `num_classes x dim`.
    pub classifier: Vec<f64>,
    pub num_classes: usize,
}

impl GateParams {
    pub fn zeros(dim: usize, num_classes: usize, gate_bias: bool) -> Self {
        let bias = gate_bias.then_some(0.0);
        Self {
            theta2: vec![0.0; dim],
            bias2: bias,
            theta3: vec![0.0; 2 * dim],
            bias3: bias,
            classifier: vec![0.0; num_classes * dim],
            num_classes,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta2.len()
    }

    pub fn has_bias(&self) -> bool {
        self.bias2.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.theta3.len() != 2 * dim {
            return Err(Error::DimensionMismatch {
                expected: 2 * dim,
                got: self.theta3.len(),
            });
        }
        if self.classifier.len() != self.num_classes * dim {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes * dim,
                got: self.classifier.len(),
            });
        }
        if self.bias2.is_some() != self.bias3.is_some() {
            return Err(Error::Config(
                "gate biases must be both on or both off".into(),
            ));
        }
        Ok(())
    }

    /// Parameters of the two gates, biases included when enabled. The
    /// classifier is training-only and not counted.
    pub fn gate_param_count(&self) -> usize {
        self.theta2.len()
            + self.theta3.len()
            + usize::from(self.bias2.is_some())
            + usize::from(self.bias3.is_some())
    }

    pub fn flat_len(&self) -> usize {
        self.gate_param_count() + self.classifier.len()
    }

    /// Flat view in the order `theta2, bias2, theta3, bias3, classifier`;
    /// disabled biases are skipped.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend_from_slice(&self.theta2);
        out.extend(self.bias2);
        out.extend_from_slice(&self.theta3);
        out.extend(self.bias3);
        out.extend_from_slice(&self.classifier);
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat), keeping this instance's shape.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::DimensionMismatch {
                expected: self.flat_len(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let dim = self.dim();
        self.theta2.copy_from_slice(take(dim));
        if let Some(b) = self.bias2.as_mut() {
            *b = take(1)[0];
        }
        self.theta3.copy_from_slice(take(2 * dim));
        if let Some(b) = self.bias3.as_mut() {
            *b = take(1)[0];
        }
        let n = self.classifier.len();
        self.classifier.copy_from_slice(take(n));
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_from_flat(flat)?;
        Ok(p)
    }

    pub fn classifier_row(&self, class: usize) -> &[f64] {
        let d = self.dim();
        &self.classifier[class * d..(class + 1) * d]
    }

    fn mean_half(&self) -> &[f64] {
        &self.theta3[..self.dim()]
    }

    fn member_half(&self) -> &[f64] {
        &self.theta3[self.dim()..]
    }

    fn check_set(&self, set: &FaceSet) -> Result<()> {
        self.validate()?;
        if set.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: set.dim(),
            });
        }
        Ok(())
    }
}

/// Forward result, including what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutput {
    pub v_d: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub v_m: Vec<f64>,
    pub mode: Mode,
    /// `sum(alpha)`, the mean-face denominator.
    pub alpha_sum: f64,
    /// `sum(alpha * beta)`, the descriptor denominator.
    pub weight_sum: f64,
    /// Canonical summation order over member indices.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationGradients {
    pub d_theta2: Vec<f64>,
    pub d_theta3: Vec<f64>,
    pub d_bias2: f64,
    pub d_bias3: f64,
    pub d_members: Vec<Vec<f64>>,
}

impl AggregationGradients {
    fn zeros(dim: usize, n: usize) -> Self {
        Self {
            d_theta2: vec![0.0; dim],
            d_theta3: vec![0.0; 2 * dim],
            d_bias2: 0.0,
            d_bias3: 0.0,
            d_members: vec![vec![0.0; dim]; n],
        }
    }
}

/// Member indices sorted lexicographically by embedding value.
pub fn canonical_order(set: &FaceSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (set.member(a), set.member(b));
        va.iter()
            .zip(vb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    order
}

fn sum_in_order(values: &[f64], order: &[usize]) -> f64 {
    order.iter().fold(0.0, |acc, &i| acc + values[i])
}

/// `sum_i (w_i / W) V_i` with `W = sum_i w_i`, both summed in `order`.
fn weighted_average(set: &FaceSet, weights: &[f64], order: &[usize]) -> Result<(Vec<f64>, f64)> {
    let total = sum_in_order(weights, order);
    if total.is_nan() || total <= EPS_DEN {
        return Err(Error::Degenerate(
            "weight sum below guard in weighted average",
        ));
    }
    let mut out = vec![0.0; set.dim()];
    for &i in order {
        axpy(weights[i] / total, set.member(i), &mut out);
    }
    Ok((out, total))
}

fn normalized(weights: &[f64], order: &[usize]) -> Vec<f64> {
    let total = sum_in_order(weights, order);
    weights.iter().map(|w| w / total).collect()
}

/// Visual quality score of every member, computed independently.
pub fn visual_quality(set: &FaceSet, params: &GateParams) -> Result<Vec<f64>> {
    params.check_set(set)?;
    let b = params.bias2.unwrap_or(0.0);
    Ok(set
        .members()
        .iter()
        .map(|v| sigmoid(dot(&params.theta2, v) + b))
        .collect())
}

/// Alpha-weighted mean of the members.
pub fn mean_face(set: &FaceSet, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            got: alpha.len(),
        });
    }
    weighted_average(set, alpha, &canonical_order(set)).map(|(v, _)| v)
}

/// Content quality of every member relative to the mean face `v_m`.
pub fn content_quality(set: &FaceSet, v_m: &[f64], params: &GateParams) -> Result<Vec<f64>> {
    params.check_set(set)?;
    if v_m.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: v_m.len(),
        });
    }
    let anchor = dot(params.mean_half(), v_m) + params.bias3.unwrap_or(0.0);
    Ok(set
        .members()
        .iter()
        .map(|v| sigmoid(anchor + dot(params.member_half(), v)))
        .collect())
}

/// `gamma_i = alpha_i beta_i / sum_j alpha_j beta_j`
pub fn recalibrated_importance(alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    assert_eq!(alpha.len(), beta.len(), "alpha/beta length mismatch");
    let w: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| a * b).collect();
    let order: Vec<usize> = (0..w.len()).collect();
    normalized(&w, &order)
}

/// Collapse `set` into one descriptor.
///
/// `Avg` ignores `params` entirely and records `alpha = beta = 1`.
pub fn aggregate(set: &FaceSet, params: &GateParams, mode: Mode) -> Result<AggregationOutput> {
    let n = set.len();
    let order = canonical_order(set);

    if mode == Mode::Avg {
        let ones = vec![1.0; n];
        let (v_d, total) = weighted_average(set, &ones, &order)?;
        return Ok(AggregationOutput {
            v_m: v_d.clone(),
            v_d,
            gamma: normalized(&ones, &order),
            alpha: ones.clone(),
            beta: ones,
            mode,
            alpha_sum: total,
            weight_sum: total,
            order,
        });
    }

    let alpha = visual_quality(set, params)?;
    let (v_m, alpha_sum) = weighted_average(set, &alpha, &order)?;

    if mode == Mode::MnV {
        return Ok(AggregationOutput {
            v_d: v_m.clone(),
            v_m,
            gamma: normalized(&alpha, &order),
            beta: vec![1.0; n],
            alpha,
            mode,
            alpha_sum,
            weight_sum: alpha_sum,
            order,
        });
    }

    let beta = content_quality(set, &v_m, params)?;
    let weights: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a * b).collect();
    let (v_d, weight_sum) = weighted_average(set, &weights, &order)?;
    Ok(AggregationOutput {
        v_d,
        gamma: normalized(&weights, &order),
        alpha,
        beta,
        v_m,
        mode,
        alpha_sum,
        weight_sum,
        order,
    })
}

/// Gradients of `upstream . V_d` with respect to the gates and the members,
/// given the forward result `out` for the same `set`, `params` and `mode`.
pub fn aggregate_backward(
    set: &FaceSet,
    params: &GateParams,
    mode: Mode,
    out: &AggregationOutput,
    upstream: &[f64],
) -> Result<AggregationGradients> {
    let n = set.len();
    let dim = set.dim();
    if out.mode != mode
        || out.alpha.len() != n
        || out.beta.len() != n
        || out.order.len() != n
        || out.v_m.len() != dim
    {
        return Err(Error::Usage(
            "forward cache does not match this set and mode",
        ));
    }
    if upstream.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: upstream.len(),
        });
    }
    let mut grads = AggregationGradients::zeros(dim, n);

    if mode == Mode::Avg {
        for (d, &g) in grads.d_members.iter_mut().zip(&out.gamma) {
            axpy(g, upstream, d);
        }
        return Ok(grads);
    }
    params.check_set(set)?;

    let alpha = &out.alpha;
    let beta = &out.beta;

    // dL/d(alpha_k) through the mean face, scaled by the upstream on V_m.
    let via_mean = |g_m: &[f64], k: usize| {
        let v = set.member(k);
        let mut s = 0.0;
        for j in 0..dim {
            s += g_m[j] * (v[j] - out.v_m[j]);
        }
        s / out.alpha_sum
    };

    // Per-member gradient on the visual gate pre-activation, and on V_m.
    let mut d_pre_alpha = vec![0.0; n];
    let mut g_m = vec![0.0; dim];
    let mut d_pre_beta = vec![0.0; n];

    match mode {
        Mode::MnV => {
            // V_d = V_m
            g_m.copy_from_slice(upstream);
            for k in 0..n {
                d_pre_alpha[k] = via_mean(&g_m, k) * alpha[k] * (1.0 - alpha[k]);
            }
        }
        Mode::MnVc => {
            // dL/dw_i for w_i = alpha_i beta_i
            let d_weight: Vec<f64> = (0..n)
                .map(|i| {
                    let v = set.member(i);
                    let mut s = 0.0;
                    for j in 0..dim {
                        s += upstream[j] * (v[j] - out.v_d[j]);
                    }
                    s / out.weight_sum
                })
                .collect();
            for i in 0..n {
                d_pre_beta[i] = d_weight[i] * alpha[i] * beta[i] * (1.0 - beta[i]);
            }
            let tau_sum = sum_in_order(&d_pre_beta, &out.order);
            axpy(tau_sum, params.mean_half(), &mut g_m);
            grads.d_bias3 = if params.bias3.is_some() { tau_sum } else { 0.0 };
            let (d_mean_half, d_member_half) = grads.d_theta3.split_at_mut(dim);
            axpy(tau_sum, &out.v_m, d_mean_half);
            for &i in &out.order {
                axpy(d_pre_beta[i], set.member(i), d_member_half);
            }
            for k in 0..n {
                let d_alpha = d_weight[k] * beta[k] + via_mean(&g_m, k);
                d_pre_alpha[k] = d_alpha * alpha[k] * (1.0 - alpha[k]);
            }
        }
        Mode::Avg => unreachable!(),
    }

    for &k in &out.order {
        axpy(d_pre_alpha[k], set.member(k), &mut grads.d_theta2);
    }
    grads.d_bias2 = if params.bias2.is_some() {
        sum_in_order(&d_pre_alpha, &out.order)
    } else {
        0.0
    };

    for k in 0..n {
        let d = &mut grads.d_members[k];
        axpy(out.gamma[k], upstream, d);
        if mode == Mode::MnVc {
            axpy(alpha[k] / out.alpha_sum, &g_m, d);
            axpy(d_pre_beta[k], params.member_half(), d);
        }
        axpy(d_pre_alpha[k], &params.theta2, d);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng, standard_normal_vec};
    use rand::seq::SliceRandom;

    fn random_params(
        rng: &mut crate::numerics::Rng,
        dim: usize,
        scale: f64,
        bias: bool,
    ) -> GateParams {
        let mut p = GateParams::zeros(dim, 0, bias);
        p.theta2 = standard_normal_vec(rng, dim)
            .iter()
            .map(|x| x * scale)
            .collect();
        p.theta3 = standard_normal_vec(rng, 2 * dim)
            .iter()
            .map(|x| x * scale)
            .collect();
        if bias {
            p.bias2 = Some(0.3);
            p.bias3 = Some(-0.2);
        }
        p
    }

    fn random_set(rng: &mut crate::numerics::Rng, dim: usize, n: usize) -> FaceSet {
        FaceSet::new((0..n).map(|_| standard_normal_vec(rng, dim)).collect(), 0).unwrap()
    }

    #[test]
    fn face_set_validation() {
        assert!(FaceSet::new(vec![], 0).is_err());
        assert!(matches!(
            FaceSet::new(vec![vec![1.0, 2.0], vec![1.0]], 0),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
        assert!(FaceSet::new(vec![vec![f64::NAN]], 0).is_err());
    }

    #[test]
    fn zero_gate_scores_are_half() {
        let mut rng = seeded_rng(1);
        let set = random_set(&mut rng, 5, 4);
        let p = GateParams::zeros(5, 0, true);
        assert!(visual_quality(&set, &p).unwrap().iter().all(|&a| a == 0.5));
        let vm = mean_face(&set, &[0.5; 4]).unwrap();
        assert!(content_quality(&set, &vm, &p)
            .unwrap()
            .iter()
            .all(|&b| b == 0.5));
    }

    #[test]
    fn visual_quality_single_member() {
        let set = FaceSet::new(vec![vec![3.0, -1.0, 2.0]], 0).unwrap();
        let mut p = GateParams::zeros(3, 0, false);
        p.theta2[0] = 1.0;
        let a = visual_quality(&set, &p).unwrap();
        // mpmath: 0.95257412682243321912...
        assert!((a[0] - 0.9525741268224332).abs() < 1e-15);
    }

    #[test]
    fn mean_face_cases() {
        let set = FaceSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        assert_eq!(mean_face(&set, &[0.3, 0.3]).unwrap(), [0.5, 0.5]);
        let vm = mean_face(&set, &[0.2, 0.8]).unwrap();
        assert!((vm[0] - 0.2).abs() < 1e-15 && (vm[1] - 0.8).abs() < 1e-15);
        let single = FaceSet::new(vec![vec![0.1, -7.3]], 0).unwrap();
        assert_eq!(mean_face(&single, &[0.37]).unwrap(), [0.1, -7.3]);
        assert_eq!(
            mean_face(&set, &[0.0, 0.0]),
            Err(Error::Degenerate(
                "weight sum below guard in weighted average"
            ))
        );
    }

    #[test]
    fn content_gate_with_zero_anchor_half_is_member_only() {
        let mut rng = seeded_rng(5);
        let set = random_set(&mut rng, 4, 3);
        let mut p = random_params(&mut rng, 4, 0.5, false);
        for w in &mut p.theta3[..4] {
            *w = 0.0;
        }
        let alpha = visual_quality(&set, &p).unwrap();
        let vm = mean_face(&set, &alpha).unwrap();
        let beta = content_quality(&set, &vm, &p).unwrap();
        for (i, b) in beta.iter().enumerate() {
            assert_eq!(*b, sigmoid(dot(&p.theta3[4..], set.member(i))));
        }
        // n = 1: the anchor is the member itself
        let one = FaceSet::new(vec![set.member(0).to_vec()], 0).unwrap();
        let p = random_params(&mut rng, 4, 0.5, false);
        let out = aggregate(&one, &p, Mode::MnVc).unwrap();
        let cat: Vec<f64> = one.member(0).iter().chain(one.member(0)).copied().collect();
        assert_eq!(out.beta[0], sigmoid(dot(&p.theta3, &cat)));
    }

    #[test]
    fn recalibration_cases() {
        let g = recalibrated_importance(&[0.5, 0.5], &[0.2, 0.8]);
        assert!((g[0] - 0.2).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let g = recalibrated_importance(&[0.4; 5], &[0.7; 5]);
        assert!(g.iter().all(|x| (x - 0.2).abs() < 1e-15));
        let a = [0.1, 0.6, 0.9];
        let b = [0.3, 0.5, 0.2];
        let scaled: Vec<f64> = a.iter().map(|x| x * 0.37).collect();
        let g1 = recalibrated_importance(&a, &b);
        let g2 = recalibrated_importance(&scaled, &b);
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_member_descriptor_is_the_member() {
        let mut rng = seeded_rng(8);
        let set = random_set(&mut rng, 6, 1);
        let p = random_params(&mut rng, 6, 1.0, true);
        for mode in Mode::ALL {
            assert_eq!(aggregate(&set, &p, mode).unwrap().v_d, set.member(0));
        }
    }

    #[test]
    fn constant_beta_reduces_to_visual_only() {
        let mut rng = seeded_rng(12);
        let set = random_set(&mut rng, 4, 5);
        let mut p = random_params(&mut rng, 4, 0.4, true);
        p.theta3.iter_mut().for_each(|w| *w = 0.0);
        p.bias3 = Some(1.7);
        let vc = aggregate(&set, &p, Mode::MnVc).unwrap();
        let v = aggregate(&set, &p, Mode::MnV).unwrap();
        for (a, b) in vc.v_d.iter().zip(&v.v_d) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_content_gate_matches_visual_only_exactly() {
        let mut rng = seeded_rng(13);
        let set = random_set(&mut rng, 7, 4);
        let mut p = random_params(&mut rng, 7, 0.4, true);
        p.theta3.iter_mut().for_each(|w| *w = 0.0);
        p.bias3 = Some(0.0);
        let vc = aggregate(&set, &p, Mode::MnVc).unwrap();
        let v = aggregate(&set, &p, Mode::MnV).unwrap();
        assert_eq!(vc.v_d, v.v_d);
    }

    #[test]
    fn avg_mode_records_unit_gates() {
        let set = FaceSet::new(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]], 0).unwrap();
        let out = aggregate(&set, &GateParams::zeros(2, 0, true), Mode::Avg).unwrap();
        assert_eq!(out.alpha, [1.0; 3]);
        assert_eq!(out.beta, [1.0; 3]);
        assert!(out.gamma.iter().all(|g| (g - 1.0 / 3.0).abs() < 1e-15));
        assert!((out.v_d[0] - 3.0).abs() < 1e-15 && (out.v_d[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_members_give_that_member() {
        let mut rng = seeded_rng(21);
        let v = standard_normal_vec(&mut rng, 5);
        let set = FaceSet::new(vec![v.clone(); 4], 0).unwrap();
        let p = random_params(&mut rng, 5, 1.0, true);
        for mode in Mode::ALL {
            let out = aggregate(&set, &p, mode).unwrap();
            for (a, b) in out.v_d.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_members_have_zero_bias_gradient() {
        let v = [0.4, -1.0, 2.5];
        let set = FaceSet::new(vec![v.to_vec(); 3], 0).unwrap();
        let p = GateParams::zeros(3, 0, true);
        for mode in [Mode::MnV, Mode::MnVc] {
            let out = aggregate(&set, &p, mode).unwrap();
            let g = aggregate_backward(&set, &p, mode, &out, &[1.0, -2.0, 0.5]).unwrap();
            assert_eq!(g.d_bias2, 0.0);
            assert_eq!(g.d_bias3, 0.0);
        }
    }

    #[test]
    fn avg_backward_has_no_parameter_gradient() {
        let mut rng = seeded_rng(3);
        let set = random_set(&mut rng, 4, 3);
        let p = random_params(&mut rng, 4, 1.0, true);
        let out = aggregate(&set, &p, Mode::Avg).unwrap();
        let g = aggregate_backward(&set, &p, Mode::Avg, &out, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(g.d_theta2.iter().chain(&g.d_theta3).all(|&x| x == 0.0));
        assert_eq!((g.d_bias2, g.d_bias3), (0.0, 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = seeded_rng(3);
        let set = random_set(&mut rng, 4, 3);
        let p = random_params(&mut rng, 4, 1.0, true);
        let out = aggregate(&set, &p, Mode::MnV).unwrap();
        assert!(matches!(
            aggregate_backward(&set, &p, Mode::MnVc, &out, &[0.0; 4]),
            Err(Error::Usage(_))
        ));
        let other = random_set(&mut rng, 4, 2);
        assert!(matches!(
            aggregate_backward(&other, &p, Mode::MnV, &out, &[0.0; 4]),
            Err(Error::Usage(_))
        ));
    }

    /// Gradient of `c . V_d` by central differences over gates and members.
    fn check_gradients(seed: u64, dim: usize, n: usize, mode: Mode, bias: bool) -> f64 {
        let mut rng = seeded_rng(seed);
        let set = random_set(&mut rng, dim, n);
        let p = random_params(&mut rng, dim, 0.7, bias);
        let c = standard_normal_vec(&mut rng, dim);
        let out = aggregate(&set, &p, mode).unwrap();
        let g = aggregate_backward(&set, &p, mode, &out, &c).unwrap();

        let mut analytic = g.d_theta2.clone();
        if bias {
            analytic.push(g.d_bias2);
        }
        analytic.extend_from_slice(&g.d_theta3);
        if bias {
            analytic.push(g.d_bias3);
        }
        let flat = p.to_flat();
        let err_params = grad_check(
            |x| {
                let q = p.with_flat(x).unwrap();
                dot(&c, &aggregate(&set, &q, mode).unwrap().v_d)
            },
            &flat,
            &analytic,
            1e-5,
        )
        .unwrap();

        let members: Vec<f64> = set.members().iter().flatten().copied().collect();
        let analytic: Vec<f64> = g.d_members.iter().flatten().copied().collect();
        let err_members = grad_check(
            |x| {
                let s = FaceSet::new(x.chunks(dim).map(|c| c.to_vec()).collect(), 0).unwrap();
                dot(&c, &aggregate(&s, &p, mode).unwrap().v_d)
            },
            &members,
            &analytic,
            1e-5,
        )
        .unwrap();
        err_params.max(err_members)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, (dim, n)) in [(8, 3), (4, 1), (5, 2), (3, 7)].into_iter().enumerate() {
            for mode in [Mode::MnV, Mode::MnVc] {
                for bias in [false, true] {
                    let err = check_gradients(seed as u64 + 3, dim, n, mode, bias);
                    assert!(err < 1e-6, "mode {mode} dim {dim} n {n} bias {bias}: {err}");
                }
            }
        }
    }

    #[test]
    fn permutation_is_bit_exact() {
        let mut rng = seeded_rng(77);
        for _ in 0..50 {
            let set = random_set(&mut rng, 6, 5);
            let p = random_params(&mut rng, 6, 1.0, true);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let shuffled = set.permuted(&perm);
            for mode in Mode::ALL {
                let a = aggregate(&set, &p, mode).unwrap();
                let b = aggregate(&shuffled, &p, mode).unwrap();
                assert_eq!(a.v_d, b.v_d);
                for (i, &src) in perm.iter().enumerate() {
                    assert_eq!(b.alpha[i], a.alpha[src]);
                    assert_eq!(b.beta[i], a.beta[src]);
                    assert_eq!(b.gamma[i], a.gamma[src]);
                }
            }
        }
    }

    #[test]
    fn flat_round_trip_and_count() {
        let p = GateParams::zeros(2048, 0, false);
        assert_eq!(p.gate_param_count(), 6144);
        assert_eq!(GateParams::zeros(2048, 0, true).gate_param_count(), 6146);
        let mut rng = seeded_rng(2);
        let mut q = GateParams::zeros(3, 2, true);
        let flat = standard_normal_vec(&mut rng, q.flat_len());
        q.set_from_flat(&flat).unwrap();
        assert_eq!(q.to_flat(), flat);
        assert_eq!(q.bias2, Some(flat[3]));
        assert!(q.set_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn mode_strings() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(Mode::from_code(m.code()), Some(m));
        }
        assert!("mnv".parse::<Mode>().is_err());
    }
}
