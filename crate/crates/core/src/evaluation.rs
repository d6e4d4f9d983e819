//! 1:1 verification: pairs, cosine scoring, ROC staircase and TAR@FAR.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::aggregator::{aggregate, GateParams, Mode};
use crate::data::Template;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::{cosine_similarity, seeded_rng};

/// FAR operating points reported for every mode.
pub const FAR_TARGETS: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

pub fn far_label(far: f64) -> &'static str {
    const LABELS: [&str; 5] = ["1e-5", "1e-4", "1e-3", "1e-2", "1e-1"];
    FAR_TARGETS
        .iter()
        .position(|&f| f == far)
        .map_or("custom", |i| LABELS[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub template_a: u32,
    pub template_b: u32,
    pub genuine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairProtocol {
    /// Every unordered pair of distinct templates.
    AllPairs,
    /// Every genuine pair, plus `impostors_per_genuine` impostor pairs drawn
    /// uniformly (with replacement) for each of them.
    Sampled {
        impostors_per_genuine: usize,
        seed: u64,
    },
}

pub fn build_pairs(
    templates: &[Template],
    protocol: PairProtocol,
) -> Result<Vec<VerificationPair>> {
    let n = templates.len();
    let mut pairs = Vec::new();
    let mut impostors = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let genuine = templates[i].identity == templates[j].identity;
            if genuine || protocol == PairProtocol::AllPairs {
                pairs.push(VerificationPair {
                    template_a: templates[i].template_id,
                    template_b: templates[j].template_id,
                    genuine,
                });
            }
            impostors += usize::from(!genuine);
        }
    }
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    if genuine == 0 || impostors == 0 {
        return Err(Error::Protocol(format!(
            "need at least one genuine and one impostor pair (have {genuine} and {impostors})"
        )));
    }
    if let PairProtocol::Sampled {
        impostors_per_genuine,
        seed,
    } = protocol
    {
        let mut rng = seeded_rng(seed);
        for _ in 0..genuine * impostors_per_genuine {
            let (a, b) = loop {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if templates[a].identity != templates[b].identity {
                    break (a.min(b), a.max(b));
                }
            };
            pairs.push(VerificationPair {
                template_a: templates[a].template_id,
                template_b: templates[b].template_id,
                genuine: false,
            });
        }
    }
    Ok(pairs)
}

/// Set descriptor of every template, in input order.
pub fn describe_templates<E: Executor>(
    templates: &[Template],
    params: &GateParams,
    mode: Mode,
    exec: &E,
) -> Result<Vec<Vec<f64>>> {
    exec.map(templates, |t| {
        aggregate(&t.set, params, mode).map(|o| o.v_d)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    /// Pairs dropped because a descriptor had zero norm.
    pub excluded: u64,
}

/// Cosine score of every pair, aggregating each template exactly once.
pub fn score_pairs<E: Executor>(
    pairs: &[VerificationPair],
    templates: &[Template],
    params: &GateParams,
    mode: Mode,
    exec: &E,
) -> Result<PairScores> {
    let position: BTreeMap<u32, usize> = templates
        .iter()
        .enumerate()
        .map(|(i, t)| (t.template_id, i))
        .collect();
    let lookup = |id: u32| {
        position
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("pair references unknown template {id}")))
    };
    let resolved: Vec<(usize, usize, bool)> = pairs
        .iter()
        .map(|p| Ok((lookup(p.template_a)?, lookup(p.template_b)?, p.genuine)))
        .collect::<Result<_>>()?;

    let descriptors = describe_templates(templates, params, mode, exec)?;
    let mut scores = PairScores::default();
    for (a, b, genuine) in resolved {
        match cosine_similarity(&descriptors[a], &descriptors[b]) {
            Ok(s) if genuine => scores.genuine.push(s),
            Ok(s) => scores.impostor.push(s),
            Err(Error::Degenerate(_)) => scores.excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// ROC staircase: one point per distinct score, thresholds descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ascending.
    pub genuine_scores: Vec<f64>,
    /// Ascending.
    pub impostor_scores: Vec<f64>,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn n_genuine(&self) -> usize {
        self.genuine_scores.len()
    }

    pub fn n_impostor(&self) -> usize {
        self.impostor_scores.len()
    }
}

/// Build the full staircase. At threshold `t`, `FAR = #{impostor >= t} /
/// N_imp` and `TAR = #{genuine >= t} / N_gen`.
pub fn roc(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol(
            "ROC needs genuine and impostor scores".into(),
        ));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Protocol("non-finite verification score".into()));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);

    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let mut points = Vec::new();
    // walk both lists from the top
    let (mut gi, mut ii) = (g.len(), im.len());
    while gi > 0 || ii > 0 {
        let t = match (gi, ii) {
            (0, _) => im[ii - 1],
            (_, 0) => g[gi - 1],
            _ => g[gi - 1].max(im[ii - 1]),
        };
        while gi > 0 && g[gi - 1] >= t {
            gi -= 1;
        }
        while ii > 0 && im[ii - 1] >= t {
            ii -= 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: (im.len() - ii) as f64 / ni,
            tar: (g.len() - gi) as f64 / ng,
        });
    }
    Ok(RocCurve {
        genuine_scores: g,
        impostor_scores: im,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarLookup {
    pub tar: f64,
    /// The target is below `1 / N_imp` and cannot be resolved.
    pub flagged: bool,
}

/// TAR at the largest achieved FAR not exceeding `far_target`, read off the
/// staircase without interpolation (zero when no point qualifies). Targets
/// finer than `1 / N_imp` are flagged: the value then comes from the
/// zero-false-accept end of the staircase and says nothing about the target.
pub fn tar_at_far(curve: &RocCurve, far_target: f64) -> TarLookup {
    let resolution = 1.0 / curve.n_impostor() as f64;
    let tar = curve
        .points
        .iter()
        .filter(|p| p.far <= far_target)
        .map(|p| p.tar)
        .fold(0.0, f64::max);
    TarLookup {
        tar,
        flagged: far_target < resolution,
    }
}

/// TAR@FAR table for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    /// `(far target, lookup)` for each of [`FAR_TARGETS`].
    pub tar_at_far: Vec<(f64, TarLookup)>,
    pub n_genuine: u64,
    pub n_impostor: u64,
    pub excluded_pairs: u64,
    pub config_hash: [u8; 32],
}

impl EvalReport {
    pub fn from_curve(
        mode: Mode,
        curve: &RocCurve,
        excluded_pairs: u64,
        config_hash: [u8; 32],
    ) -> Self {
        Self {
            mode,
            tar_at_far: FAR_TARGETS
                .iter()
                .map(|&f| (f, tar_at_far(curve, f)))
                .collect(),
            n_genuine: curve.n_genuine() as u64,
            n_impostor: curve.n_impostor() as u64,
            excluded_pairs,
            config_hash,
        }
    }

    pub fn tar(&self, far: f64) -> Option<f64> {
        self.tar_at_far
            .iter()
            .find(|(f, _)| *f == far)
            .map(|(_, l)| l.tar)
    }
}
