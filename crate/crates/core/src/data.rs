//! Embedding corpora, synthetic generation and set assembly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::aggregator::FaceSet;
use crate::error::{Error, Result};
use crate::numerics::{norm, seeded_rng, standard_normal_vec, Rng};

/// `quality_truth` of a clean member.
pub const QUALITY_CLEAN: f32 = 1.0;
/// `quality_truth` of an aberrant member.
pub const QUALITY_ABERRANT: f32 = 0.0;
/// Identity signal left in an aberrant member.
pub const ABERRANT_SHRINK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub identity_id: u32,
    pub template_id: u32,
    pub media_id: u32,
    pub quality_truth: Option<f32>,
    pub embedding: Vec<f32>,
}

impl CorpusRecord {
    pub fn embedding_f64(&self) -> Vec<f64> {
        self.embedding.iter().map(|&x| f64::from(x)).collect()
    }
}

/// Immutable, validated collection of records with an
/// identity -> template -> records index.
#[derive(Debug, Clone)]
pub struct Corpus {
    dim: usize,
    records: Vec<CorpusRecord>,
    index: BTreeMap<u32, BTreeMap<u32, Vec<usize>>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.identity_id == b.identity_id
                    && a.template_id == b.template_id
                    && a.media_id == b.media_id
                    && a.quality_truth.map(f32::to_bits) == b.quality_truth.map(f32::to_bits)
                    && a.embedding
                        .iter()
                        .map(|x| x.to_bits())
                        .eq(b.embedding.iter().map(|x| x.to_bits()))
            })
    }
}

impl Corpus {
    pub fn new(dim: usize, records: Vec<CorpusRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("corpus dimension must be at least 1".into()));
        }
        let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
        let mut index: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.embedding.len(),
                });
            }
            if r.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Degenerate("non-finite embedding value in corpus"));
            }
            let id = *owner.entry(r.template_id).or_insert(r.identity_id);
            if id != r.identity_id {
                return Err(Error::Protocol(format!(
                    "template {} mixes identities {} and {}",
                    r.template_id, id, r.identity_id
                )));
            }
            index
                .entry(r.identity_id)
                .or_default()
                .entry(r.template_id)
                .or_default()
                .push(i);
        }
        Ok(Self {
            dim,
            records,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.index.keys().copied()
    }

    pub fn num_identities(&self) -> usize {
        self.index.len()
    }

    pub fn num_templates(&self) -> usize {
        self.index.values().map(BTreeMap::len).sum()
    }

    /// Templates of one identity, keyed by template id.
    pub fn templates_of(&self, identity: u32) -> Option<&BTreeMap<u32, Vec<usize>>> {
        self.index.get(&identity)
    }

    /// Every record index of one identity, in template then file order.
    pub fn records_of(&self, identity: u32) -> Vec<usize> {
        self.templates_of(identity)
            .map(|t| t.values().flatten().copied().collect())
            .unwrap_or_default()
    }
}

/// Identity-disjoint train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

impl Split {
    /// Shuffle `identities` with `seed` and put the first
    /// `round(train_fraction * len)` of them in the training side. Both
    /// lists come back sorted.
    pub fn random(identities: &[u32], train_fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut ids = identities.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut seeded_rng(seed));
        let cut = libm::round(train_fraction * ids.len() as f64) as usize;
        let mut train = ids[..cut].to_vec();
        let mut test = ids[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Split {
            train_identities: train,
            test_identities: test,
        })
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.train_identities.iter().copied().collect();
        if let Some(id) = self.test_identities.iter().find(|id| train.contains(id)) {
            return Err(Error::Protocol(format!(
                "identity {id} appears in both train and test splits"
            )));
        }
        Ok(())
    }

    pub fn side(&self, side: SplitSide) -> &[u32] {
        match side {
            SplitSide::Train => &self.train_identities,
            SplitSide::Test => &self.test_identities,
        }
    }
}

/// One evaluation template: all records sharing a template id.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub template_id: u32,
    pub identity: u32,
    pub set: FaceSet,
    /// Indices into [`Corpus::records`], in file order.
    pub records: Vec<usize>,
}

pub fn template_set(corpus: &Corpus, identity: u32, records: &[usize]) -> Result<FaceSet> {
    FaceSet::new(
        records
            .iter()
            .map(|&i| corpus.records()[i].embedding_f64())
            .collect(),
        identity,
    )
}

/// One [`Template`] per template id of the identities on `side`, ordered by
/// identity then template id. Overlapping splits are rejected.
pub fn assemble_templates(
    corpus: &Corpus,
    split: &Split,
    side: SplitSide,
) -> Result<Vec<Template>> {
    split.check_disjoint()?;
    let mut out = Vec::new();
    let mut ids = split.side(side).to_vec();
    ids.sort_unstable();
    for identity in ids {
        let Some(templates) = corpus.templates_of(identity) else {
            continue;
        };
        for (&template_id, records) in templates {
            out.push(Template {
                template_id,
                identity,
                set: template_set(corpus, identity, records)?,
                records: records.clone(),
            });
        }
    }
    Ok(out)
}

/// Infinite stream of fixed-size training sets.
///
/// Identities are visited in repeated shuffled rounds, so over any prefix of
/// the stream per-identity counts differ by at most one. Members are drawn
/// from all records of the identity, without replacement when it has at
/// least `set_size` records and with replacement otherwise. Each set's label
/// is the dense class index of its identity (position in the sorted
/// identity list).
pub struct TrainingSampler<'a> {
    corpus: &'a Corpus,
    pools: Vec<Vec<usize>>,
    identities: Vec<u32>,
    set_size: usize,
    rng: Rng,
    round: Vec<usize>,
    cursor: usize,
}

pub fn assemble_training_sets<'a>(
    corpus: &'a Corpus,
    identities: &[u32],
    set_size: usize,
    rng: Rng,
) -> Result<TrainingSampler<'a>> {
    if set_size == 0 {
        return Err(Error::Config("set size must be at least 1".into()));
    }
    let mut ids = identities.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if corpus.is_empty() || ids.is_empty() {
        return Err(Error::Config("no training identities".into()));
    }
    let mut pools = Vec::with_capacity(ids.len());
    for &id in &ids {
        let pool = corpus.records_of(id);
        if pool.is_empty() {
            return Err(Error::Config(format!("identity {id} has no records")));
        }
        pools.push(pool);
    }
    Ok(TrainingSampler {
        corpus,
        pools,
        identities: ids,
        set_size,
        rng,
        round: Vec::new(),
        cursor: 0,
    })
}

impl TrainingSampler<'_> {
    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }

    /// Class index to identity id.
    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn next_set(&mut self) -> FaceSet {
        if self.cursor == self.round.len() {
            self.round = (0..self.identities.len()).collect();
            self.round.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let class = self.round[self.cursor];
        self.cursor += 1;
        let pool = &self.pools[class];
        let picks: Vec<usize> = if pool.len() >= self.set_size {
            sample(&mut self.rng, pool.len(), self.set_size).into_vec()
        } else {
            (0..self.set_size)
                .map(|_| self.rng.random_range(0..pool.len()))
                .collect()
        };
        let members = picks
            .into_iter()
            .map(|p| self.corpus.records()[pool[p]].embedding_f64())
            .collect();
        FaceSet::new(members, class as u32).expect("corpus records are validated")
    }

    pub fn take_sets(&mut self, count: usize) -> Vec<FaceSet> {
        (0..count).map(|_| self.next_set()).collect()
    }
}

impl Iterator for TrainingSampler<'_> {
    type Item = FaceSet;

    fn next(&mut self) -> Option<FaceSet> {
        Some(self.next_set())
    }
}

/// Parameters of the synthetic corpus.
///
/// Each identity gets a unit prototype built from a direction shared by all
/// identities (weight `shared_component`) plus an identity-specific random
/// direction, scaled to `prototype_norm`. Members are unit vectors:
///
/// * clean: `normalize(p + pose + N(0, noise_sigma_clean^2))`
/// * aberrant (probability `aberrant_fraction`):
///   `normalize(0.1 p + N(0, noise_sigma_aberrant^2))`
///
/// `pose` is nonzero with probability `pose_fraction`: a Gaussian draw from a
/// rank-`content_subspace_rank` subspace shared across identities with
/// expected norm `pose_strength`. It leaves the member visually clean but
/// pulls it towards members of other identities with a similar pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_identities: u32,
    pub sets_per_identity: u32,
    pub set_size_min: u32,
    pub set_size_max: u32,
    pub dim: usize,
    pub prototype_norm: f64,
    pub shared_component: f64,
    pub noise_sigma_clean: f64,
    pub noise_sigma_aberrant: f64,
    pub aberrant_fraction: f64,
    pub content_subspace_rank: usize,
    pub pose_fraction: f64,
    pub pose_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            sets_per_identity: 20,
            set_size_min: 2,
            set_size_max: 8,
            dim: 64,
            prototype_norm: 1.0,
            shared_component: 1.0,
            noise_sigma_clean: 0.1,
            noise_sigma_aberrant: 1.0,
            aberrant_fraction: 0.3,
            content_subspace_rank: 4,
            pose_fraction: 0.2,
            pose_strength: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("synthetic config: {what}")));
        if self.num_identities == 0 || self.sets_per_identity == 0 || self.dim == 0 {
            return bad("identities, sets per identity and dimension must be at least 1");
        }
        if self.set_size_min == 0 || self.set_size_min > self.set_size_max {
            return bad("set size range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.aberrant_fraction) {
            return bad("aberrant fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.pose_fraction) {
            return bad("pose fraction must lie in [0, 1]");
        }
        if !(self.noise_sigma_clean > 0.0 && self.noise_sigma_aberrant > 0.0) {
            return bad("noise sigmas must be positive");
        }
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if !positive(self.prototype_norm)
            || !non_negative(self.shared_component)
            || !non_negative(self.pose_strength)
        {
            return bad(
                "prototype norm must be positive, shared component and pose strength non-negative",
            );
        }
        if self.content_subspace_rank > self.dim {
            return bad("content subspace rank exceeds dimension");
        }
        Ok(())
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Orthonormal basis of a random `rank`-dimensional subspace.
fn random_subspace(rng: &mut Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = standard_normal_vec(rng, dim);
        for b in &basis {
            let proj = crate::numerics::dot(&v, b);
            crate::numerics::axpy(-proj, b, &mut v);
        }
        if norm(&v) > 1e-6 {
            basis.push(normalized(v));
        }
    }
    basis
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Corpus> {
    generate_synthetic_with_prototypes(config).map(|(c, _)| c)
}

/// [`generate_synthetic`], also returning each identity's prototype.
pub fn generate_synthetic_with_prototypes(
    config: &SyntheticConfig,
) -> Result<(Corpus, Vec<Vec<f64>>)> {
    config.validate()?;
    let dim = config.dim;
    let mut rng = seeded_rng(config.seed);
    let shared = normalized(standard_normal_vec(&mut rng, dim));
    let pose_basis = random_subspace(&mut rng, dim, config.content_subspace_rank);
    let pose_scale = if pose_basis.is_empty() {
        0.0
    } else {
        config.pose_strength / libm::sqrt(pose_basis.len() as f64)
    };

    let mut records = Vec::new();
    let mut prototypes = Vec::with_capacity(config.num_identities as usize);
    let mut media_id = 0u32;
    for identity in 0..config.num_identities {
        let own = normalized(standard_normal_vec(&mut rng, dim));
        let prototype: Vec<f64> = normalized(
            own.iter()
                .zip(&shared)
                .map(|(o, s)| o + config.shared_component * s)
                .collect(),
        )
        .into_iter()
        .map(|x| x * config.prototype_norm)
        .collect();

        for t in 0..config.sets_per_identity {
            let template_id = identity * config.sets_per_identity + t;
            let size = rng.random_range(config.set_size_min..=config.set_size_max);
            for _ in 0..size {
                let aberrant = rng.random_bool(config.aberrant_fraction);
                let v = if aberrant {
                    let noise = standard_normal_vec(&mut rng, dim);
                    prototype
                        .iter()
                        .zip(&noise)
                        .map(|(p, e)| ABERRANT_SHRINK * p + config.noise_sigma_aberrant * e)
                        .collect()
                } else {
                    let mut v = prototype.clone();
                    if !pose_basis.is_empty() && rng.random_bool(config.pose_fraction) {
                        for b in &pose_basis {
                            let z: f64 = standard_normal_vec(&mut rng, 1)[0];
                            crate::numerics::axpy(pose_scale * z, b, &mut v);
                        }
                    }
                    let noise = standard_normal_vec(&mut rng, dim);
                    crate::numerics::axpy(config.noise_sigma_clean, &noise, &mut v);
                    v
                };
                records.push(CorpusRecord {
                    identity_id: identity,
                    template_id,
                    media_id,
                    quality_truth: Some(if aberrant {
                        QUALITY_ABERRANT
                    } else {
                        QUALITY_CLEAN
                    }),
                    embedding: normalized(v).iter().map(|&x| x as f32).collect(),
                });
                media_id += 1;
            }
        }
        prototypes.push(prototype);
    }
    Ok((Corpus::new(dim, records)?, prototypes))
}
