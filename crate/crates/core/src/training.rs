//! Set-wise classification training of the gates and classifier on frozen
//! embeddings.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::aggregator::{
    aggregate, aggregate_backward, AggregationGradients, FaceSet, GateParams, Mode,
};
use crate::data::{assemble_training_sets, Corpus};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::{dot, seeded_rng, softmax_cross_entropy, standard_normal_vec, Rng};

/// Minimum epoch-loss improvement that resets the plateau counter.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;
/// Number of learning-rate decays before training stops on a plateau.
pub const MAX_DECAYS: u32 = 2;

/// Offset between the initialization stream and the sampling stream.
const SAMPLER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub set_size: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: u32,
    pub max_epochs: u32,
    pub weight_decay: f64,
    pub seed: u64,
    pub gate_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MnVc,
            set_size: 3,
            batch_size: 256,
            lr_initial: 0.1,
            lr_decay_factor: 10.0,
            plateau_patience: 3,
            max_epochs: 60,
            weight_decay: 0.0,
            seed: 0,
            gate_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train config: {what}")));
        if self.mode == Mode::Avg {
            return bad("averaging has no parameters to train");
        }
        if self.set_size == 0 || self.batch_size == 0 {
            return bad("set size and batch size must be at least 1");
        }
        // lr = 0 is allowed: it freezes the parameters.
        if !self.lr_initial.is_finite() || self.lr_initial < 0.0 {
            return bad("learning rate must be finite and non-negative");
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return bad("decay factor must be at least 1");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.plateau_patience == 0 {
            return bad("plateau patience must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 over a fixed little-endian encoding of every field.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"mn-train-config/1");
        h.update([self.mode.code(), u8::from(self.gate_bias)]);
        h.update((self.set_size as u64).to_le_bytes());
        h.update((self.batch_size as u64).to_le_bytes());
        h.update(self.lr_initial.to_le_bytes());
        h.update(self.lr_decay_factor.to_le_bytes());
        h.update(self.plateau_patience.to_le_bytes());
        h.update(self.max_epochs.to_le_bytes());
        h.update(self.weight_decay.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().into()
    }
}

/// Trained parameters plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: GateParams,
    pub mode: Mode,
    pub epoch: u32,
    pub loss_history: Vec<f64>,
    pub config_hash: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub loss: f64,
    pub lr: f64,
}

/// Gates zeroed (every gate starts at 0.5, i.e. plain averaging) and the
/// classifier drawn from `N(0, 2 / dim)`.
pub fn init_params(dim: usize, num_classes: usize, rng: &mut Rng, gate_bias: bool) -> GateParams {
    let mut p = GateParams::zeros(dim, num_classes, gate_bias);
    let scale = libm::sqrt(2.0 / dim as f64);
    p.classifier = standard_normal_vec(rng, num_classes * dim)
        .into_iter()
        .map(|z| z * scale)
        .collect();
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub loss: f64,
    pub gates: AggregationGradients,
    /// Row-major, same shape as the classifier.
    pub d_classifier: Vec<f64>,
}

impl SetLoss {
    /// Gradient in [`GateParams::to_flat`] order.
    pub fn flat_gradient(&self, params: &GateParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.flat_len());
        out.extend_from_slice(&self.gates.d_theta2);
        if params.bias2.is_some() {
            out.push(self.gates.d_bias2);
        }
        out.extend_from_slice(&self.gates.d_theta3);
        if params.bias3.is_some() {
            out.push(self.gates.d_bias3);
        }
        out.extend_from_slice(&self.d_classifier);
        out
    }
}

/// Cross-entropy of `classifier . V_d` against the set's label, and its
/// gradient with respect to every parameter.
pub fn set_loss(set: &FaceSet, params: &GateParams, mode: Mode) -> Result<SetLoss> {
    let target = set.identity() as usize;
    if target >= params.num_classes {
        return Err(Error::Protocol(format!(
            "label {target} outside [0, {})",
            params.num_classes
        )));
    }
    let out = aggregate(set, params, mode)?;
    let dim = params.dim();
    let logits: Vec<f64> = (0..params.num_classes)
        .map(|c| dot(params.classifier_row(c), &out.v_d))
        .collect();
    let (loss, d_logits) = softmax_cross_entropy(&logits, target);

    let mut d_classifier = vec![0.0; params.classifier.len()];
    let mut upstream = vec![0.0; dim];
    for (c, &g) in d_logits.iter().enumerate() {
        let row = params.classifier_row(c);
        let d_row = &mut d_classifier[c * dim..(c + 1) * dim];
        for j in 0..dim {
            d_row[j] = g * out.v_d[j];
            upstream[j] += g * row[j];
        }
    }
    let gates = aggregate_backward(set, params, mode, &out, &upstream)?;
    Ok(SetLoss {
        loss,
        gates,
        d_classifier,
    })
}

/// Mean loss and mean flat gradient over a batch. Per-set work goes through
/// `exec`; the reduction is an ordered fold.
pub fn batch_loss_and_gradient<E: Executor>(
    batch: &[FaceSet],
    params: &GateParams,
    mode: Mode,
    exec: &E,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch"));
    }
    let results = exec.map(batch, |s| {
        set_loss(s, params, mode).map(|l| (l.loss, l.flat_gradient(params)))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.flat_len()];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// `theta <- theta - lr * (grad + weight_decay * theta)`
pub fn sgd_step(params: &mut GateParams, grad: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    let mut flat = params.to_flat();
    if grad.len() != flat.len() {
        return Err(Error::DimensionMismatch {
            expected: flat.len(),
            got: grad.len(),
        });
    }
    for (p, g) in flat.iter_mut().zip(grad) {
        *p -= lr * (g + weight_decay * *p);
    }
    params.set_from_flat(&flat)
}

/// Tracks epoch losses and decides when to decay the learning rate and when
/// to stop.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: u32,
    best: f64,
    stale: u32,
    decays: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    Continue,
    Decayed,
    Stop,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: u32) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> u32 {
        self.decays
    }

    pub fn observe(&mut self, epoch_loss: f64) -> ScheduleAction {
        if epoch_loss < self.best - PLATEAU_THRESHOLD {
            self.best = epoch_loss;
            self.stale = 0;
            return ScheduleAction::Continue;
        }
        self.best = self.best.min(epoch_loss);
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleAction::Continue;
        }
        if self.decays == MAX_DECAYS {
            return ScheduleAction::Stop;
        }
        self.decays += 1;
        self.lr /= self.factor;
        self.stale = 0;
        ScheduleAction::Decayed
    }
}

/// Train the gates and a fresh classifier on the records of
/// `train_identities`. `on_epoch` sees every finished epoch.
pub fn train<E, F>(
    corpus: &Corpus,
    train_identities: &[u32],
    config: &TrainConfig,
    exec: &E,
    mut on_epoch: F,
) -> Result<Checkpoint>
where
    E: Executor,
    F: FnMut(EpochStats),
{
    config.validate()?;
    let mut sampler = assemble_training_sets(
        corpus,
        train_identities,
        config.set_size,
        seeded_rng(config.seed ^ SAMPLER_STREAM),
    )?;
    let classes = sampler.num_classes();
    if classes < 2 {
        return Err(Error::Config(
            "training needs at least two identities".into(),
        ));
    }
    let mut rng = seeded_rng(config.seed);
    let mut params = init_params(corpus.dim(), classes, &mut rng, config.gate_bias);

    let records: usize = sampler
        .identities()
        .iter()
        .map(|&id| corpus.records_of(id).len())
        .sum();
    let sets_per_epoch = records.div_ceil(config.set_size).max(1);

    let mut schedule = PlateauSchedule::new(
        config.lr_initial,
        config.lr_decay_factor,
        config.plateau_patience,
    );
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        let sets = sampler.take_sets(sets_per_epoch);
        let epoch_start = params.clone();
        let lr = schedule.lr();
        let mut total = 0.0;
        for batch in sets.chunks(config.batch_size) {
            let evaluated = match batch_loss_and_gradient(batch, &params, config.mode, exec) {
                // saturated gates after an oversized step
                Err(Error::Degenerate(_)) if step > 0 => None,
                other => Some(other?),
            };
            let Some((loss, grad)) =
                evaluated.filter(|(l, g)| l.is_finite() && g.iter().all(|x| x.is_finite()))
            else {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(params),
                });
            };
            total += loss * batch.len() as f64;
            sgd_step(&mut params, &grad, lr, config.weight_decay)?;
            step += 1;
        }
        let epoch_loss = total / sets.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                last_good: Box::new(epoch_start),
            });
        }
        history.push(epoch_loss);
        on_epoch(EpochStats {
            epoch,
            loss: epoch_loss,
            lr,
        });
        if schedule.observe(epoch_loss) == ScheduleAction::Stop {
            break;
        }
    }

    Ok(Checkpoint {
        params,
        mode: config.mode,
        epoch,
        loss_history: history,
        config_hash: config.hash(),
    })
}
