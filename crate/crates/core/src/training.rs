//! Adversarial-training loop: seven batch-perturbation schemes, SGD with
//! momentum and weight decay, three learning-rate schedules, and fine-tuning
//! from an existing network.
//!
//! The loop is sequential over batches (optimizer velocity, running robust
//! errors, and the scheme RNG are serial state); the attacks inside a batch
//! parallelize across examples.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attacks::{
    msd_attack, pgd_attack, AttackConfig, AttackError, Lp, ThreatUnion,
};
use crate::net::{accuracy, backward, Batch, NetError, Network, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scheme requires the {0:?} threat model but the union lacks it")]
    SchemeUnionMismatch(Lp),
    #[error("train config invalid: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint expects input dim {expected}, dataset has {actual}")]
    ArchMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Which attack feeds each training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Adversarial training against one fixed norm.
    Single(Lp),
    /// Per-batch uniform sample of p from {1, 2, ∞}.
    Sat,
    /// Mean loss over all three per-norm attacks (3n effective batch).
    Avg,
    /// Per example, keep the attacked copy with the highest loss.
    Max,
    /// Multi-steepest-descent: best of three candidate steps per iteration.
    Msd,
    /// Extreme-norm training: sample p from {1, ∞} proportionally to the
    /// running robust error of each norm.
    Eat,
    /// Ablation: p from {1, ∞} uniformly.
    EatUniform,
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::Single(p) => format!("single_{}", p.name()),
            Scheme::Sat => "sat".into(),
            Scheme::Avg => "avg".into(),
            Scheme::Max => "max".into(),
            Scheme::Msd => "msd".into(),
            Scheme::Eat => "eat".into(),
            Scheme::EatUniform => "eat_uniform".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        Ok(match s {
            "single_linf" => Scheme::Single(Lp::Linf),
            "single_l2" => Scheme::Single(Lp::L2),
            "single_l1" => Scheme::Single(Lp::L1),
            "sat" => Scheme::Sat,
            "avg" => Scheme::Avg,
            "max" => Scheme::Max,
            "msd" => Scheme::Msd,
            "eat" => Scheme::Eat,
            "eat_uniform" => Scheme::EatUniform,
            other => {
                return Err(TrainError::InvalidConfig(format!("unknown scheme `{other}`")))
            }
        })
    }

    /// Norms whose radii must be present in the threat union.
    pub fn required_norms(&self) -> Vec<Lp> {
        match self {
            Scheme::Single(p) => vec![*p],
            Scheme::Sat | Scheme::Avg | Scheme::Max | Scheme::Msd => Lp::ALL.to_vec(),
            Scheme::Eat | Scheme::EatUniform => vec![Lp::L1, Lp::Linf],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Constant, divided by `factor` from `drop_epoch` onward.
    Piecewise { initial: f64, drop_epoch: usize, factor: f64 },
    /// Triangular: linear 0 → max over the first half of all steps, then
    /// linear max → 0.
    Cyclic { max_lr: f64 },
    /// Initial in the first third of epochs, ÷10 in the second, ÷100 last.
    ThirdsDrop { initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Keep the epoch-end snapshot with the highest union robust accuracy
    /// on a held-out 10% validation split.
    Best,
    /// Keep the final epoch's parameters.
    Final,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub union: ThreatUnion,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    pub seed: u64,
    pub checkpoint_selection: Selection,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for p in self.scheme.required_norms() {
            self.union.require(p).map_err(|_| TrainError::SchemeUnionMismatch(p))?;
        }
        Ok(())
    }
}

/// Running robust training error for the two extreme norms, reset at every
/// epoch boundary. A norm that has not been attacked yet in the current
/// epoch reports 1.0.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningRobustError {
    pub sum_err_l1: f64,
    pub count_l1: u64,
    pub sum_err_linf: f64,
    pub count_linf: u64,
}

impl RunningRobustError {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn record(&mut self, p: Lp, err: f64) {
        match p {
            Lp::L1 => {
                self.sum_err_l1 += err;
                self.count_l1 += 1;
            }
            Lp::Linf => {
                self.sum_err_linf += err;
                self.count_linf += 1;
            }
            Lp::L2 => {}
        }
    }

    pub fn rerr_l1(&self) -> f64 {
        if self.count_l1 > 0 {
            self.sum_err_l1 / self.count_l1 as f64
        } else {
            1.0
        }
    }

    pub fn rerr_linf(&self) -> f64 {
        if self.count_linf > 0 {
            self.sum_err_linf / self.count_linf as f64
        } else {
            1.0
        }
    }
}

/// Per-epoch counts of which norm realized the max-loss copy (MAX scheme)
/// or how many MSD steps chose each norm, in `Lp::ALL` order.
#[derive(Debug, Clone, Default)]
pub struct SelectionTelemetry {
    pub per_epoch: Vec<[u64; 3]>,
}

/// Probability of sampling (l1, l∞) proportional to running robust errors.
/// Degenerate all-zero case falls back to (0.5, 0.5).
pub fn eat_sampling_probability(rerr: &RunningRobustError) -> (f64, f64) {
    let (r1, rinf) = (rerr.rerr_l1(), rerr.rerr_linf());
    let total = r1 + rinf;
    if total <= 0.0 {
        (0.5, 0.5)
    } else {
        (r1 / total, rinf / total)
    }
}

/// Learning rate for a given epoch and step.
pub fn lr_at(
    schedule: &LrSchedule,
    epoch: usize,
    step_in_epoch: usize,
    total_epochs: usize,
    steps_per_epoch: usize,
) -> f64 {
    match schedule {
        LrSchedule::Piecewise { initial, drop_epoch, factor } => {
            if epoch < *drop_epoch {
                *initial
            } else {
                *initial / *factor
            }
        }
        LrSchedule::Cyclic { max_lr } => {
            let total = (total_epochs * steps_per_epoch).max(2);
            let t = (epoch * steps_per_epoch + step_in_epoch).min(total - 1);
            let f = t as f64 / (total - 1) as f64;
            max_lr * (1.0 - (2.0 * f - 1.0).abs())
        }
        LrSchedule::ThirdsDrop { initial } => {
            let third = ((epoch * 3) / total_epochs.max(1)).min(2);
            initial / 10f64.powi(third as i32)
        }
    }
}

/// The perturbed batch an attack scheme produced, plus bookkeeping deltas.
#[derive(Debug)]
pub struct BatchPerturbation {
    pub batch: Batch,
    /// Argmax (MAX) or step-choice (MSD) counts in `Lp::ALL` order.
    pub telemetry: [u64; 3],
    /// Norms attacked this batch with their batch robust errors.
    pub robust_errors: Vec<(Lp, f64)>,
}

fn robust_error(success: &[bool]) -> f64 {
    success.iter().filter(|&&s| s).count() as f64 / success.len().max(1) as f64
}

/// Run the scheme's attack(s) on one clean batch. For E-AT the running
/// robust error is updated here, before the caller's parameter update.
pub fn generate_batch_perturbation(
    scheme: Scheme,
    net: &Network,
    batch: &Batch,
    union: &ThreatUnion,
    attack_cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    rerr: &mut RunningRobustError,
) -> Result<BatchPerturbation, TrainError> {
    let single = |p: Lp| -> Result<(Batch, f64), TrainError> {
        let spec = union.require(p).map_err(|_| TrainError::SchemeUnionMismatch(p))?;
        let res = pgd_attack(net, batch, spec, attack_cfg)?;
        let err = robust_error(&res.success);
        Ok((Batch::new(res.adversarial_inputs, batch.labels.clone()), err))
    };
    match scheme {
        Scheme::Single(p) => {
            let (b, err) = single(p)?;
            Ok(BatchPerturbation { batch: b, telemetry: [0; 3], robust_errors: vec![(p, err)] })
        }
        Scheme::Sat => {
            let p = Lp::ALL[rng.gen_range(0..3)];
            let (b, err) = single(p)?;
            Ok(BatchPerturbation { batch: b, telemetry: [0; 3], robust_errors: vec![(p, err)] })
        }
        Scheme::Eat | Scheme::EatUniform => {
            let p_l1 = if scheme == Scheme::Eat {
                eat_sampling_probability(rerr).0
            } else {
                0.5
            };
            let p = if rng.gen::<f64>() < p_l1 { Lp::L1 } else { Lp::Linf };
            let (b, err) = single(p)?;
            rerr.record(p, err);
            Ok(BatchPerturbation { batch: b, telemetry: [0; 3], robust_errors: vec![(p, err)] })
        }
        Scheme::Avg => {
            let n = batch.len();
            let d = batch.inputs.cols();
            let mut data = Vec::with_capacity(3 * n * d);
            let mut labels = Vec::with_capacity(3 * n);
            let mut errs = Vec::with_capacity(3);
            for p in Lp::ALL {
                let (b, err) = single(p)?;
                data.extend_from_slice(&b.inputs.data);
                labels.extend_from_slice(&b.labels);
                errs.push((p, err));
            }
            Ok(BatchPerturbation {
                batch: Batch::new(Tensor::new(vec![3 * n, d], data), labels),
                telemetry: [0; 3],
                robust_errors: errs,
            })
        }
        Scheme::Max => {
            let n = batch.len();
            let d = batch.inputs.cols();
            let mut results = Vec::with_capacity(3);
            let mut errs = Vec::with_capacity(3);
            for p in Lp::ALL {
                let spec = union.require(p).map_err(|_| TrainError::SchemeUnionMismatch(p))?;
                let res = pgd_attack(net, batch, spec, attack_cfg)?;
                errs.push((p, robust_error(&res.success)));
                results.push(res);
            }
            let mut data = Vec::with_capacity(n * d);
            let mut telemetry = [0u64; 3];
            for i in 0..n {
                // argmax loss, ties broken by Lp::ALL order
                let mut best = 0;
                for c in 1..3 {
                    if results[c].final_loss[i] > results[best].final_loss[i] {
                        best = c;
                    }
                }
                telemetry[best] += 1;
                data.extend_from_slice(results[best].adversarial_inputs.row(i));
            }
            Ok(BatchPerturbation {
                batch: Batch::new(Tensor::new(vec![n, d], data), batch.labels.clone()),
                telemetry,
                robust_errors: errs,
            })
        }
        Scheme::Msd => {
            for p in Lp::ALL {
                union.require(p).map_err(|_| TrainError::SchemeUnionMismatch(p))?;
            }
            let res = msd_attack(net, batch, union, attack_cfg)?;
            let err = robust_error(&res.attack.success);
            Ok(BatchPerturbation {
                batch: Batch::new(res.attack.adversarial_inputs, batch.labels.clone()),
                telemetry: res.choice_counts,
                robust_errors: vec![(Lp::Linf, err), (Lp::L1, err)],
            })
        }
    }
}

/// Per-layer SGD momentum state, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Velocity {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.data.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.data.len()]).collect(),
        }
    }
}

/// One SGD step with momentum and (coupled) weight decay:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    net: &mut Network,
    grads: &[crate::net::LayerGrads],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Velocity,
) {
    for (li, layer) in net.layers.iter_mut().enumerate() {
        for (i, w) in layer.weights.data.iter_mut().enumerate() {
            let g = grads[li].weights.data[i] + weight_decay * *w;
            let v = momentum * velocity.weights[li][i] + g;
            velocity.weights[li][i] = v;
            *w -= lr * v;
        }
        for (i, b) in layer.bias.data.iter_mut().enumerate() {
            let g = grads[li].bias.data[i] + weight_decay * *b;
            let v = momentum * velocity.bias[li][i] + g;
            velocity.bias[li][i] = v;
            *b -= lr * v;
        }
    }
}

/// One epoch's summary row.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_accuracy: f64,
    /// Mean robust training error per norm over batches where that norm was
    /// attacked; NaN if never attacked this epoch.
    pub robust_err: [f64; 3],
    pub lr_start: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub net: Network,
    pub history: TrainHistory,
    pub telemetry: SelectionTelemetry,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Union robust accuracy on a (small) validation batch, with a single
/// restart for speed; used only for `Selection::Best`.
fn validation_union_accuracy(
    net: &Network,
    val: &Batch,
    union: &ThreatUnion,
    attack: &AttackConfig,
) -> Result<f64, TrainError> {
    let mut robust = vec![true; val.len()];
    let logits = crate::net::forward(net, &val.inputs)?;
    let preds = crate::net::predict(&logits);
    for (r, (&p, &y)) in robust.iter_mut().zip(preds.iter().zip(&val.labels)) {
        *r = p == y;
    }
    let cfg = AttackConfig { n_restarts: 1, ..*attack };
    for spec in union.specs() {
        let res = pgd_attack(net, val, *spec, &cfg)?;
        for (r, &s) in robust.iter_mut().zip(&res.success) {
            *r = *r && !s;
        }
    }
    Ok(robust.iter().filter(|&&r| r).count() as f64 / val.len().max(1) as f64)
}

/// Full adversarial-training run from the given initial network.
pub fn train(
    mut net: Network,
    dataset: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if net.input_dim() != dataset.inputs.cols() {
        return Err(TrainError::ArchMismatch {
            expected: net.input_dim(),
            actual: dataset.inputs.cols(),
        });
    }

    // For Best selection, hold out the last 10% of a seeded shuffle as the
    // validation split (at least one example).
    let order = shuffled_indices(dataset.len(), cfg.seed ^ 0x76a1_5eed);
    let (train_set, val_set) = if cfg.checkpoint_selection == Selection::Best {
        let n_val = (dataset.len() / 10).max(1);
        let split = dataset.len() - n_val;
        (dataset.select(&order[..split]), Some(dataset.select(&order[split..])))
    } else {
        (dataset.select(&order), None)
    };

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut velocity = Velocity::zeros(&net);
    let mut rerr = RunningRobustError::default();
    let mut scheme_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c4e_4d3e);
    let mut history = TrainHistory::default();
    let mut telemetry = SelectionTelemetry::default();
    let mut best: Option<(f64, Network)> = None;

    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        rerr.reset();
        let mut epoch_counts = [0u64; 3];
        let mut epoch_err_sum = [0.0f64; 3];
        let mut epoch_err_n = [0u64; 3];
        let perm = shuffled_indices(n, cfg.seed.wrapping_add(1 + epoch as u64));
        let lr_start = lr_at(&cfg.lr_schedule, epoch, 0, cfg.epochs, steps_per_epoch);
        for (step, chunk) in perm.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(chunk);
            // Vary attack seeds across batches while keeping the run a pure
            // function of (cfg.seed, epoch, step).
            let attack = AttackConfig {
                seed: cfg
                    .attack
                    .seed
                    .wrapping_add((epoch as u64) << 32)
                    .wrapping_add(step as u64),
                ..cfg.attack
            };
            let pert = generate_batch_perturbation(
                cfg.scheme,
                &net,
                &batch,
                &cfg.union,
                &attack,
                &mut scheme_rng,
                &mut rerr,
            )?;
            for i in 0..3 {
                epoch_counts[i] += pert.telemetry[i];
            }
            for (p, err) in &pert.robust_errors {
                let i = Lp::ALL.iter().position(|q| q == p).unwrap();
                epoch_err_sum[i] += err;
                epoch_err_n[i] += 1;
            }
            let lr = lr_at(&cfg.lr_schedule, epoch, step, cfg.epochs, steps_per_epoch);
            let (_, grads, _) = backward(&net, &pert.batch)?;
            sgd_step(&mut net, &grads, lr, cfg.momentum, cfg.weight_decay, &mut velocity);
        }
        let clean = accuracy(&net, &train_set)?;
        let robust_err = std::array::from_fn(|i| {
            if epoch_err_n[i] > 0 {
                epoch_err_sum[i] / epoch_err_n[i] as f64
            } else {
                f64::NAN
            }
        });
        history.epochs.push(EpochRecord {
            epoch,
            clean_accuracy: clean,
            robust_err,
            lr_start,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        telemetry.per_epoch.push(epoch_counts);
        if let Some(val) = &val_set {
            let acc = validation_union_accuracy(&net, val, &cfg.union, &cfg.attack)?;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, net.clone()));
            }
        }
    }

    let net = match (cfg.checkpoint_selection, best) {
        (Selection::Best, Some((_, snap))) => snap,
        _ => net,
    };
    Ok(TrainOutcome { net, history, telemetry })
}

/// Continue training an existing network: same loop as `train` but with a
/// fresh optimizer velocity and (by convention) a short thirds-drop
/// schedule. The caller supplies the schedule/epochs via `cfg`.
pub fn finetune(
    checkpoint: Network,
    dataset: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if checkpoint.input_dim() != dataset.inputs.cols() {
        return Err(TrainError::ArchMismatch {
            expected: checkpoint.input_dim(),
            actual: dataset.inputs.cols(),
        });
    }
    train(checkpoint, dataset, cfg)
}

/// Default fine-tuning configuration: 3 epochs, thirds-drop schedule.
pub fn default_finetune_config(scheme: Scheme, union: ThreatUnion, seed: u64) -> TrainConfig {
    TrainConfig {
        scheme,
        union,
        epochs: 3,
        batch_size: 128,
        lr_schedule: LrSchedule::ThirdsDrop { initial: 0.01 },
        momentum: 0.9,
        weight_decay: 5e-4,
        attack: AttackConfig::default(),
        seed,
        checkpoint_selection: Selection::Final,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ThreatSpec;
    use crate::net::{Activation, DenseLayer};

    fn union3(einf: f64, e2: f64, e1: f64) -> ThreatUnion {
        ThreatUnion::new(vec![
            ThreatSpec::new(Lp::Linf, einf).unwrap(),
            ThreatSpec::new(Lp::L2, e2).unwrap(),
            ThreatSpec::new(Lp::L1, e1).unwrap(),
        ])
        .unwrap()
    }

    fn two_gaussians(n_per_class: usize, seed: u64) -> Batch {
        // Two well-separated blobs in 2-D, clipped to [0,1]^2.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2;
            let mu = if label == 0 { 0.25 } else { 0.75 };
            for _ in 0..2 {
                let g: f64 = {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                };
                data.push((mu + 0.04 * g).clamp(0.0, 1.0));
            }
            labels.push(label);
        }
        Batch::new(Tensor::new(vec![2 * n_per_class, 2], data), labels)
    }

    fn base_cfg(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            scheme,
            union: union3(0.02, 0.05, 0.1),
            epochs: 1,
            batch_size: 25,
            lr_schedule: LrSchedule::Piecewise { initial: 0.1, drop_epoch: 100, factor: 10.0 },
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig { n_steps: 3, n_restarts: 1, ..Default::default() },
            seed: 7,
            checkpoint_selection: Selection::Final,
        }
    }

    #[test]
    fn eat_probabilities() {
        let mut r = RunningRobustError::default();
        assert_eq!(eat_sampling_probability(&r), (0.5, 0.5));
        r.record(Lp::L1, 0.6);
        r.record(Lp::Linf, 0.4);
        let (p1, pinf) = eat_sampling_probability(&r);
        assert!((p1 - 0.6).abs() < 1e-12 && (pinf - 0.4).abs() < 1e-12);
        r.reset();
        r.record(Lp::L1, 0.3);
        r.record(Lp::Linf, 0.3);
        assert_eq!(eat_sampling_probability(&r), (0.5, 0.5));
        // One norm never failing drives its probability to zero.
        r.reset();
        r.record(Lp::L1, 1.0);
        r.record(Lp::Linf, 0.0);
        assert_eq!(eat_sampling_probability(&r), (1.0, 0.0));
    }

    #[test]
    fn eat_sampling_frequencies_match_probabilities() {
        // Frozen rerr (0.8, 0.2): over 1e5 draws the l1 frequency must sit
        // within 3 sigma of 0.8.
        let mut rerr = RunningRobustError::default();
        rerr.record(Lp::L1, 0.8);
        rerr.record(Lp::Linf, 0.2);
        let (p1, _) = eat_sampling_probability(&rerr);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let hits = (0..n).filter(|_| rng.gen::<f64>() < p1).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.006, "freq = {freq}");
    }

    #[test]
    fn lr_schedules() {
        let pw = LrSchedule::Piecewise { initial: 0.05, drop_epoch: 70, factor: 10.0 };
        assert_eq!(lr_at(&pw, 69, 0, 100, 10), 0.05);
        assert_eq!(lr_at(&pw, 71, 0, 100, 10), 0.005);
        let td = LrSchedule::ThirdsDrop { initial: 0.01 };
        assert_eq!(lr_at(&td, 0, 0, 3, 10), 0.01);
        assert_eq!(lr_at(&td, 1, 0, 3, 10), 0.001);
        assert!((lr_at(&td, 2, 0, 3, 10) - 0.0001).abs() < 1e-18);
        let cy = LrSchedule::Cyclic { max_lr: 0.1 };
        assert_eq!(lr_at(&cy, 0, 0, 30, 10), 0.0);
        assert_eq!(lr_at(&cy, 29, 9, 30, 10), 0.0);
        // midpoint of 300 steps: step index 149.5 -> check peak neighborhood
        let mid = lr_at(&cy, 14, 9, 30, 10).max(lr_at(&cy, 15, 0, 30, 10));
        assert!(mid > 0.099, "peak {mid}");
        // symmetric triangle
        let up = lr_at(&cy, 5, 0, 30, 10);
        let down = lr_at(&cy, 24, 9, 30, 10);
        assert!((up - down).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_plain_and_decay() {
        // momentum 0, wd 0: theta -= lr * g
        let mut net = Network {
            layers: vec![DenseLayer {
                weights: Tensor::new(vec![1, 1], vec![2.0]),
                bias: Tensor::new(vec![1], vec![1.0]),
                activation: Activation::Identity,
            }],
        };
        let grads = vec![crate::net::LayerGrads {
            weights: Tensor::new(vec![1, 1], vec![0.5]),
            bias: Tensor::new(vec![1], vec![-1.0]),
        }];
        let mut v = Velocity::zeros(&net);
        sgd_step(&mut net, &grads, 0.1, 0.0, 0.0, &mut v);
        assert!((net.layers[0].weights.data[0] - 1.95).abs() < 1e-15);
        assert!((net.layers[0].bias.data[0] - 1.1).abs() < 1e-15);
        // wd only, zero gradient: theta *= (1 - lr*wd)
        let grads0 = vec![crate::net::LayerGrads {
            weights: Tensor::new(vec![1, 1], vec![0.0]),
            bias: Tensor::new(vec![1], vec![0.0]),
        }];
        let mut v = Velocity::zeros(&net);
        let w0 = net.layers[0].weights.data[0];
        sgd_step(&mut net, &grads0, 0.1, 0.0, 0.5, &mut v);
        assert!((net.layers[0].weights.data[0] - w0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // Minimize (w - 3)^2 via its gradient 2(w - 3).
        let mut net = Network {
            layers: vec![DenseLayer {
                weights: Tensor::new(vec![1, 1], vec![0.0]),
                bias: Tensor::new(vec![1], vec![0.0]),
                activation: Activation::Identity,
            }],
        };
        let mut v = Velocity::zeros(&net);
        for _ in 0..200 {
            let w = net.layers[0].weights.data[0];
            let grads = vec![crate::net::LayerGrads {
                weights: Tensor::new(vec![1, 1], vec![2.0 * (w - 3.0)]),
                bias: Tensor::new(vec![1], vec![0.0]),
            }];
            sgd_step(&mut net, &grads, 0.1, 0.5, 0.0, &mut v);
        }
        assert!((net.layers[0].weights.data[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn sat_frequencies_uniform() {
        let net = Network::init(&[2, 4, 2], Activation::ReLU, 1).unwrap();
        let batch = two_gaussians(2, 0);
        let union = union3(0.02, 0.05, 0.1);
        let cfg = AttackConfig { n_steps: 1, n_restarts: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut rerr = RunningRobustError::default();
        let mut counts = [0u64; 3];
        // 3000 batches is enough for +-3% at p=1/3
        for _ in 0..3000 {
            let p = generate_batch_perturbation(
                Scheme::Sat, &net, &batch, &union, &cfg, &mut rng, &mut rerr,
            )
            .unwrap();
            let i = Lp::ALL.iter().position(|q| *q == p.robust_errors[0].0).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "freq {f}");
        }
    }

    #[test]
    fn max_keeps_argmax_copy() {
        let net = Network::init(&[2, 8, 2], Activation::Softplus, 9).unwrap();
        let batch = two_gaussians(10, 4);
        let union = union3(0.03, 0.08, 0.15);
        let cfg = AttackConfig { n_steps: 4, n_restarts: 1, seed: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rerr = RunningRobustError::default();
        let pert = generate_batch_perturbation(
            Scheme::Max, &net, &batch, &union, &cfg, &mut rng, &mut rerr,
        )
        .unwrap();
        assert_eq!(pert.telemetry.iter().sum::<u64>(), batch.len() as u64);
        // Kept copy's loss must equal the max over the three attacks.
        let mut per_norm_losses = Vec::new();
        for p in Lp::ALL {
            let res = pgd_attack(&net, &batch, union.require(p).unwrap(), &cfg).unwrap();
            per_norm_losses.push(res.final_loss);
        }
        let (kept_losses, _) =
            crate::net::per_example_losses(&net, &pert.batch.inputs, &pert.batch.labels).unwrap();
        for i in 0..batch.len() {
            let max = per_norm_losses.iter().map(|l| l[i]).fold(f64::NEG_INFINITY, f64::max);
            // kept loss is the loss of the best recorded iterate, which can
            // only match or exceed each norm's final loss
            assert!(
                kept_losses[i] >= max - 1e-9,
                "example {i}: kept {} < max {max}",
                kept_losses[i]
            );
        }
        assert_eq!(pert.robust_errors.len(), 3);
    }

    #[test]
    fn eat_updates_rerr_before_step_and_avg_triples_batch() {
        let net = Network::init(&[2, 4, 2], Activation::ReLU, 2).unwrap();
        let batch = two_gaussians(5, 1);
        let union = union3(0.02, 0.05, 0.1);
        let cfg = AttackConfig { n_steps: 1, n_restarts: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rerr = RunningRobustError::default();
        let pert = generate_batch_perturbation(
            Scheme::Eat, &net, &batch, &union, &cfg, &mut rng, &mut rerr,
        )
        .unwrap();
        // exactly one norm was recorded, matching the rerr counters
        assert_eq!(pert.robust_errors.len(), 1);
        assert_eq!(rerr.count_l1 + rerr.count_linf, 1);

        let avg = generate_batch_perturbation(
            Scheme::Avg, &net, &batch, &union, &cfg, &mut rng, &mut rerr,
        )
        .unwrap();
        assert_eq!(avg.batch.len(), 3 * batch.len());
        assert_eq!(&avg.batch.labels[..batch.len()], &batch.labels[..]);
    }

    #[test]
    fn train_learns_separable_data() {
        let data = two_gaussians(100, 3);
        let net = Network::init(&[2, 8, 2], Activation::ReLU, 11).unwrap();
        let mut cfg = base_cfg(Scheme::Single(Lp::Linf));
        cfg.epochs = 5;
        let out = train(net, &data, &cfg).unwrap();
        let final_acc = accuracy(&out.net, &data).unwrap();
        assert!(final_acc > 0.95, "accuracy {final_acc}");
        assert_eq!(out.history.epochs.len(), 5);
        // Single-linf records only linf robust error.
        let last = out.history.epochs.last().unwrap();
        assert!(!last.robust_err[0].is_nan());
        assert!(last.robust_err[1].is_nan() && last.robust_err[2].is_nan());
    }

    #[test]
    fn train_is_bit_reproducible() {
        let data = two_gaussians(30, 8);
        let cfg = base_cfg(Scheme::Eat);
        let run = || {
            let net = Network::init(&[2, 6, 2], Activation::ReLU, 13).unwrap();
            train(net, &data, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        for (la, lb) in a.net.layers.iter().zip(&b.net.layers) {
            assert_eq!(la.weights.data, lb.weights.data);
            assert_eq!(la.bias.data, lb.bias.data);
        }
        assert_eq!(a.telemetry.per_epoch, b.telemetry.per_epoch);
    }

    #[test]
    fn finetune_zero_lr_is_identity() {
        let data = two_gaussians(20, 2);
        let net = Network::init(&[2, 6, 2], Activation::ReLU, 17).unwrap();
        let before: Vec<Vec<f64>> = net.layers.iter().map(|l| l.weights.data.clone()).collect();
        let mut cfg = base_cfg(Scheme::Single(Lp::Linf));
        cfg.lr_schedule = LrSchedule::Piecewise { initial: 0.0, drop_epoch: 10, factor: 10.0 };
        let out = finetune(net, &data, &cfg).unwrap();
        for (l, w0) in out.net.layers.iter().zip(&before) {
            assert_eq!(&l.weights.data, w0);
        }
        // architecture mismatch is a typed error
        let wrong = Network::init(&[3, 4, 2], Activation::ReLU, 0).unwrap();
        assert!(matches!(
            finetune(wrong, &data, &cfg),
            Err(TrainError::ArchMismatch { .. })
        ));
    }

    #[test]
    fn scheme_union_mismatch_rejected() {
        let data = two_gaussians(10, 5);
        let net = Network::init(&[2, 4, 2], Activation::ReLU, 3).unwrap();
        let mut cfg = base_cfg(Scheme::Max);
        cfg.union = ThreatUnion::new(vec![ThreatSpec::new(Lp::Linf, 0.02).unwrap()]).unwrap();
        assert!(matches!(
            train(net, &data, &cfg),
            Err(TrainError::SchemeUnionMismatch(_))
        ));
    }

    #[test]
    fn msd_scheme_collects_step_telemetry() {
        let data = two_gaussians(10, 6);
        let net = Network::init(&[2, 6, 2], Activation::Softplus, 19).unwrap();
        let mut cfg = base_cfg(Scheme::Msd);
        cfg.attack.n_steps = 4;
        let out = train(net, &data, &cfg).unwrap();
        let total: u64 = out.telemetry.per_epoch[0].iter().sum();
        assert!(total > 0);
    }
}
