//! Per-norm steepest-ascent steps, projections onto lp-balls intersected
//! with the unit box, best-iterate PGD, the multi-steepest-descent attack,
//! and bisection-based robust-radius estimation.
//!
//! Determinism contract: the per-example RNG seed is derived from
//! `(base seed, example index, restart index)` only, so attacks on distinct
//! examples are independent and parallel execution is bit-identical to
//! sequential.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

use crate::net::{per_example_grads, per_example_losses, Batch, NetError, Network, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("threat union must contain distinct norms, `{0:?}` repeated")]
    DuplicateNorm(Lp),
    #[error("threat union must not be empty")]
    EmptyUnion,
    #[error("threat radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("attack config invalid: {0}")]
    InvalidConfig(String),
    #[error("union is missing the {0:?} threat model")]
    MissingNorm(Lp),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// The three lp-norms used for threat models. Ordering here is the fixed
/// tie-break order for MSD and MAX.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lp {
    Linf,
    L2,
    L1,
}

impl Lp {
    pub const ALL: [Lp; 3] = [Lp::Linf, Lp::L2, Lp::L1];

    pub fn name(&self) -> &'static str {
        match self {
            Lp::Linf => "linf",
            Lp::L2 => "l2",
            Lp::L1 => "l1",
        }
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            Lp::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Lp::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Lp::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }

    /// Hölder-dual exponent as a float (used for linear-model margins).
    pub fn dual(&self) -> f64 {
        match self {
            Lp::Linf => 1.0,
            Lp::L2 => 2.0,
            Lp::L1 => f64::INFINITY,
        }
    }
}

/// A single lp-ball constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatSpec {
    pub p: Lp,
    pub eps: f64,
}

impl ThreatSpec {
    pub fn new(p: Lp, eps: f64) -> Result<Self, AttackError> {
        if eps > 0.0 {
            Ok(Self { p, eps })
        } else {
            Err(AttackError::InvalidRadius(eps))
        }
    }
}

/// A set of lp-ball constraints, at most one per norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreatUnion {
    specs: Vec<ThreatSpec>,
}

impl ThreatUnion {
    pub fn new(specs: Vec<ThreatSpec>) -> Result<Self, AttackError> {
        if specs.is_empty() {
            return Err(AttackError::EmptyUnion);
        }
        for (i, s) in specs.iter().enumerate() {
            if !(s.eps > 0.0) {
                return Err(AttackError::InvalidRadius(s.eps));
            }
            if specs[..i].iter().any(|t| t.p == s.p) {
                return Err(AttackError::DuplicateNorm(s.p));
            }
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[ThreatSpec] {
        &self.specs
    }

    pub fn get(&self, p: Lp) -> Option<ThreatSpec> {
        self.specs.iter().copied().find(|s| s.p == p)
    }

    pub fn require(&self, p: Lp) -> Result<ThreatSpec, AttackError> {
        self.get(p).ok_or(AttackError::MissingNorm(p))
    }
}

/// Step size: explicit, or the per-norm default (`eps/4` for l∞, `eps/3`
/// for l2, `eps/2` for l1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    NormDefault,
}

impl StepSize {
    pub fn resolve(&self, p: Lp, eps: f64) -> f64 {
        match self {
            StepSize::Fixed(s) => *s,
            StepSize::NormDefault => match p {
                Lp::Linf => eps / 4.0,
                Lp::L2 => eps / 3.0,
                Lp::L1 => eps / 2.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub n_steps: usize,
    pub step_size: StepSize,
    pub n_restarts: usize,
    /// Initial top-k fraction for the sparse l1 step; decays linearly to
    /// 0.01 over the attack steps.
    pub k_fraction: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            step_size: StepSize::NormDefault,
            n_restarts: 2,
            k_fraction: 0.05,
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.n_steps < 1 {
            return Err(AttackError::InvalidConfig("n_steps must be >= 1".into()));
        }
        if self.n_restarts < 1 {
            return Err(AttackError::InvalidConfig("n_restarts must be >= 1".into()));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "k_fraction must be in (0, 1], got {}",
                self.k_fraction
            )));
        }
        if let StepSize::Fixed(s) = self.step_size {
            if !(s > 0.0) {
                return Err(AttackError::InvalidConfig(format!("step size must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// k-fraction at step `t`, decayed linearly from the configured value to
    /// 0.01 over the attack.
    fn k_fraction_at(&self, t: usize) -> f64 {
        if self.n_steps <= 1 {
            return self.k_fraction;
        }
        let frac = t as f64 / (self.n_steps - 1) as f64;
        self.k_fraction + (0.01 - self.k_fraction) * frac
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_inputs: Tensor,
    pub success: Vec<bool>,
    pub final_loss: Vec<f64>,
}

/// Coordinate-wise clamp to `[-eps, eps]` (the minimal-l2 projection).
pub fn project_linf(delta: &[f64], eps: f64) -> Vec<f64> {
    delta.iter().map(|&x| x.clamp(-eps, eps)).collect()
}

/// Rescale onto the l2 sphere if outside, identity otherwise.
pub fn project_l2(delta: &[f64], eps: f64) -> Vec<f64> {
    let n = Lp::L2.norm(delta);
    if n <= eps || n == 0.0 {
        delta.to_vec()
    } else {
        let s = eps / n;
        delta.iter().map(|&x| x * s).collect()
    }
}

/// Euclidean projection onto the l1 ball via the sort-based soft threshold.
pub fn project_l1(delta: &[f64], eps: f64) -> Vec<f64> {
    if Lp::L1.norm(delta) <= eps {
        return delta.to_vec();
    }
    let mut mags: Vec<f64> = delta.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cum += m;
        let candidate = (cum - eps) / (k + 1) as f64;
        if m > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    delta.iter().map(|&x| x.signum() * (x.abs() - tau).max(0.0)).collect()
}

/// Projection onto the intersection of the l1 ball with the box constraint
/// `x_clean + delta ∈ [0,1]^d`. By the KKT conditions of the separable
/// problem the solution is a box-clipped soft-thresholding of the input
/// (shrink toward zero first, then clip — coordinates pinned at a box bound
/// keep the bound, not a shrunk value); the threshold is found by bisection
/// on the clipped mass. Fixed point when the input is already feasible.
pub fn project_l1_box(x_clean: &[f64], delta: &[f64], eps: f64) -> Vec<f64> {
    let shrunk = |tau: f64| -> Vec<f64> {
        x_clean
            .iter()
            .zip(delta)
            .map(|(&x, &d)| (d.signum() * (d.abs() - tau).max(0.0)).clamp(-x, 1.0 - x))
            .collect()
    };
    let clipped = shrunk(0.0);
    if Lp::L1.norm(&clipped) <= eps {
        return clipped;
    }
    let mass = |tau: f64| -> f64 { Lp::L1.norm(&shrunk(tau)) };
    let mut lo = 0.0;
    let mut hi = delta.iter().fold(0.0f64, |m, &d| m.max(d.abs()));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + hi) {
            break;
        }
    }
    shrunk(hi)
}

/// Unit-budget ascent direction for one norm: sign of the gradient for l∞,
/// normalized gradient for l2, top-k signed sparse step for l1. Zero
/// gradient yields the zero step.
pub fn ascent_step(p: Lp, grad: &[f64], k_fraction: f64) -> Vec<f64> {
    let d = grad.len();
    if grad.iter().all(|&g| g == 0.0) {
        return vec![0.0; d];
    }
    match p {
        Lp::Linf => grad
            .iter()
            .map(|&g| {
                if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect(),
        Lp::L2 => {
            let n = Lp::L2.norm(grad);
            grad.iter().map(|&g| g / n).collect()
        }
        Lp::L1 => {
            let k = ((k_fraction * d as f64).ceil() as usize).clamp(1, d);
            let mut order: Vec<usize> = (0..d).collect();
            // Sort by |grad| descending, index ascending on ties.
            order.sort_by(|&a, &b| {
                grad[b]
                    .abs()
                    .partial_cmp(&grad[a].abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut step = vec![0.0; d];
            let unit = 1.0 / k as f64;
            for &i in order.iter().take(k) {
                step[i] = grad[i].signum() * unit;
            }
            step
        }
    }
}

/// Project a perturbation into the ball∩box set for the given norm.
fn project_ball_box(p: Lp, x_clean: &[f64], delta: &[f64], eps: f64) -> Vec<f64> {
    match p {
        // Intersection of two boxes: coordinate-wise clamp is exact.
        Lp::Linf => x_clean
            .iter()
            .zip(delta)
            .map(|(&x, &d)| d.clamp(-eps, eps).clamp(-x, 1.0 - x))
            .collect(),
        // Box clipping never increases |delta_i|, so the l2 constraint is
        // preserved after rescaling.
        Lp::L2 => {
            let v = project_l2(delta, eps);
            x_clean.iter().zip(&v).map(|(&x, &d)| d.clamp(-x, 1.0 - x)).collect()
        }
        Lp::L1 => project_l1_box(x_clean, delta, eps),
    }
}

/// Uniform sample from the lp-ball of radius `eps`, in `delta`.
fn random_start<R: Rng>(p: Lp, eps: f64, d: usize, rng: &mut R) -> Vec<f64> {
    match p {
        Lp::Linf => (0..d).map(|_| rng.gen_range(-eps..eps)).collect(),
        Lp::L2 => {
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
            let n = Lp::L2.norm(&v).max(1e-12);
            let r = eps * rng.gen::<f64>().powf(1.0 / d as f64);
            for x in &mut v {
                *x *= r / n;
            }
            v
        }
        Lp::L1 => {
            // Signed simplex sample scaled by a uniform radius.
            let mut e: Vec<f64> = (0..d).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let s: f64 = e.iter().sum();
            let r = eps * rng.gen::<f64>();
            for x in &mut e {
                *x *= r / s;
                if rng.gen::<bool>() {
                    *x = -*x;
                }
            }
            e
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn restart_seed(base: u64, example: usize, restart: usize) -> u64 {
    // splitmix-style mixing of (base, example, restart)
    let mut z = base
        ^ (example as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (restart as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Best-iterate tracker: a misclassified iterate always beats a correctly
/// classified one; within the same class-status, higher loss wins. This
/// keeps the success set monotone in both steps and restarts.
struct BestIterate {
    delta: Vec<f64>,
    loss: f64,
    success: bool,
}

impl BestIterate {
    fn consider(&mut self, delta: &[f64], loss: f64, success: bool) {
        let better = match (success, self.success) {
            (true, false) => true,
            (false, true) => false,
            _ => loss > self.loss,
        };
        if better {
            self.delta = delta.to_vec();
            self.loss = loss;
            self.success = success;
        }
    }
}

fn loss_and_pred_single(
    net: &Network,
    x: &[f64],
    label: usize,
) -> Result<(f64, bool), AttackError> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec());
    let (losses, preds) = per_example_losses(net, &t, &[label])?;
    Ok((losses[0], preds[0] != label))
}

fn grad_single(net: &Network, x: &[f64], label: usize) -> Result<(f64, bool, Vec<f64>), AttackError> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec());
    let (losses, preds, grads) = per_example_grads(net, &t, &[label])?;
    Ok((losses[0], preds[0] != label, grads.data))
}

fn attack_one_example(
    net: &Network,
    x_clean: &[f64],
    label: usize,
    threat: ThreatSpec,
    cfg: &AttackConfig,
    example_idx: usize,
) -> Result<(Vec<f64>, f64, bool), AttackError> {
    let d = x_clean.len();
    let eta = cfg.step_size.resolve(threat.p, threat.eps);
    let mut best = BestIterate { delta: vec![0.0; d], loss: f64::NEG_INFINITY, success: false };
    let mut x = vec![0.0; d];
    for restart in 0..cfg.n_restarts {
        let mut delta = if restart == 0 {
            vec![0.0; d]
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, example_idx, restart));
            let start = random_start(threat.p, threat.eps, d, &mut rng);
            project_ball_box(threat.p, x_clean, &start, threat.eps)
        };
        for t in 0..cfg.n_steps {
            for (xi, (&xc, &dl)) in x.iter_mut().zip(x_clean.iter().zip(&delta)) {
                *xi = xc + dl;
            }
            let (loss, miss, grad) = grad_single(net, &x, label)?;
            best.consider(&delta, loss, miss);
            let dir = ascent_step(threat.p, &grad, cfg.k_fraction_at(t));
            for (dl, dr) in delta.iter_mut().zip(&dir) {
                *dl += eta * dr;
            }
            delta = project_ball_box(threat.p, x_clean, &delta, threat.eps);
        }
        for (xi, (&xc, &dl)) in x.iter_mut().zip(x_clean.iter().zip(&delta)) {
            *xi = xc + dl;
        }
        let (loss, miss) = loss_and_pred_single(net, &x, label)?;
        best.consider(&delta, loss, miss);
    }
    let adv: Vec<f64> = x_clean.iter().zip(&best.delta).map(|(&xc, &dl)| xc + dl).collect();
    debug_assert!(threat.p.norm(&best.delta) <= threat.eps + 1e-9);
    debug_assert!(adv.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
    Ok((adv, best.loss, best.success))
}

/// Best-iterate PGD for one threat model. Parallel across examples; results
/// are bit-identical to a sequential run.
pub fn pgd_attack(
    net: &Network,
    batch: &Batch,
    threat: ThreatSpec,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let n = batch.len();
    let d = batch.inputs.cols();
    let rows: Vec<(Vec<f64>, f64, bool)> = (0..n)
        .into_par_iter()
        .map(|i| attack_one_example(net, batch.inputs.row(i), batch.labels[i], threat, cfg, i))
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(n * d);
    let mut success = Vec::with_capacity(n);
    let mut final_loss = Vec::with_capacity(n);
    for (adv, loss, s) in rows {
        data.extend_from_slice(&adv);
        success.push(s);
        final_loss.push(loss);
    }
    Ok(AttackResult {
        adversarial_inputs: Tensor::new(vec![n, d], data),
        success,
        final_loss,
    })
}

/// One MSD step record: the three candidate losses (in `Lp::ALL` order) and
/// the index of the chosen candidate.
#[derive(Debug, Clone, Copy)]
pub struct MsdStep {
    pub candidate_losses: [f64; 3],
    pub chosen: usize,
}

#[derive(Debug, Clone)]
pub struct MsdResult {
    pub attack: AttackResult,
    /// Total number of steps that chose each norm, in `Lp::ALL` order.
    pub choice_counts: [u64; 3],
    /// Per-example step traces (for telemetry and replay checks).
    pub traces: Vec<Vec<MsdStep>>,
}

fn msd_one_example(
    net: &Network,
    x_clean: &[f64],
    label: usize,
    union: &ThreatUnion,
    cfg: &AttackConfig,
    example_idx: usize,
) -> Result<(Vec<f64>, f64, bool, Vec<MsdStep>), AttackError> {
    let d = x_clean.len();
    let specs: Vec<ThreatSpec> = Lp::ALL
        .iter()
        .map(|&p| union.require(p))
        .collect::<Result<_, _>>()?;
    let etas: Vec<f64> = specs.iter().map(|s| cfg.step_size.resolve(s.p, s.eps)).collect();
    let mut best = BestIterate { delta: vec![0.0; d], loss: f64::NEG_INFINITY, success: false };
    let mut trace = Vec::new();
    let mut x = vec![0.0; d];
    for restart in 0..cfg.n_restarts {
        let mut delta = if restart == 0 {
            vec![0.0; d]
        } else {
            // Random start inside the l∞ ball (a subset of the union).
            let linf = specs[0];
            let mut rng =
                ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, example_idx, restart));
            let start = random_start(Lp::Linf, linf.eps, d, &mut rng);
            project_ball_box(Lp::Linf, x_clean, &start, linf.eps)
        };
        for t in 0..cfg.n_steps {
            for (xi, (&xc, &dl)) in x.iter_mut().zip(x_clean.iter().zip(&delta)) {
                *xi = xc + dl;
            }
            let (loss, miss, grad) = grad_single(net, &x, label)?;
            best.consider(&delta, loss, miss);
            // One gradient, three candidate iterates, three forward passes.
            let mut cand_losses = [f64::NEG_INFINITY; 3];
            let mut cands: Vec<(Vec<f64>, bool)> = Vec::with_capacity(3);
            for (ci, (spec, &eta)) in specs.iter().zip(&etas).enumerate() {
                let dir = ascent_step(spec.p, &grad, cfg.k_fraction_at(t));
                let mut cand: Vec<f64> =
                    delta.iter().zip(&dir).map(|(&dl, &dr)| dl + eta * dr).collect();
                cand = project_ball_box(spec.p, x_clean, &cand, spec.eps);
                for (xi, (&xc, &dl)) in x.iter_mut().zip(x_clean.iter().zip(&cand)) {
                    *xi = xc + dl;
                }
                let (l, m) = loss_and_pred_single(net, &x, label)?;
                cand_losses[ci] = l;
                cands.push((cand, m));
            }
            // argmax with the fixed tie-break order (l∞, l2, l1)
            let mut chosen = 0;
            for ci in 1..3 {
                if cand_losses[ci] > cand_losses[chosen] {
                    chosen = ci;
                }
            }
            trace.push(MsdStep { candidate_losses: cand_losses, chosen });
            let (cand, miss) = std::mem::take(&mut cands[chosen]);
            best.consider(&cand, cand_losses[chosen], miss);
            delta = cand;
        }
        for (xi, (&xc, &dl)) in x.iter_mut().zip(x_clean.iter().zip(&delta)) {
            *xi = xc + dl;
        }
        let (loss, miss) = loss_and_pred_single(net, &x, label)?;
        best.consider(&delta, loss, miss);
    }
    let adv: Vec<f64> = x_clean.iter().zip(&best.delta).map(|(&xc, &dl)| xc + dl).collect();
    Ok((adv, best.loss, best.success, trace))
}

/// Multi-steepest-descent attack over the full three-norm union: per step
/// one input gradient, three candidate iterates (each projected into its own
/// ball∩box), keep the one with highest loss.
pub fn msd_attack(
    net: &Network,
    batch: &Batch,
    union: &ThreatUnion,
    cfg: &AttackConfig,
) -> Result<MsdResult, AttackError> {
    cfg.validate()?;
    for p in Lp::ALL {
        union.require(p)?;
    }
    let n = batch.len();
    let d = batch.inputs.cols();
    let rows: Vec<(Vec<f64>, f64, bool, Vec<MsdStep>)> = (0..n)
        .into_par_iter()
        .map(|i| msd_one_example(net, batch.inputs.row(i), batch.labels[i], union, cfg, i))
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(n * d);
    let mut success = Vec::with_capacity(n);
    let mut final_loss = Vec::with_capacity(n);
    let mut counts = [0u64; 3];
    let mut traces = Vec::with_capacity(n);
    for (adv, loss, s, trace) in rows {
        data.extend_from_slice(&adv);
        success.push(s);
        final_loss.push(loss);
        for step in &trace {
            counts[step.chosen] += 1;
        }
        traces.push(trace);
    }
    Ok(MsdResult {
        attack: AttackResult {
            adversarial_inputs: Tensor::new(vec![n, d], data),
            success,
            final_loss,
        },
        choice_counts: counts,
        traces,
    })
}

/// Smallest radius (within `tol`) at which the recorded attack breaks the
/// example, found by bisection with fixed seeds and cached evaluations.
/// Misclassified inputs have radius 0 by convention; returns `eps_hi` if the
/// attack never succeeds.
pub fn robust_radius(
    net: &Network,
    x: &[f64],
    y: usize,
    p: Lp,
    eps_hi: f64,
    tol: f64,
    cfg: &AttackConfig,
) -> Result<f64, AttackError> {
    assert!(eps_hi > tol && tol > 0.0, "need eps_hi > tol > 0");
    let (_, miss) = loss_and_pred_single(net, x, y)?;
    if miss {
        return Ok(0.0);
    }
    let batch = Batch::new(Tensor::new(vec![1, x.len()], x.to_vec()), vec![y]);
    let mut cache: HashMap<u64, bool> = HashMap::new();
    let mut attack_at = |eps: f64| -> Result<bool, AttackError> {
        if let Some(&hit) = cache.get(&eps.to_bits()) {
            return Ok(hit);
        }
        let threat = ThreatSpec::new(p, eps)?;
        let hit = pgd_attack(net, &batch, threat, cfg)?.success[0];
        cache.insert(eps.to_bits(), hit);
        Ok(hit)
    };
    if !attack_at(eps_hi)? {
        return Ok(eps_hi);
    }
    let (mut lo, mut hi) = (0.0, eps_hi); // lo always fails, hi always succeeds
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if attack_at(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
