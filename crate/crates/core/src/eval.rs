//! Robustness reporting: clean/per-norm/union accuracy, robustness-vs-ε
//! curves, the radii-sweep experiment, telemetry summaries, and the CSV
//! serializations of all of them.

use std::fmt::Write as _;
use thiserror::Error;

use crate::attacks::{pgd_attack, AttackConfig, AttackError, Lp, ThreatSpec, ThreatUnion};
use crate::geometry::{min_lp_outside_hull, GeometryError, GeometryQuery};
use crate::net::{forward, predict, Batch, NetError, Network};
use crate::training::{finetune, Scheme, SelectionTelemetry, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("epsilon grid is empty")]
    EmptyGrid,
    #[error("epsilon grid must be strictly increasing and nonnegative")]
    BadGrid,
    #[error("radii pair (eps_inf={eps_inf}, eps1={eps1}) is trivial: need eps1 > eps_inf")]
    TrivialPair { eps_inf: f64, eps1: f64 },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Aggregate robustness of one model on one dataset. Construction asserts
/// the ordering invariants, so a report in hand is always consistent.
#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub clean: f64,
    /// Per-norm robust accuracy, in the union's spec order.
    pub acc_per_norm: Vec<(Lp, f64)>,
    pub average: f64,
    pub union: f64,
    pub n_points: usize,
    /// `matrix[i][j]`: example i survived the j-th norm's attack (and was
    /// correctly classified to begin with).
    pub matrix: Vec<Vec<bool>>,
}

impl RobustnessReport {
    /// Build the aggregates from the per-point matrix and verify every
    /// ordering invariant.
    pub fn from_matrix(clean: f64, norms: &[Lp], matrix: Vec<Vec<bool>>) -> Self {
        let n = matrix.len();
        let k = norms.len();
        let frac = |count: usize| count as f64 / n.max(1) as f64;
        let acc_per_norm: Vec<(Lp, f64)> = (0..k)
            .map(|j| (norms[j], frac(matrix.iter().filter(|row| row[j]).count())))
            .collect();
        let union = frac(matrix.iter().filter(|row| row.iter().all(|&b| b)).count());
        let average = acc_per_norm.iter().map(|(_, a)| a).sum::<f64>() / k.max(1) as f64;
        let min = acc_per_norm.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
        let max = acc_per_norm.iter().map(|(_, a)| *a).fold(0.0, f64::max);
        assert!(union <= min + 1e-12, "union {union} > min per-norm {min}");
        assert!(min <= average + 1e-12 && average <= max + 1e-12);
        assert!(max <= clean + 1e-12, "robust accuracy {max} above clean {clean}");
        Self { clean, acc_per_norm, average, union, n_points: n, matrix }
    }
}

/// Full robustness report: clean pass, then one attack per norm on the
/// correctly classified points.
pub fn evaluate(
    net: &Network,
    dataset: &Batch,
    union: &ThreatUnion,
    attack_cfg: &AttackConfig,
) -> Result<RobustnessReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = dataset.len();
    let logits = forward(net, &dataset.inputs)?;
    let preds = predict(&logits);
    let correct: Vec<bool> = preds.iter().zip(&dataset.labels).map(|(p, y)| p == y).collect();
    let clean = correct.iter().filter(|&&c| c).count() as f64 / n as f64;

    let correct_idx: Vec<usize> = (0..n).filter(|&i| correct[i]).collect();
    let sub = dataset.select(&correct_idx);
    let norms: Vec<Lp> = union.specs().iter().map(|s| s.p).collect();
    let mut matrix = vec![vec![false; norms.len()]; n];
    for (j, spec) in union.specs().iter().enumerate() {
        if sub.is_empty() {
            continue;
        }
        let res = pgd_attack(net, &sub, *spec, attack_cfg)?;
        for (pos, &i) in correct_idx.iter().enumerate() {
            matrix[i][j] = !res.success[pos];
        }
    }
    Ok(RobustnessReport::from_matrix(clean, &norms, matrix))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub eps: f64,
    pub robust_accuracy: f64,
}

/// Robust accuracy as a function of the attack budget. Monotonicity is
/// exact by construction: an example broken at some ε stays broken at every
/// larger ε, and only surviving examples are re-attacked.
pub fn robustness_curve(
    net: &Network,
    dataset: &Batch,
    p: Lp,
    eps_grid: &[f64],
    attack_cfg: &AttackConfig,
) -> Result<Vec<CurvePoint>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if eps_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if eps_grid.windows(2).any(|w| w[1] <= w[0]) || eps_grid[0] < 0.0 {
        return Err(EvalError::BadGrid);
    }
    let n = dataset.len();
    let logits = forward(net, &dataset.inputs)?;
    let preds = predict(&logits);
    let mut alive: Vec<usize> =
        (0..n).filter(|&i| preds[i] == dataset.labels[i]).collect();
    let mut curve = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if eps > 0.0 && !alive.is_empty() {
            let sub = dataset.select(&alive);
            let res = pgd_attack(net, &sub, ThreatSpec::new(p, eps)?, attack_cfg)?;
            alive = alive
                .iter()
                .zip(&res.success)
                .filter(|(_, &s)| !s)
                .map(|(&i, _)| i)
                .collect();
        }
        curve.push(CurvePoint { eps, robust_accuracy: alive.len() as f64 / n as f64 });
    }
    Ok(curve)
}

/// Evenly spaced grid from `eps_max / n_points` to `eps_max`, prefixed
/// with 0.
pub fn linspace_grid(eps_max: f64, n_points: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    for i in 1..=n_points {
        g.push(eps_max * i as f64 / n_points as f64);
    }
    g
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub eps_inf: f64,
    pub eps1: f64,
    /// Largest l2 ball inside the convex hull of the two extreme balls —
    /// the radius the extreme-norm training is predicted to cover.
    pub predicted_eps2: f64,
    pub curve: Vec<CurvePoint>,
}

/// Fine-tune one copy of the checkpoint per (ε∞, ε1) pair with extreme-norm
/// training, then measure its l2 robustness curve.
#[allow(clippy::too_many_arguments)]
pub fn radii_sweep(
    checkpoint: &Network,
    train_set: &Batch,
    test_set: &Batch,
    pairs: &[(f64, f64)],
    base_cfg: &TrainConfig,
    eps_grid: &[f64],
    curve_attack: &AttackConfig,
) -> Result<Vec<SweepEntry>, EvalError> {
    let d = checkpoint.input_dim();
    let mut out = Vec::with_capacity(pairs.len());
    for &(eps_inf, eps1) in pairs {
        if eps1 <= eps_inf {
            return Err(EvalError::TrivialPair { eps_inf, eps1 });
        }
        let query = GeometryQuery::new(eps1, eps_inf, d)?;
        let predicted_eps2 = min_lp_outside_hull(&query, 2.0)?.radius;
        let union = ThreatUnion::new(vec![
            ThreatSpec::new(Lp::Linf, eps_inf)?,
            ThreatSpec::new(Lp::L1, eps1)?,
        ])?;
        let cfg = TrainConfig { scheme: Scheme::Eat, union, ..base_cfg.clone() };
        let tuned = finetune(checkpoint.clone(), train_set, &cfg)?;
        let curve = robustness_curve(&tuned.net, test_set, Lp::L2, eps_grid, curve_attack)?;
        out.push(SweepEntry { eps_inf, eps1, predicted_eps2, curve });
    }
    Ok(out)
}

/// Per-epoch fractions of norm choices in `Lp::ALL` order; `None` rows had
/// no recorded choices (non-selecting schemes) and are omitted from the CSV.
pub fn telemetry_summary(t: &SelectionTelemetry) -> Vec<(usize, Option<[f64; 3]>)> {
    t.per_epoch
        .iter()
        .enumerate()
        .map(|(e, counts)| {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                (e, None)
            } else {
                (e, Some(std::array::from_fn(|i| counts[i] as f64 / total as f64)))
            }
        })
        .collect()
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

/// `report.csv` contents (4-decimal fractions, LF line endings).
pub fn report_csv(model: &str, r: &RobustnessReport, seed: u64) -> String {
    let get = |p: Lp| {
        r.acc_per_norm
            .iter()
            .find(|(q, _)| *q == p)
            .map(|(_, a)| f4(*a))
            .unwrap_or_default()
    };
    let mut s = String::from("model,clean,acc_linf,acc_l2,acc_l1,average,union,n_points,seed\n");
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{}",
        model,
        f4(r.clean),
        get(Lp::Linf),
        get(Lp::L2),
        get(Lp::L1),
        f4(r.average),
        f4(r.union),
        r.n_points,
        seed
    );
    s
}

/// `curve.csv` contents for one or more per-norm curves.
pub fn curve_csv(curves: &[(Lp, Vec<CurvePoint>)]) -> String {
    let mut s = String::from("p,eps,robust_acc\n");
    for (p, curve) in curves {
        for pt in curve {
            let _ = writeln!(s, "{},{},{}", p.name(), f4(pt.eps), f4(pt.robust_accuracy));
        }
    }
    s
}

/// `telemetry.csv` contents; all-zero epochs are omitted.
pub fn telemetry_csv(t: &SelectionTelemetry) -> String {
    let mut s = String::from("epoch,frac_linf,frac_l2,frac_l1\n");
    for (epoch, row) in telemetry_summary(t) {
        if let Some(f) = row {
            let _ = writeln!(s, "{},{},{},{}", epoch, f4(f[0]), f4(f[1]), f4(f[2]));
        }
    }
    s
}
