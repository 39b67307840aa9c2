//! Geometry of the union of co-centric l1- and l∞-balls and of its convex hull.
//!
//! For radii `eps1`, `epsinf` in dimension `d`, the interesting regime is the
//! "nontrivial" one where neither ball contains the other, i.e.
//! `eps1 ∈ (epsinf, d·epsinf)`. This module provides the closed-form minimum
//! lp-distance from the origin to the complement of the union and of its
//! convex hull, a membership test for the hull, and a brute-force ray-casting
//! oracle that verifies the closed forms independently in low dimension.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Golden ratio constant used by the 1-D golden-section searches below.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Fixed seed for oracle direction sampling (reproducible by design).
const ORACLE_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension must be >= 2, got {0}")]
    InvalidDimension(usize),
    #[error("radii must be positive, got eps1={eps1}, epsinf={epsinf}")]
    InvalidRadius { eps1: f64, epsinf: f64 },
    #[error("p must lie in [1, inf], got {0}")]
    InvalidExponent(f64),
    #[error(
        "degenerate query: eps1={eps1} must lie in (epsinf, d*epsinf) = ({epsinf}, {upper}); \
         use single-ball logic instead"
    )]
    DegenerateQuery { eps1: f64, epsinf: f64, upper: f64 },
    #[error("point has dimension {got}, query expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("oracle refuses d={0} > 6 (cost grows too fast)")]
    OracleDimensionTooLarge(usize),
    #[error("oracle needs at least 10^4 directions, got {0}")]
    TooFewDirections(usize),
}

/// Radii and dimension for union / convex-hull computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryQuery {
    pub eps1: f64,
    pub epsinf: f64,
    pub d: usize,
}

impl GeometryQuery {
    pub fn new(eps1: f64, epsinf: f64, d: usize) -> Result<Self, GeometryError> {
        if d < 2 {
            return Err(GeometryError::InvalidDimension(d));
        }
        if !(eps1 > 0.0) || !(epsinf > 0.0) {
            return Err(GeometryError::InvalidRadius { eps1, epsinf });
        }
        Ok(Self { eps1, epsinf, d })
    }

    /// True iff neither ball contains the other: `eps1 ∈ (epsinf, d·epsinf)`.
    pub fn nontrivial(&self) -> bool {
        self.eps1 > self.epsinf && self.eps1 < self.d as f64 * self.epsinf
    }

    fn require_nontrivial(&self) -> Result<(), GeometryError> {
        if self.nontrivial() {
            Ok(())
        } else {
            Err(GeometryError::DegenerateQuery {
                eps1: self.eps1,
                epsinf: self.epsinf,
                upper: self.d as f64 * self.epsinf,
            })
        }
    }
}

/// Intermediate quantities of the convex-hull radius formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HullRadiusParts {
    /// `eps1 / epsinf`.
    pub ratio: f64,
    /// Fractional part of the ratio, in `[0, 1)`.
    pub alpha: f64,
    /// Dual exponent of `p` (`1/p + 1/q = 1`).
    pub q: f64,
    /// Minimum lp-norm over the complement of the hull.
    pub radius: f64,
}

/// Selects which region the oracle casts rays against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Union,
    ConvexHull,
}

fn check_exponent(p: f64) -> Result<(), GeometryError> {
    if p >= 1.0 {
        Ok(())
    } else {
        Err(GeometryError::InvalidExponent(p))
    }
}

/// Open interval of l1 radii for which the two balls do not contain each other.
pub fn nontrivial_range(epsinf: f64, d: usize) -> Result<(f64, f64), GeometryError> {
    if d < 2 {
        return Err(GeometryError::InvalidDimension(d));
    }
    if !(epsinf > 0.0) {
        return Err(GeometryError::InvalidRadius { eps1: f64::NAN, epsinf });
    }
    Ok((epsinf, d as f64 * epsinf))
}

/// Minimum lp-norm over the complement of the union of the two balls.
///
/// `p = 1` and `p = ∞` are handled as analytic limits (`eps1` resp. `epsinf`)
/// rather than through floating-point exponents.
pub fn min_lp_outside_union(q: &GeometryQuery, p: f64) -> Result<f64, GeometryError> {
    check_exponent(p)?;
    q.require_nontrivial()?;
    if p == 1.0 {
        return Ok(q.eps1);
    }
    if p.is_infinite() {
        return Ok(q.epsinf);
    }
    let dm1 = (q.d - 1) as f64;
    let term = (q.eps1 - q.epsinf).powf(p) / dm1.powf(p - 1.0);
    Ok((q.epsinf.powf(p) + term).powf(1.0 / p))
}

/// Upper bound on the l2 exit radius of the union: `sqrt(epsinf^2 + eps1^2/(d-1))`.
pub fn l2_union_upper_bound(q: &GeometryQuery) -> Result<f64, GeometryError> {
    q.require_nontrivial()?;
    Ok((q.epsinf * q.epsinf + q.eps1 * q.eps1 / (q.d - 1) as f64).sqrt())
}

/// Minimum lp-norm over the complement of the convex hull of the union.
pub fn min_lp_outside_hull(q: &GeometryQuery, p: f64) -> Result<HullRadiusParts, GeometryError> {
    check_exponent(p)?;
    q.require_nontrivial()?;
    let ratio = q.eps1 / q.epsinf;
    let alpha = ratio - ratio.floor();
    if p == 1.0 {
        // q = ∞ limit: (ratio - alpha + alpha^q)^(1/q) -> 1 since ratio - alpha >= 1.
        return Ok(HullRadiusParts { ratio, alpha, q: f64::INFINITY, radius: q.eps1 });
    }
    if p.is_infinite() {
        // q = 1: denominator collapses to the ratio itself.
        return Ok(HullRadiusParts { ratio, alpha, q: 1.0, radius: q.epsinf });
    }
    let dual = p / (p - 1.0);
    let radius = q.eps1 / (ratio - alpha + alpha.powf(dual)).powf(1.0 / dual);
    Ok(HullRadiusParts { ratio, alpha, q: dual, radius })
}

/// Residual of the optimal clip + soft-threshold decomposition at mixing
/// weight `lambda`: membership holds iff the minimum over lambda is <= 0.
fn hull_gap(point: &[f64], q: &GeometryQuery, lambda: f64) -> f64 {
    let clip = (1.0 - lambda) * q.epsinf;
    let mut residual = 0.0;
    for &y in point {
        let excess = y.abs() - clip;
        if excess > 0.0 {
            residual += excess;
        }
    }
    residual - lambda * q.eps1
}

/// Decides whether `point` lies in the convex hull of the union.
///
/// A point y is in the hull iff some lambda in [0,1] splits it into an
/// l∞-part of radius (1-lambda)·epsinf (by clipping) and an l1-part of mass
/// at most lambda·eps1 (the soft-threshold residual). The gap is convex in
/// lambda, so a grid scan plus bisection refinement around the grid minimum
/// decides membership.
pub fn hull_membership(point: &[f64], q: &GeometryQuery) -> Result<bool, GeometryError> {
    if point.len() != q.d {
        return Err(GeometryError::DimensionMismatch { expected: q.d, got: point.len() });
    }
    let tol = 1e-9 * (1.0 + q.eps1);
    const GRID: usize = 1024;
    let mut best = f64::INFINITY;
    let mut best_i = 0usize;
    for i in 0..=GRID {
        let lambda = i as f64 / GRID as f64;
        let g = hull_gap(point, q, lambda);
        if g <= tol {
            return Ok(true);
        }
        if g < best {
            best = g;
            best_i = i;
        }
    }
    // Golden-section refinement of the convex gap around the grid minimum,
    // down to a lambda window of 1e-10.
    let mut lo = (best_i.saturating_sub(1)) as f64 / GRID as f64;
    let mut hi = ((best_i + 1).min(GRID)) as f64 / GRID as f64;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = hull_gap(point, q, a);
    let mut fb = hull_gap(point, q, b);
    while hi - lo > 1e-10 {
        if fa.min(fb) <= tol {
            return Ok(true);
        }
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = hull_gap(point, q, a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = hull_gap(point, q, b);
        }
    }
    Ok(fa.min(fb) <= tol)
}

fn norm_l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn norm_linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm_lp(v: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        return norm_l1(v);
    }
    if p.is_infinite() {
        return norm_linf(v);
    }
    if p == 2.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Scale t at which the ray `t * u` leaves the union: the later of the two
/// per-ball exits.
fn union_exit_scale(u: &[f64], q: &GeometryQuery) -> f64 {
    (q.eps1 / norm_l1(u)).max(q.epsinf / norm_linf(u))
}

/// Scale at which the ray `t * u` leaves the convex hull, by bisection on t
/// using the membership test.
fn hull_exit_scale(u: &[f64], q: &GeometryQuery, rel_tol: f64) -> f64 {
    let mut lo = union_exit_scale(u, q); // union ⊆ hull, so still inside
    // Every hull point has l1 norm at most max(eps1, d·epsinf).
    let mut hi = 1.0000001 * q.eps1.max(q.d as f64 * q.epsinf) / norm_l1(u);
    if hi <= lo {
        return lo;
    }
    let mut buf = vec![0.0; u.len()];
    let inside = |t: f64, buf: &mut [f64]| {
        for (b, &x) in buf.iter_mut().zip(u) {
            *b = t * x;
        }
        hull_membership(buf, q).expect("dimension checked")
    };
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if inside(mid, &mut buf) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn exit_objective(u: &[f64], q: &GeometryQuery, p: f64, region: RegionKind, rel_tol: f64) -> f64 {
    let t = match region {
        RegionKind::Union => union_exit_scale(u, q),
        RegionKind::ConvexHull => hull_exit_scale(u, q, rel_tol),
    };
    t * norm_lp(u, p)
}

/// Brute-force minimum lp-norm over the complement of the region, by casting
/// seeded random rays and refining the best direction coordinate-wise with
/// golden-section line searches. Independent of the closed forms above.
///
/// Deterministic given `(n_dirs, refine_steps)`; refuses `d > 6`.
pub fn oracle_min_norm(
    q: &GeometryQuery,
    p: f64,
    region: RegionKind,
    n_dirs: usize,
    refine_steps: usize,
) -> Result<f64, GeometryError> {
    check_exponent(p)?;
    q.require_nontrivial()?;
    if q.d > 6 {
        return Err(GeometryError::OracleDimensionTooLarge(q.d));
    }
    if n_dirs < 10_000 {
        return Err(GeometryError::TooFewDirections(n_dirs));
    }

    // Pre-generate all directions so the reduction is order-independent.
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let mut u: Vec<f64> = (0..q.d).map(|_| gaussian(&mut rng)).collect();
        let n = norm_lp(&u, 2.0);
        if n < 1e-12 {
            u = vec![1.0; q.d];
        } else {
            for x in &mut u {
                *x /= n;
            }
        }
        dirs.push(u);
    }

    // Coarse scan at a loose exit tolerance, then refine the best few
    // starts. Multiple starts matter: the objective is non-smooth and the
    // coordinate-wise search below can stall on a kink.
    let coarse_tol = 1e-5;
    let values: Vec<f64> = dirs
        .par_iter()
        .map(|u| exit_objective(u, q, p, region, coarse_tol))
        .collect();
    let mut order: Vec<usize> = (0..n_dirs).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let fine_tol = 1e-8;
    let mut overall = f64::INFINITY;
    for &start in order.iter().take(8) {
        let mut u = dirs[start].clone();
        let mut best = exit_objective(&u, q, p, region, fine_tol);
        let mut window = 0.1;
        for step in 0..refine_steps {
            let coord = step % q.d;
            let center = u[coord];
            let (mut lo, mut hi) = (center - window, center + window);
            let eval = |c: f64, u: &mut Vec<f64>| {
                u[coord] = c;
                if norm_linf(u) < 1e-9 {
                    return f64::INFINITY; // degenerate zero direction
                }
                exit_objective(u, q, p, region, fine_tol)
            };
            let mut a = hi - INV_PHI * (hi - lo);
            let mut b = lo + INV_PHI * (hi - lo);
            let mut fa = eval(a, &mut u);
            let mut fb = eval(b, &mut u);
            for _ in 0..24 {
                if fa < fb {
                    hi = b;
                    b = a;
                    fb = fa;
                    a = hi - INV_PHI * (hi - lo);
                    fa = eval(a, &mut u);
                } else {
                    lo = a;
                    a = b;
                    fa = fb;
                    b = lo + INV_PHI * (hi - lo);
                    fb = eval(b, &mut u);
                }
            }
            let (c, fc) = if fa < fb { (a, fa) } else { (b, fb) };
            if fc < best {
                best = fc;
                u[coord] = c;
            } else {
                u[coord] = center;
            }
            if (step + 1) % q.d == 0 {
                window *= 0.6;
            }
        }
        // Joint stochastic polish: escapes the kinks (tied coordinates)
        // where the axis-aligned search is stationary.
        let mut polish_rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED ^ 0x9011_54ed);
        let mut sigma = 0.02;
        for it in 0..400 {
            let cand: Vec<f64> =
                u.iter().map(|&x| x + sigma * gaussian(&mut polish_rng)).collect();
            if norm_linf(&cand) < 1e-9 {
                continue;
            }
            let fc = exit_objective(&cand, q, p, region, fine_tol);
            if fc < best {
                best = fc;
                u = cand;
            }
            if (it + 1) % 50 == 0 {
                sigma *= 0.5;
            }
        }
        overall = overall.min(best);
    }
    Ok(overall)
}

/// Standard normal draw via Box-Muller (avoids pulling in rand_distr).
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
