//! End-to-end acceptance gate: one test per acceptance criterion, each
//! printing a single PASS line (visible with `--nocapture`) or failing the
//! assertion that names the violated bound.

use std::path::Path;
use std::process::Command;

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use eat_lab::attacks::{
    msd_attack, pgd_attack, project_l1, project_l1_box, robust_radius, AttackConfig, Lp,
    StepSize, ThreatSpec, ThreatUnion,
};
use eat_lab::data::{generate, lift_batch, DatasetKind, DatasetSpec};
use eat_lab::eval::{evaluate, linspace_grid, robustness_curve, RobustnessReport};
use eat_lab::geometry::{
    l2_union_upper_bound, min_lp_outside_hull, min_lp_outside_union, nontrivial_range,
    oracle_min_norm, GeometryQuery, RegionKind,
};
use eat_lab::net::{grad_check, Activation, Batch, Network, Tensor};
use eat_lab::training::{
    eat_sampling_probability, finetune, generate_batch_perturbation, train, LrSchedule,
    RunningRobustError, Scheme, Selection, TrainConfig, TrainOutcome,
};

fn pass(tag: &str) {
    println!("acceptance {tag}: PASS");
}

fn q(eps1: f64, epsinf: f64, d: usize) -> GeometryQuery {
    GeometryQuery::new(eps1, epsinf, d).unwrap()
}

#[test]
fn a01_geometry_reference_constants() {
    let v = l2_union_upper_bound(&q(12.0, 8.0 / 255.0, 3072)).unwrap();
    assert!((v - 0.2188).abs() < 5e-4, "l2 union bound {v}");

    let v = min_lp_outside_hull(&q(10.0, 0.3, 784), 2.0).unwrap().radius;
    assert!((v - 1.738).abs() < 0.01, "hull radius {v}");
    let v = min_lp_outside_hull(&q(14.0, 0.33, 784), 2.0).unwrap().radius;
    assert!((v - 2.156).abs() < 0.01, "hull radius {v}");
    let v = min_lp_outside_hull(&q(255.0, 4.0 / 255.0, 150_528), 2.0).unwrap().radius;
    assert!((v - 2.000).abs() < 1e-3, "hull radius {v}");
    // Known reference anomaly: direct evaluation gives 0.6138 vs the
    // reported 0.6178; accept within 1% of the reported value.
    let v = min_lp_outside_hull(&q(12.0, 8.0 / 255.0, 3072), 2.0).unwrap().radius;
    assert!((v - 0.6178).abs() / 0.6178 < 0.01, "hull radius {v}");

    let (_, hi) = nontrivial_range(8.0 / 255.0, 3072).unwrap();
    assert!((hi - 96.38).abs() < 0.01, "nontrivial upper bound {hi}");
    pass("01 geometry-constants");
}

#[test]
fn a02_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a2c);
    let ps = [1.0, 1.5, 2.0, 4.0, f64::INFINITY];
    for case in 0..200 {
        let d = 2 + case % 3;
        let epsinf = rng.gen_range(0.2..1.0);
        // Strictly inside the nontrivial band epsinf < eps1 < d*epsinf.
        let frac: f64 = rng.gen_range(0.1..0.9);
        let eps1 = epsinf * (1.0 + frac * (d as f64 - 1.0));
        let p = ps[case % ps.len()];
        let query = q(eps1, epsinf, d);

        let closed = min_lp_outside_union(&query, p).unwrap();
        let oracle = oracle_min_norm(&query, p, RegionKind::Union, 20_000, 200).unwrap();
        assert!(
            (closed - oracle).abs() / closed <= 1e-3,
            "union d={d} p={p} eps=({epsinf},{eps1}): closed {closed} oracle {oracle}"
        );

        let closed = min_lp_outside_hull(&query, p).unwrap().radius;
        let oracle = oracle_min_norm(&query, p, RegionKind::ConvexHull, 20_000, 200).unwrap();
        assert!(
            (closed - oracle).abs() / closed <= 1e-3,
            "hull d={d} p={p} eps=({epsinf},{eps1}): closed {closed} oracle {oracle}"
        );
    }
    pass("02 oracle-equivalence");
}

/// Exhaustive scan over the soft-threshold level: by the KKT conditions of
/// the separable projection problems, the optimum of both the l1 and the
/// l1∩box projection is a (box-clipped) soft-thresholding of the input, so
/// a fine one-dimensional grid over the threshold is a complete oracle.
fn grid_oracle_l1(delta: &[f64], eps: f64, box_clip: Option<&[f64]>) -> f64 {
    let tau_max = delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut best = f64::INFINITY;
    let n_grid = 200_000;
    for k in 0..=n_grid {
        let tau = tau_max * k as f64 / n_grid as f64;
        let mut l1 = 0.0;
        let mut dist2 = 0.0;
        for (i, &v) in delta.iter().enumerate() {
            let mut z = v.signum() * (v.abs() - tau).max(0.0);
            if let Some(x) = box_clip {
                z = z.clamp(-x[i], 1.0 - x[i]);
            }
            l1 += z.abs();
            dist2 += (v - z) * (v - z);
        }
        if l1 <= eps + 1e-9 && dist2 < best {
            best = dist2;
        }
    }
    best.sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn a03_projection_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a3c);
    for case in 0..500 {
        let d = 2 + case % 3;
        let eps = rng.gen_range(0.2..1.5);
        let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..0.95)).collect();

        let proj = project_l1(&delta, eps);
        let oracle = grid_oracle_l1(&delta, eps, None);
        let obj = dist(&delta, &proj);
        assert!(proj.iter().map(|v| v.abs()).sum::<f64>() <= eps + 1e-9, "l1 infeasible");
        assert!(obj <= oracle + 1e-3, "l1 proj obj {obj} vs oracle {oracle}");
        let twice = project_l1(&proj, eps);
        assert!(dist(&proj, &twice) <= 1e-10, "l1 projection not idempotent");

        let proj = project_l1_box(&x, &delta, eps);
        let oracle = grid_oracle_l1(&delta, eps, Some(&x));
        let obj = dist(&delta, &proj);
        assert!(proj.iter().map(|v| v.abs()).sum::<f64>() <= eps + 1e-9, "l1∩box infeasible");
        for (v, xi) in proj.iter().zip(&x) {
            assert!(xi + v >= -1e-12 && xi + v <= 1.0 + 1e-12, "outside the box");
        }
        assert!(obj <= oracle + 1e-3, "l1∩box proj obj {obj} vs oracle {oracle}");
        let twice = project_l1_box(&x, &proj, eps);
        assert!(dist(&proj, &twice) <= 1e-10, "l1∩box projection not idempotent");
    }
    pass("03 projection-optimality");
}

#[test]
fn a04_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a4c);
    for k in 0..20u64 {
        let d_in = rng.gen_range(2..6);
        let hidden = rng.gen_range(3..10);
        let classes = rng.gen_range(2..5);
        let net =
            Network::init(&[d_in, hidden, classes], Activation::Softplus, 0xa4 + k).unwrap();
        let n = 4;
        let data: Vec<f64> = (0..n * d_in).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let batch = Batch::new(Tensor::new(vec![n, d_in], data), labels);
        let worst = grad_check(&net, &batch, 1e-5).unwrap();
        assert!(worst < 1e-4, "net {k}: worst relative gradient error {worst}");
    }
    pass("04 gradient-correctness");
}

#[test]
fn a05_scheme_selection_traces() {
    let net = Network::init(&[6, 16, 3], Activation::ReLU, 0xa5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a5c);
    let n = 24;
    let data: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let batch = Batch::new(Tensor::new(vec![n, 6], data), labels);
    let union = ThreatUnion::new(vec![
        ThreatSpec::new(Lp::Linf, 0.05).unwrap(),
        ThreatSpec::new(Lp::L2, 0.15).unwrap(),
        ThreatSpec::new(Lp::L1, 0.3).unwrap(),
    ])
    .unwrap();
    let cfg = AttackConfig { n_steps: 8, n_restarts: 2, seed: 7, ..Default::default() };

    // MAX: replay the three per-norm attacks (they are deterministic given
    // the config) and demand the kept row is the argmax-loss copy, exactly.
    let mut scheme_rng = ChaCha8Rng::seed_from_u64(1);
    let mut rerr = RunningRobustError::default();
    let pert = generate_batch_perturbation(
        Scheme::Max, &net, &batch, &union, &cfg, &mut scheme_rng, &mut rerr,
    )
    .unwrap();
    let replays: Vec<_> = Lp::ALL
        .iter()
        .map(|&p| pgd_attack(&net, &batch, union.require(p).unwrap(), &cfg).unwrap())
        .collect();
    let mut counts = [0u64; 3];
    for i in 0..n {
        let mut best = 0;
        for c in 1..3 {
            if replays[c].final_loss[i] > replays[best].final_loss[i] {
                best = c;
            }
        }
        counts[best] += 1;
        assert_eq!(
            pert.batch.inputs.row(i),
            replays[best].adversarial_inputs.row(i),
            "example {i}: kept copy is not the argmax-loss copy"
        );
    }
    assert_eq!(counts, pert.telemetry, "argmax telemetry mismatch");

    // MSD: every recorded step must have chosen the argmax-loss candidate
    // (ties keep the earlier norm in (l∞, l2, l1) order), exactly.
    let res = msd_attack(&net, &batch, &union, &cfg).unwrap();
    let mut n_steps = 0;
    for trace in &res.traces {
        for step in trace {
            let mut best = 0;
            for c in 1..3 {
                if step.candidate_losses[c] > step.candidate_losses[best] {
                    best = c;
                }
            }
            assert_eq!(step.chosen, best, "MSD step chose a non-argmax candidate");
            n_steps += 1;
        }
    }
    assert!(n_steps >= n * cfg.n_steps, "MSD traces incomplete");
    pass("05 scheme-selection-traces");
}

#[test]
fn a06_sampling_frequencies() {
    let mut rerr = RunningRobustError::default();
    rerr.record(Lp::L1, 0.8);
    rerr.record(Lp::Linf, 0.2);
    let (p_l1, p_linf) = eat_sampling_probability(&rerr);
    assert!((p_l1 - 0.8).abs() < 1e-12 && (p_linf - 0.2).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(0x0a6c);
    let n = 100_000;
    let mut l1_count = 0u64;
    for _ in 0..n {
        if rng.gen::<f64>() < p_l1 {
            l1_count += 1;
        }
    }
    let freq = l1_count as f64 / n as f64;
    assert!((freq - 0.8).abs() <= 0.006, "l1 frequency {freq} outside 0.8 ± 0.006");
    pass("06 sampling-frequencies");
}

// ---------------------------------------------------------------------------
// Desk-scale multi-norm training workload shared by the ordering, cost, and
// fine-tuning criteria. Radii chosen so the hull prediction supplies eps2.

const RINGS_LIFT_DIM: usize = 20;
const WORKLOAD_EPS_INF: f64 = 0.0045;
const WORKLOAD_EPS_L1: f64 = 0.08;
const WORKLOAD_EPOCHS: usize = 200;

fn workload_union() -> ThreatUnion {
    let eps2 = min_lp_outside_hull(
        &q(WORKLOAD_EPS_L1, WORKLOAD_EPS_INF, RINGS_LIFT_DIM),
        2.0,
    )
    .unwrap()
    .radius;
    ThreatUnion::new(vec![
        ThreatSpec::new(Lp::Linf, WORKLOAD_EPS_INF).unwrap(),
        ThreatSpec::new(Lp::L2, eps2).unwrap(),
        ThreatSpec::new(Lp::L1, WORKLOAD_EPS_L1).unwrap(),
    ])
    .unwrap()
}

fn workload_data(seed: u64) -> (Batch, Batch) {
    let spec =
        DatasetSpec { kind: DatasetKind::Rings { n_per_class: 500 }, seed };
    let ds = generate(&spec).unwrap();
    // One frozen random embedding per seeded replicate.
    (
        lift_batch(&ds.train, RINGS_LIFT_DIM, seed).unwrap(),
        lift_batch(&ds.test, RINGS_LIFT_DIM, seed).unwrap(),
    )
}

fn workload_train(scheme: Scheme, train_set: &Batch, seed: u64) -> TrainOutcome {
    let cfg = TrainConfig {
        scheme,
        union: workload_union(),
        epochs: WORKLOAD_EPOCHS,
        batch_size: 32,
        lr_schedule: LrSchedule::Piecewise {
            initial: 0.02,
            drop_epoch: WORKLOAD_EPOCHS * 3 / 4,
            factor: 10.0,
        },
        momentum: 0.9,
        weight_decay: 5e-4,
        attack: AttackConfig {
            n_steps: 10,
            step_size: StepSize::NormDefault,
            n_restarts: 1,
            k_fraction: 0.05,
            seed,
        },
        seed,
        checkpoint_selection: Selection::Final,
    };
    let net =
        Network::init(&[RINGS_LIFT_DIM, 64, 64, 2], Activation::ReLU, 0xabc).unwrap();
    train(net, train_set, &cfg).unwrap()
}

fn workload_eval(net: &Network, test_set: &Batch, seed: u64) -> RobustnessReport {
    let cfg = AttackConfig {
        n_steps: 20,
        step_size: StepSize::NormDefault,
        n_restarts: 3,
        k_fraction: 0.05,
        seed,
    };
    evaluate(net, test_set, &workload_union(), &cfg).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn median_epoch_seconds(out: &TrainOutcome) -> f64 {
    median(out.history.epochs.iter().map(|e| e.wall_seconds).collect())
}

#[test]
fn a07_a08_a09_multi_norm_training() {
    let seeds = [0u64, 1, 2];
    let mut gap_eat_single = Vec::new();
    let mut gap_max_eat = Vec::new();
    let mut ratio_eat = Vec::new();
    let mut ratio_max = Vec::new();
    let mut ft_union_gain = Vec::new();
    let mut ft_linf_drop = Vec::new();
    let mut ft_l1_gain = Vec::new();

    for &seed in &seeds {
        let (train_set, test_set) = workload_data(seed);
        let single = workload_train(Scheme::Single(Lp::Linf), &train_set, seed);
        let eat = workload_train(Scheme::Eat, &train_set, seed);
        let max = workload_train(Scheme::Max, &train_set, seed);

        let r_single = workload_eval(&single.net, &test_set, seed);
        let r_eat = workload_eval(&eat.net, &test_set, seed);
        let r_max = workload_eval(&max.net, &test_set, seed);
        for r in [&r_single, &r_eat, &r_max] {
            let min = r.acc_per_norm.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
            assert!(r.union <= min + 1e-12, "union above a per-norm accuracy");
        }
        gap_eat_single.push(r_eat.union - r_single.union);
        gap_max_eat.push(r_max.union - r_eat.union);

        let t_single = median_epoch_seconds(&single);
        ratio_eat.push(median_epoch_seconds(&eat) / t_single);
        ratio_max.push(median_epoch_seconds(&max) / t_single);

        let acc = |r: &RobustnessReport, p: Lp| {
            r.acc_per_norm.iter().find(|(q, _)| *q == p).unwrap().1
        };
        // Short transfer runs: stronger attack, gentle rate, best-of-three
        // epoch snapshots.
        let ft_cfg = |scheme: Scheme| TrainConfig {
            scheme,
            union: workload_union(),
            epochs: 3,
            batch_size: 32,
            lr_schedule: LrSchedule::ThirdsDrop { initial: 0.005 },
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig {
                n_steps: 20,
                step_size: StepSize::NormDefault,
                n_restarts: 2,
                k_fraction: 0.05,
                seed,
            },
            seed,
            checkpoint_selection: Selection::Best,
        };
        let ft_eat = finetune(single.net.clone(), &train_set, &ft_cfg(Scheme::Eat)).unwrap();
        let r_ft_eat = workload_eval(&ft_eat.net, &test_set, seed);
        ft_union_gain.push(r_ft_eat.union - r_single.union);
        ft_linf_drop.push(acc(&r_single, Lp::Linf) - acc(&r_ft_eat, Lp::Linf));

        let ft_l1 =
            finetune(single.net.clone(), &train_set, &ft_cfg(Scheme::Single(Lp::L1))).unwrap();
        let r_ft_l1 = workload_eval(&ft_l1.net, &test_set, seed);
        ft_l1_gain.push(acc(&r_ft_l1, Lp::L1) - acc(&r_single, Lp::L1));
    }

    let gap = median(gap_eat_single);
    assert!(gap >= 0.10, "median union gap over Single-l∞ is {gap:.3}, need ≥ 0.10");
    // "Within 5 points of MAX" in the direction that can fail: the cheap
    // scheme must not sit more than 5 points below the expensive one.
    let shortfall = median(gap_max_eat);
    assert!(shortfall <= 0.05, "median union shortfall vs MAX is {shortfall:.3}, need ≤ 0.05");
    pass("07 multi-norm-ordering");

    let re = median(ratio_eat);
    let rm = median(ratio_max);
    assert!(re <= 1.3, "median per-epoch time ratio vs Single is {re:.2}, need ≤ 1.3");
    assert!(rm >= 2.5, "median MAX per-epoch time ratio is {rm:.2}, need ≥ 2.5");
    pass("08 cost-ordering");

    let g = median(ft_union_gain);
    assert!(g >= 0.15, "median fine-tune union gain is {g:.3}, need ≥ 0.15");
    let d = median(ft_linf_drop);
    assert!(d <= 0.15, "median fine-tune l∞ drop is {d:.3}, need ≤ 0.15");
    let g1 = median(ft_l1_gain);
    assert!(g1 >= 0.20, "median l1 fine-tune gain is {g1:.3}, need ≥ 0.20");
    pass("09 finetuning-transfer");
}

#[test]
fn a10_curve_and_linear_radius() {
    // Exact monotonicity on a trained-ish random net.
    let spec = DatasetSpec {
        kind: DatasetKind::Gaussians { n_classes: 2, d: 4, separation: 4.0, n_per_class: 60 },
        seed: 3,
    };
    let ds = generate(&spec).unwrap();
    let net = Network::init(&[4, 16, 2], Activation::ReLU, 0xa10).unwrap();
    let cfg = AttackConfig { n_steps: 10, n_restarts: 2, seed: 5, ..Default::default() };
    let grid = linspace_grid(0.5, 12);
    for p in Lp::ALL {
        let curve = robustness_curve(&net, &ds.test, p, &grid, &cfg).unwrap();
        for w in curve.windows(2) {
            assert!(
                w[1].robust_accuracy <= w[0].robust_accuracy,
                "{} curve increased between eps {} and {}",
                p.name(),
                w[0].eps,
                w[1].eps
            );
        }
    }

    // Linear model: the exact robust radius is margin / ||w||_q (dual norm).
    let net = Network::init(&[6, 2], Activation::ReLU, 0xa10b).unwrap();
    let w = &net.layers[0].weights; // shape [6, 2]
    let mut rng = ChaCha8Rng::seed_from_u64(0x0aac);
    let tol = 1e-4;
    let cfg = AttackConfig { n_steps: 60, n_restarts: 2, seed: 11, ..Default::default() };
    let mut checked = 0;
    while checked < 5 {
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.3..0.7)).collect();
        let logits: Vec<f64> = (0..2)
            .map(|c| {
                (0..6).map(|i| w.row(i)[c] * x[i]).sum::<f64>() + net.layers[0].bias.data[c]
            })
            .collect();
        let y = if logits[0] >= logits[1] { 0 } else { 1 };
        let margin = (logits[0] - logits[1]).abs();
        let w_diff: Vec<f64> = (0..6).map(|i| w.row(i)[0] - w.row(i)[1]).collect();
        let mut ok = true;
        for p in Lp::ALL {
            let q_norm = match p {
                Lp::Linf => w_diff.iter().map(|v| v.abs()).sum::<f64>(),
                Lp::L2 => w_diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Lp::L1 => w_diff.iter().fold(0.0f64, |m, &v| m.max(v.abs())),
            };
            let expected = margin / q_norm;
            // Keep the box constraint inactive so the closed form applies.
            if expected > 0.25 || expected < 10.0 * tol {
                ok = false;
                break;
            }
            let r =
                robust_radius(&net, &x, y, p, 2.0 * expected, tol, &cfg).unwrap();
            assert!(
                (r - expected).abs() <= 2.0 * tol,
                "{}: radius {r} vs margin/dual-norm {expected}",
                p.name()
            );
        }
        if ok {
            checked += 1;
        }
    }
    pass("10 curve-and-linear-radius");
}

#[test]
fn a11_reproducibility() {
    let bin = env!("CARGO_BIN_EXE_eat-lab");
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    std::fs::create_dir(&train_dir).unwrap();

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {args:?} failed:\n{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "train",
        "--data.kind", "gaussians",
        "--data.n_classes", "2",
        "--data.d", "6",
        "--data.separation", "4.0",
        "--data.n_per_class", "60",
        "--data.seed", "1",
        "--train.scheme", "eat",
        "--train.epochs", "3",
        "--train.batch_size", "32",
        "--train.seed", "1",
        "--attack.eps_linf", "0.02",
        "--attack.eps_l2", "0.1",
        "--attack.eps_l1", "0.4",
        "--out", train_dir.to_str().unwrap(),
    ]);
    let ckpt = train_dir.join("model.ckpt");
    assert!(ckpt.exists());

    let eval_into = |name: &str, threads: &str| -> Vec<u8> {
        let out_dir = dir.path().join(name);
        std::fs::create_dir(&out_dir).unwrap();
        run(&[
            "eval",
            "--data.kind", "gaussians",
            "--data.n_classes", "2",
            "--data.d", "6",
            "--data.separation", "4.0",
            "--data.n_per_class", "60",
            "--data.seed", "1",
            "--eval.checkpoint", ckpt.to_str().unwrap(),
            "--attack.eps_linf", "0.02",
            "--attack.eps_l2", "0.1",
            "--attack.eps_l1", "0.4",
            "--attack.seed", "1",
            "--threads", threads,
            "--out", out_dir.to_str().unwrap(),
        ]);
        std::fs::read(out_dir.join("report.csv")).unwrap()
    };

    let first = eval_into("run1", "1");
    let second = eval_into("run2", "1");
    let four_threads = eval_into("run4", "4");
    assert_eq!(first, second, "report.csv differs between identical runs");
    assert_eq!(first, four_threads, "report.csv differs between 1 and 4 threads");
    assert!(!first.is_empty() && Path::new(&ckpt).exists());
    pass("11 reproducibility");
}
