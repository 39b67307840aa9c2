//! Scratch calibration harness (not part of the test suite).

use eat_lab::attacks::{AttackConfig, Lp, ThreatSpec, ThreatUnion};
use eat_lab::data::{generate, lift_batch, DatasetKind, DatasetSpec};
use eat_lab::eval::evaluate;
use eat_lab::geometry::{min_lp_outside_hull, GeometryQuery};
use eat_lab::net::{Activation, Network};
use eat_lab::training::{train, LrSchedule, Scheme, Selection, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eps_inf: f64 = args[0].parse().unwrap();
    let eps_l1: f64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let n_per_class: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(500);
    let wd: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
    let sel = if args.get(5).map(|s| s.as_str()) == Some("final") { Selection::Final } else { Selection::Best };
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let ft_lr: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let train_steps: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(10);
    let cyclic: bool = args.get(9).map(|s| s == "cyclic").unwrap_or(false);
    let eps_l2 = min_lp_outside_hull(&GeometryQuery::new(eps_l1, eps_inf, 20).unwrap(), 2.0)
        .unwrap()
        .radius;
    println!("radii: inf {eps_inf} l2 {eps_l2:.4} l1 {eps_l1}, epochs {epochs}");

    for seed in [0u64, 1, 2] {
        let ds = generate(&DatasetSpec { kind: DatasetKind::Rings { n_per_class }, seed })
            .unwrap();
        let train_set = lift_batch(&ds.train, 20, seed).unwrap();
        let test_set = lift_batch(&ds.test, 20, seed).unwrap();
        let union = ThreatUnion::new(vec![
            ThreatSpec::new(Lp::Linf, eps_inf).unwrap(),
            ThreatSpec::new(Lp::L2, eps_l2).unwrap(),
            ThreatSpec::new(Lp::L1, eps_l1).unwrap(),
        ])
        .unwrap();
        let attack = AttackConfig { n_steps: train_steps, n_restarts: 1, seed, ..Default::default() };
        let eval_attack = AttackConfig { n_steps: 20, n_restarts: 3, seed, ..Default::default() };
        let base = TrainConfig {
            scheme: Scheme::Single(Lp::Linf),
            union: union.clone(),
            epochs,
            batch_size: 32,
            lr_schedule: if cyclic {
                LrSchedule::Cyclic { max_lr: lr }
            } else {
                LrSchedule::Piecewise { initial: lr, drop_epoch: epochs * 3 / 4, factor: 10.0 }
            },
            momentum: 0.9,
            weight_decay: wd,
            attack,
            seed,
            checkpoint_selection: sel,
        };

        println!("== seed {seed} ==");
        let mut nets = Vec::new();
        for scheme in [Scheme::Single(Lp::Linf), Scheme::Eat, Scheme::Max] {
            let net = Network::init(&[20, 64, 64, 2], Activation::ReLU, 0xabc).unwrap();
            let cfg = TrainConfig { scheme, ..base.clone() };
            let t0 = Instant::now();
            let out = train(net, &train_set, &cfg).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let mut per_epoch: Vec<f64> =
                out.history.epochs.iter().map(|e| e.wall_seconds).collect();
            per_epoch.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med_epoch = per_epoch[per_epoch.len() / 2];
            let r = evaluate(&out.net, &test_set, &union, &eval_attack).unwrap();
            println!(
                "{:12} clean {:.3} linf {:.3} l2 {:.3} l1 {:.3} union {:.3}  ({:.2}s, med {:.3}s/epoch)",
                scheme.name(),
                r.clean,
                r.acc_per_norm[0].1,
                r.acc_per_norm[1].1,
                r.acc_per_norm[2].1,
                r.union,
                secs,
                med_epoch
            );
            nets.push((scheme, out.net));
        }

        // finetune experiments from the Single-linf checkpoint
        let ckpt = nets[0].1.clone();
        let r0 = evaluate(&ckpt, &test_set, &union, &eval_attack).unwrap();
        let _ = ft_lr;
        let mut combos = Vec::new();
        for flr in [0.005f64, 0.01, 0.02] {
            for fb in [32usize, 16] {
                combos.push((format!("ft-eat lr{flr} b{fb}"), Scheme::Eat, flr, fb));
                combos.push((format!("ft-l1 lr{flr} b{fb}"), Scheme::Single(Lp::L1), flr, fb));
            }
        }
        for (label, scheme, flr, fb) in combos {
            let cfg = TrainConfig {
                scheme,
                epochs: 3,
                batch_size: fb,
                lr_schedule: LrSchedule::ThirdsDrop { initial: flr },
                checkpoint_selection: Selection::Best,
                attack: AttackConfig { n_steps: 20, n_restarts: 2, seed, ..Default::default() },
                ..base.clone()
            };
            let out = eat_lab::training::finetune(ckpt.clone(), &train_set, &cfg).unwrap();
            let r = evaluate(&out.net, &test_set, &union, &eval_attack).unwrap();
            println!(
                "{:16} clean {:.3} linf {:.3} l2 {:.3} l1 {:.3} union {:.3}  (from union {:.3} linf {:.3} l1 {:.3})",
                label,
                r.clean,
                r.acc_per_norm[0].1,
                r.acc_per_norm[1].1,
                r.acc_per_norm[2].1,
                r.union,
                r0.union,
                r0.acc_per_norm[0].1,
                r0.acc_per_norm[2].1,
            );
        }
    }
}
