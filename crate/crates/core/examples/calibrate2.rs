//! Scratch: can the MLP learn the tight rings at all?

use eat_lab::attacks::{AttackConfig, Lp, ThreatSpec, ThreatUnion};
use eat_lab::data::{generate, DatasetKind, DatasetSpec};
use eat_lab::net::{accuracy, Activation, Network};
use eat_lab::training::{train, LrSchedule, Scheme, Selection, TrainConfig};

fn main() {
    let seed = 0u64;
    let ds =
        generate(&DatasetSpec { kind: DatasetKind::Rings { n_per_class: 500 }, seed }).unwrap();
    let union = ThreatUnion::new(vec![ThreatSpec::new(Lp::Linf, 1e-4).unwrap()]).unwrap();
    for lr in [0.001, 0.003, 0.01, 0.03, 0.1] {
        for act in [Activation::ReLU, Activation::Softplus] {
            let cfg = TrainConfig {
                scheme: Scheme::Single(Lp::Linf),
                union: union.clone(),
                epochs: 200,
                batch_size: 32,
                lr_schedule: LrSchedule::Piecewise { initial: lr, drop_epoch: 150, factor: 10.0 },
                momentum: 0.9,
                weight_decay: 0.0,
                attack: AttackConfig { n_steps: 1, n_restarts: 1, seed, ..Default::default() },
                seed,
                checkpoint_selection: Selection::Final,
            };
            let net = Network::init(&[2, 64, 64, 2], act, seed ^ 0xabc).unwrap();
            let out = train(net, &ds.train, &cfg).unwrap();
            println!(
                "2d lr {lr:<6} {:?}: train {:.3} test {:.3}",
                act,
                accuracy(&out.net, &ds.train).unwrap(),
                accuracy(&out.net, &ds.test).unwrap(),
            );
        }
    }
}
