//! `eat-lab`: command-line front end for the multi-norm robustness
//! laboratory. Subcommands: train, finetune, eval, curve, geometry, sweep.
//!
//! Flags mirror config keys one-to-one (`train.epochs` ↔ `--train.epochs`);
//! a `--config FILE` is parsed first and flag overrides win. Every run
//! writes a fully resolved `run.cfg` snapshot into the output directory, so
//! re-running from that snapshot reproduces identical artifacts.
//!
//! Exit codes: 0 success, 1 configuration error (the message names the
//! offending key or path), 2 runtime error, 3 failed `--check` validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eat_lab::attacks::{AttackConfig, Lp, StepSize, ThreatSpec, ThreatUnion};
use eat_lab::config::{Config, ConfigError};
use eat_lab::data::{self, DatasetKind, DatasetSpec};
use eat_lab::eval::{
    curve_csv, evaluate, linspace_grid, radii_sweep, report_csv, robustness_curve, telemetry_csv,
};
use eat_lab::geometry::{
    l2_union_upper_bound, min_lp_outside_hull, min_lp_outside_union, nontrivial_range,
    oracle_min_norm, GeometryQuery, RegionKind,
};
use eat_lab::net::{Activation, Batch, Network};
use eat_lab::training::{self, LrSchedule, Scheme, Selection, TrainConfig};

/// Configuration error (exit 1): reported before any artifact is written.
#[derive(Debug)]
struct CfgError(String);

/// Runtime error (exit 2).
#[derive(Debug)]
struct RunError(String);

/// Failed `--check` validation (exit 3).
#[derive(Debug)]
struct CheckError(String);

enum CliError {
    Cfg(CfgError),
    Run(RunError),
    Check(CheckError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Cfg(CfgError(e.to_string()))
    }
}

macro_rules! from_runtime {
    ($t:ty) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(RunError(e.to_string()))
            }
        }
    };
}
from_runtime!(eat_lab::attacks::AttackError);
from_runtime!(eat_lab::net::NetError);
from_runtime!(eat_lab::data::DataError);
from_runtime!(eat_lab::training::TrainError);
from_runtime!(eat_lab::eval::EvalError);
from_runtime!(eat_lab::geometry::GeometryError);

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Cfg(CfgError(msg.into()))
}

fn run_err(msg: impl Into<String>) -> CliError {
    CliError::Run(RunError(msg.into()))
}

const SUBCOMMANDS: &[&str] = &["train", "finetune", "eval", "curve", "geometry", "sweep"];

/// Every config key any subcommand understands. Unknown keys are rejected
/// by name, whether they come from the file or the flags.
const ALLOWED_KEYS: &[&str] = &[
    // data
    "data.kind",
    "data.n_classes",
    "data.d",
    "data.separation",
    "data.n_per_class",
    "data.images",
    "data.labels",
    "data.subset",
    "data.lift_d",
    "data.seed",
    // train
    "train.scheme",
    "train.arch",
    "train.epochs",
    "train.batch_size",
    "train.lr_schedule",
    "train.lr",
    "train.drop_epoch",
    "train.drop_factor",
    "train.momentum",
    "train.weight_decay",
    "train.seed",
    "train.selection",
    "train.checkpoint",
    // attack
    "attack.eps_linf",
    "attack.eps_l2",
    "attack.eps_l1",
    "attack.steps",
    "attack.step_size",
    "attack.restarts",
    "attack.k_fraction",
    "attack.seed",
    // eval
    "eval.checkpoint",
    "eval.model_name",
    "eval.p",
    "eval.eps_max",
    "eval.n_points",
    "eval.sweep_pairs",
    // geometry (bare keys, flag-style usage)
    "eps1",
    "epsinf",
    "d",
    "p",
];

struct Invocation {
    subcommand: String,
    config: Config,
    out_dir: PathBuf,
    oracle: bool,
    check: bool,
    threads: Option<usize>,
}

fn parse_args(args: &[String]) -> Result<Invocation, CliError> {
    let sub = args
        .first()
        .ok_or_else(|| cfg_err(format!("missing subcommand; expected one of {SUBCOMMANDS:?}")))?;
    if !SUBCOMMANDS.contains(&sub.as_str()) {
        return Err(cfg_err(format!(
            "unknown subcommand `{sub}`; expected one of {SUBCOMMANDS:?}"
        )));
    }
    let mut config = Config::default();
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut config_path: Option<PathBuf> = None;
    let mut out_dir = PathBuf::from(".");
    let mut oracle = false;
    let mut check = false;
    let mut threads = None;
    let mut it = args[1..].iter().peekable();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| cfg_err(format!("expected a --flag, got `{arg}`")))?;
        let (key, inline) = match key.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (key, None),
        };
        let value = |it: &mut std::iter::Peekable<std::slice::Iter<String>>| {
            inline.clone().map(Ok).unwrap_or_else(|| {
                it.next()
                    .cloned()
                    .ok_or_else(|| cfg_err(format!("flag --{key} needs a value")))
            })
        };
        match key {
            "config" => config_path = Some(PathBuf::from(value(&mut it)?)),
            "out" => out_dir = PathBuf::from(value(&mut it)?),
            "threads" => {
                let v = value(&mut it)?;
                threads = Some(v.parse().map_err(|_| {
                    cfg_err(format!("flag --threads: cannot parse `{v}` as a thread count"))
                })?);
            }
            "oracle" => oracle = true,
            "check" => check = true,
            _ => {
                let v = value(&mut it)?;
                overrides.push((key.to_string(), v));
            }
        }
    }
    if let Some(path) = config_path {
        config = Config::parse_file(&path)?;
    }
    for (k, v) in overrides {
        config.set(&k, &v);
    }
    config.validate_keys(ALLOWED_KEYS)?;
    Ok(Invocation { subcommand: sub.clone(), config, out_dir, oracle, check, threads })
}

/// Default seed: the `EAT_LAB_SEED` environment variable if set, else 0.
/// Explicit config/flag seeds always win.
fn env_seed() -> Result<u64, CliError> {
    match std::env::var("EAT_LAB_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| cfg_err(format!("EAT_LAB_SEED: cannot parse `{v}` as an integer"))),
        Err(_) => Ok(0),
    }
}

fn seed_for(cfg: &Config, key: &str) -> Result<u64, CliError> {
    match cfg.get_u64(key)? {
        Some(s) => Ok(s),
        None => env_seed(),
    }
}

fn dataset_spec(cfg: &Config) -> Result<DatasetSpec, CliError> {
    let seed = seed_for(cfg, "data.seed")?;
    let kind = match cfg.require("data.kind")? {
        "gaussians" => DatasetKind::Gaussians {
            n_classes: cfg.get_usize("data.n_classes")?.unwrap_or(2),
            d: cfg.get_usize("data.d")?.unwrap_or(2),
            separation: cfg.get_f64("data.separation")?.unwrap_or(4.0),
            n_per_class: cfg.get_usize("data.n_per_class")?.unwrap_or(500),
        },
        "rings" => DatasetKind::Rings {
            n_per_class: cfg.get_usize("data.n_per_class")?.unwrap_or(500),
        },
        "idx" => DatasetKind::IdxFiles {
            images_path: cfg.require("data.images")?.to_string(),
            labels_path: cfg.require("data.labels")?.to_string(),
            subset: cfg.get_usize("data.subset")?,
        },
        other => {
            return Err(cfg_err(format!(
                "data.kind: unknown dataset kind `{other}` (gaussians, rings, idx)"
            )))
        }
    };
    Ok(DatasetSpec { kind, seed })
}

fn load_dataset(cfg: &Config) -> Result<data::Dataset, CliError> {
    let spec = dataset_spec(cfg)?;
    let mut ds = data::generate(&spec)?;
    if let Some(d_out) = cfg.get_usize("data.lift_d")? {
        ds.train = data::lift_batch(&ds.train, d_out, spec.seed)?;
        ds.test = data::lift_batch(&ds.test, d_out, spec.seed)?;
    }
    Ok(ds)
}

fn threat_union(cfg: &Config, required: &[Lp]) -> Result<ThreatUnion, CliError> {
    let mut specs = Vec::new();
    for (key, p) in [
        ("attack.eps_linf", Lp::Linf),
        ("attack.eps_l2", Lp::L2),
        ("attack.eps_l1", Lp::L1),
    ] {
        if let Some(eps) = cfg.get_f64(key)? {
            specs.push(ThreatSpec::new(p, eps).map_err(|e| cfg_err(format!("{key}: {e}")))?);
        }
    }
    for p in required {
        if !specs.iter().any(|s| s.p == *p) {
            return Err(cfg_err(format!(
                "missing config key `attack.eps_{}` required by this run",
                p.name()
            )));
        }
    }
    ThreatUnion::new(specs).map_err(|e| cfg_err(format!("attack radii: {e}")))
}

fn attack_config(cfg: &Config) -> Result<AttackConfig, CliError> {
    let step_size = match cfg.get_f64("attack.step_size")? {
        Some(s) => StepSize::Fixed(s),
        None => StepSize::NormDefault,
    };
    Ok(AttackConfig {
        n_steps: cfg.get_usize("attack.steps")?.unwrap_or(10),
        step_size,
        n_restarts: cfg.get_usize("attack.restarts")?.unwrap_or(2),
        k_fraction: cfg.get_f64("attack.k_fraction")?.unwrap_or(0.05),
        seed: seed_for(cfg, "attack.seed")?,
    })
}

fn lr_schedule(cfg: &Config) -> Result<LrSchedule, CliError> {
    let kind = cfg.get("train.lr_schedule").unwrap_or("piecewise");
    let lr = cfg.get_f64("train.lr")?;
    Ok(match kind {
        "piecewise" => LrSchedule::Piecewise {
            initial: lr.unwrap_or(0.05),
            drop_epoch: cfg.get_usize("train.drop_epoch")?.unwrap_or(70),
            factor: cfg.get_f64("train.drop_factor")?.unwrap_or(10.0),
        },
        "cyclic" => LrSchedule::Cyclic { max_lr: lr.unwrap_or(0.1) },
        "thirds" => LrSchedule::ThirdsDrop { initial: lr.unwrap_or(0.01) },
        other => {
            return Err(cfg_err(format!(
                "train.lr_schedule: unknown schedule `{other}` (piecewise, cyclic, thirds)"
            )))
        }
    })
}

fn scheme(cfg: &Config) -> Result<Scheme, CliError> {
    let name = cfg.get("train.scheme").unwrap_or("eat");
    Scheme::parse(name).map_err(|e| cfg_err(format!("train.scheme: {e}")))
}

fn train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    let scheme = scheme(cfg)?;
    let union = threat_union(cfg, &scheme.required_norms())?;
    let selection = match cfg.get("train.selection").unwrap_or("final") {
        "best" => Selection::Best,
        "final" => Selection::Final,
        other => {
            return Err(cfg_err(format!(
                "train.selection: unknown value `{other}` (best, final)"
            )))
        }
    };
    let tc = TrainConfig {
        scheme,
        union,
        epochs: cfg.get_usize("train.epochs")?.unwrap_or(10),
        batch_size: cfg.get_usize("train.batch_size")?.unwrap_or(128),
        lr_schedule: lr_schedule(cfg)?,
        momentum: cfg.get_f64("train.momentum")?.unwrap_or(0.9),
        weight_decay: cfg.get_f64("train.weight_decay")?.unwrap_or(5e-4),
        attack: attack_config(cfg)?,
        seed: seed_for(cfg, "train.seed")?,
        checkpoint_selection: selection,
    };
    tc.validate().map_err(|e| cfg_err(e.to_string()))?;
    Ok(tc)
}

/// Materialize every key the run will use, so `run.cfg` reproduces it.
fn resolved_snapshot(inv: &Invocation) -> Result<Config, CliError> {
    let cfg = &inv.config;
    let mut snap = Config::default();
    let copy_or =
        |snap: &mut Config, key: &str, default: &str| match cfg.get(key) {
            Some(v) => snap.set(key, v),
            None => snap.set(key, default),
        };
    match inv.subcommand.as_str() {
        "geometry" => {
            for key in ["eps1", "epsinf", "d", "p"] {
                if let Some(v) = cfg.get(key) {
                    snap.set(key, v);
                }
            }
            return Ok(snap);
        }
        _ => {}
    }
    // data defaults
    copy_or(&mut snap, "data.kind", "rings");
    let seed_default = env_seed()?.to_string();
    copy_or(&mut snap, "data.seed", &seed_default);
    match snap.get("data.kind") {
        Some("gaussians") => {
            copy_or(&mut snap, "data.n_classes", "2");
            copy_or(&mut snap, "data.d", "2");
            copy_or(&mut snap, "data.separation", "4.0");
            copy_or(&mut snap, "data.n_per_class", "500");
        }
        Some("rings") => copy_or(&mut snap, "data.n_per_class", "500"),
        Some("idx") => {
            snap.set("data.images", cfg.require("data.images")?);
            snap.set("data.labels", cfg.require("data.labels")?);
            if let Some(v) = cfg.get("data.subset") {
                snap.set("data.subset", v);
            }
        }
        _ => {}
    }
    if let Some(v) = cfg.get("data.lift_d") {
        snap.set("data.lift_d", v);
    }
    // attack defaults
    copy_or(&mut snap, "attack.steps", "10");
    copy_or(&mut snap, "attack.restarts", "2");
    copy_or(&mut snap, "attack.k_fraction", "0.05");
    copy_or(&mut snap, "attack.seed", &seed_default);
    for key in ["attack.eps_linf", "attack.eps_l2", "attack.eps_l1", "attack.step_size"] {
        if let Some(v) = cfg.get(key) {
            snap.set(key, v);
        }
    }
    match inv.subcommand.as_str() {
        "train" | "finetune" | "sweep" => {
            copy_or(&mut snap, "train.scheme", "eat");
            copy_or(&mut snap, "train.epochs", if inv.subcommand == "train" { "10" } else { "3" });
            copy_or(&mut snap, "train.batch_size", "128");
            copy_or(
                &mut snap,
                "train.lr_schedule",
                if inv.subcommand == "train" { "piecewise" } else { "thirds" },
            );
            copy_or(&mut snap, "train.momentum", "0.9");
            copy_or(&mut snap, "train.weight_decay", "0.0005");
            copy_or(&mut snap, "train.seed", &seed_default);
            copy_or(&mut snap, "train.selection", "final");
            for key in ["train.lr", "train.drop_epoch", "train.drop_factor", "train.arch",
                        "train.checkpoint"] {
                if let Some(v) = cfg.get(key) {
                    snap.set(key, v);
                }
            }
        }
        _ => {}
    }
    match inv.subcommand.as_str() {
        "eval" | "curve" | "sweep" => {
            copy_or(&mut snap, "eval.model_name", "model");
            for key in ["eval.checkpoint", "eval.p", "eval.eps_max", "eval.n_points",
                        "eval.sweep_pairs"] {
                if let Some(v) = cfg.get(key) {
                    snap.set(key, v);
                }
            }
        }
        _ => {}
    }
    Ok(snap)
}

fn write_artifact(out_dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = out_dir.join(name);
    std::fs::write(&path, bytes)
        .map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))
}

fn default_arch(cfg: &Config, input_dim: usize, n_classes: usize) -> Result<Network, CliError> {
    match cfg.get("train.arch") {
        Some(arch) => {
            let (dims, act) = Network::parse_arch(arch)
                .map_err(|e| cfg_err(format!("train.arch: {e}")))?;
            if dims[0] != input_dim || *dims.last().unwrap() != n_classes {
                return Err(cfg_err(format!(
                    "train.arch: `{arch}` does not match data ({input_dim} inputs, \
                     {n_classes} classes)"
                )));
            }
            Ok(Network::init(&dims, act, 0x5eed_0000).map_err(|e| run_err(e.to_string()))?)
        }
        None => Ok(Network::init(&[input_dim, 64, 64, n_classes], Activation::ReLU, 0x5eed_0000)
            .map_err(|e| run_err(e.to_string()))?),
    }
}

fn load_net(cfg: &Config, key: &str) -> Result<Network, CliError> {
    let path = cfg.require(key)?;
    let ckpt = data::load_checkpoint(Path::new(path))?;
    Ok(ckpt.to_network()?)
}

fn print_report(report: &eat_lab::eval::RobustnessReport) {
    println!("clean accuracy: {:.4}", report.clean);
    for (p, acc) in &report.acc_per_norm {
        println!("robust accuracy ({}): {acc:.4}", p.name());
    }
    println!("robust accuracy (union): {:.4}", report.union);
}

/// Re-derive all report aggregates from the stored matrix and compare; used
/// by `--check` to validate an emitted report end to end.
fn check_report(report: &eat_lab::eval::RobustnessReport) -> Result<(), CliError> {
    let norms: Vec<Lp> = report.acc_per_norm.iter().map(|(p, _)| *p).collect();
    let rebuilt = eat_lab::eval::RobustnessReport::from_matrix(
        report.clean,
        &norms,
        report.matrix.clone(),
    );
    let same = rebuilt.union == report.union
        && rebuilt.average == report.average
        && rebuilt
            .acc_per_norm
            .iter()
            .zip(&report.acc_per_norm)
            .all(|(a, b)| a == b);
    if same {
        Ok(())
    } else {
        Err(CliError::Check(CheckError(
            "report aggregates do not match their per-point matrix".to_string(),
        )))
    }
}

fn run_train(inv: &Invocation, snap: &Config, finetuning: bool) -> Result<(), CliError> {
    let ds = load_dataset(snap)?;
    let tc = train_config(snap)?;
    let net = if finetuning {
        load_net(snap, "train.checkpoint")?
    } else {
        default_arch(snap, ds.train.inputs.cols(), n_classes(&ds.train))?
    };
    let out = training::train(net, &ds.train, &tc)?;
    let report = evaluate(&out.net, &ds.test, &tc.union, &tc.attack)?;
    if inv.check {
        check_report(&report)?;
    }

    let mut meta = BTreeMap::new();
    meta.insert("scheme".to_string(), tc.scheme.name());
    meta.insert("epochs".to_string(), tc.epochs.to_string());
    meta.insert("seed".to_string(), tc.seed.to_string());
    meta.insert(
        "source".to_string(),
        if finetuning { "finetune" } else { "train" }.to_string(),
    );
    let ckpt_path = inv.out_dir.join("model.ckpt");
    data::save_checkpoint(&out.net, &meta, &ckpt_path)?;
    let model = snap.get("eval.model_name").unwrap_or("model");
    write_artifact(&inv.out_dir, "report.csv", report_csv(model, &report, tc.seed).as_bytes())?;
    write_artifact(&inv.out_dir, "telemetry.csv", telemetry_csv(&out.telemetry).as_bytes())?;
    print_report(&report);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn n_classes(batch: &Batch) -> usize {
    batch.labels.iter().copied().max().unwrap_or(0) + 1
}

fn run_eval(inv: &Invocation, snap: &Config) -> Result<(), CliError> {
    let ds = load_dataset(snap)?;
    let net = load_net(snap, "eval.checkpoint")?;
    let union = threat_union(snap, &[])?;
    let attack = attack_config(snap)?;
    let report = evaluate(&net, &ds.test, &union, &attack)?;
    if inv.check {
        check_report(&report)?;
    }
    let model = snap.get("eval.model_name").unwrap_or("model");
    let seed = seed_for(snap, "attack.seed")?;
    write_artifact(&inv.out_dir, "report.csv", report_csv(model, &report, seed).as_bytes())?;
    print_report(&report);
    Ok(())
}

fn parse_norm(s: &str) -> Result<Lp, CliError> {
    match s {
        "linf" | "inf" => Ok(Lp::Linf),
        "l2" | "2" => Ok(Lp::L2),
        "l1" | "1" => Ok(Lp::L1),
        other => Err(cfg_err(format!("eval.p: unknown norm `{other}` (linf, l2, l1)"))),
    }
}

fn run_curve(inv: &Invocation, snap: &Config) -> Result<(), CliError> {
    let ds = load_dataset(snap)?;
    let net = load_net(snap, "eval.checkpoint")?;
    let p = parse_norm(snap.require("eval.p")?)?;
    let eps_max = snap
        .get_f64("eval.eps_max")?
        .ok_or_else(|| cfg_err("missing required config key `eval.eps_max`"))?;
    let n_points = snap.get_usize("eval.n_points")?.unwrap_or(10);
    let attack = attack_config(snap)?;
    let grid = linspace_grid(eps_max, n_points);
    let curve = robustness_curve(&net, &ds.test, p, &grid, &attack)?;
    if inv.check {
        let monotone = curve.windows(2).all(|w| w[1].robust_accuracy <= w[0].robust_accuracy);
        if !monotone {
            return Err(CliError::Check(CheckError("curve is not non-increasing".into())));
        }
    }
    write_artifact(&inv.out_dir, "curve.csv", curve_csv(&[(p, curve.clone())]).as_bytes())?;
    for pt in &curve {
        println!("eps {:.4}: robust accuracy {:.4}", pt.eps, pt.robust_accuracy);
    }
    Ok(())
}

fn run_geometry(inv: &Invocation, snap: &Config) -> Result<(), CliError> {
    let eps1 = snap
        .get_f64("eps1")?
        .ok_or_else(|| cfg_err("missing required config key `eps1`"))?;
    let epsinf = snap
        .get_f64("epsinf")?
        .ok_or_else(|| cfg_err("missing required config key `epsinf`"))?;
    let d = snap
        .get_usize("d")?
        .ok_or_else(|| cfg_err("missing required config key `d`"))?;
    let p = match snap.get("p") {
        None => 2.0,
        Some("inf") => f64::INFINITY,
        Some(v) => v
            .parse()
            .map_err(|_| cfg_err(format!("p: cannot parse `{v}` as an exponent")))?,
    };
    let q = GeometryQuery::new(eps1, epsinf, d)?;
    let union = min_lp_outside_union(&q, p)?;
    let hull = min_lp_outside_hull(&q, p)?;
    let mut lines = vec![
        format!("eps1 {eps1}"),
        format!("epsinf {epsinf}"),
        format!("d {d}"),
        format!("p {p}"),
        format!("union {union:.4}"),
    ];
    if p == 2.0 {
        lines.push(format!("bound {:.4}", l2_union_upper_bound(&q)?));
    }
    lines.push(format!("hull {:.4}", hull.radius));
    let (lo, hi) = nontrivial_range(epsinf, d)?;
    lines.push(format!("nontrivial_range {lo:.4} {hi:.4}"));
    if inv.oracle {
        if d > 6 {
            return Err(cfg_err(format!(
                "--oracle requires d <= 6 (got {d}); the ray-cast search is exponential in d"
            )));
        }
        let ou = oracle_min_norm(&q, p, RegionKind::Union, 20_000, 200)?;
        let oh = oracle_min_norm(&q, p, RegionKind::ConvexHull, 20_000, 200)?;
        lines.push(format!("oracle_union {ou:.4}"));
        lines.push(format!("oracle_hull {oh:.4}"));
        if inv.check {
            let rel_u = (ou - union).abs() / union;
            let rel_h = (oh - hull.radius).abs() / hull.radius;
            if rel_u > 1e-3 || rel_h > 1e-3 {
                return Err(CliError::Check(CheckError(format!(
                    "oracle disagrees with closed forms: union rel {rel_u:.2e}, \
                     hull rel {rel_h:.2e}"
                ))));
            }
        }
    }
    let text = lines.join("\n") + "\n";
    write_artifact(&inv.out_dir, "geometry.txt", text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn run_sweep(inv: &Invocation, snap: &Config) -> Result<(), CliError> {
    let ds = load_dataset(snap)?;
    let net = load_net(snap, "train.checkpoint")?;
    let pairs_raw = snap.require("eval.sweep_pairs")?;
    let mut pairs = Vec::new();
    for item in pairs_raw.split(';') {
        let (a, b) = item.split_once(':').ok_or_else(|| {
            cfg_err(format!(
                "eval.sweep_pairs: expected `epsinf:eps1;...`, got `{item}`"
            ))
        })?;
        let parse = |s: &str| -> Result<f64, CliError> {
            s.trim()
                .parse()
                .map_err(|_| cfg_err(format!("eval.sweep_pairs: cannot parse `{s}` as a number")))
        };
        pairs.push((parse(a)?, parse(b)?));
    }
    let eps_max = snap
        .get_f64("eval.eps_max")?
        .ok_or_else(|| cfg_err("missing required config key `eval.eps_max`"))?;
    let n_points = snap.get_usize("eval.n_points")?.unwrap_or(10);
    let mut tc = train_config(snap)?;
    tc.scheme = Scheme::Eat;
    let attack = attack_config(snap)?;
    let grid = linspace_grid(eps_max, n_points);
    let entries = radii_sweep(&net, &ds.train, &ds.test, &pairs, &tc, &grid, &attack)?;
    let mut summary = String::from("eps_inf,eps1,predicted_eps2\n");
    for (i, e) in entries.iter().enumerate() {
        summary.push_str(&format!("{:.6},{:.6},{:.4}\n", e.eps_inf, e.eps1, e.predicted_eps2));
        write_artifact(
            &inv.out_dir,
            &format!("sweep_{i}.csv"),
            curve_csv(&[(Lp::L2, e.curve.clone())]).as_bytes(),
        )?;
        println!(
            "pair (epsinf {:.4}, eps1 {:.4}): predicted eps2 {:.4}",
            e.eps_inf, e.eps1, e.predicted_eps2
        );
    }
    write_artifact(&inv.out_dir, "sweep.csv", summary.as_bytes())?;
    Ok(())
}

fn dispatch(inv: &Invocation) -> Result<(), CliError> {
    // Fully resolve the configuration first; nothing is written until the
    // whole configuration has validated (no partial artifacts on exit 1).
    let snap = resolved_snapshot(inv)?;
    match inv.subcommand.as_str() {
        "train" | "finetune" => {
            train_config(&snap)?;
            dataset_spec(&snap)?;
        }
        "eval" => {
            threat_union(&snap, &[])?;
            dataset_spec(&snap)?;
            snap.require("eval.checkpoint")?;
        }
        "curve" => {
            parse_norm(snap.require("eval.p")?)?;
            dataset_spec(&snap)?;
            snap.require("eval.checkpoint")?;
        }
        "sweep" => {
            snap.require("eval.sweep_pairs")?;
            snap.require("train.checkpoint")?;
            dataset_spec(&snap)?;
        }
        _ => {}
    }
    if inv.subcommand == "finetune" {
        snap.require("train.checkpoint")?;
    }
    std::fs::create_dir_all(&inv.out_dir)
        .map_err(|e| run_err(format!("cannot create {}: {e}", inv.out_dir.display())))?;
    write_artifact(&inv.out_dir, "run.cfg", snap.to_file_string().as_bytes())?;
    match inv.subcommand.as_str() {
        "train" => run_train(inv, &snap, false),
        "finetune" => run_train(inv, &snap, true),
        "eval" => run_eval(inv, &snap),
        "curve" => run_curve(inv, &snap),
        "geometry" => run_geometry(inv, &snap),
        "sweep" => run_sweep(inv, &snap),
        _ => unreachable!("subcommand validated at parse time"),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let inv = match parse_args(&args) {
        Ok(inv) => inv,
        Err(e) => std::process::exit(report(e)),
    };
    if let Some(n) = inv.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            std::process::exit(2);
        }
    }
    match dispatch(&inv) {
        Ok(()) => {}
        Err(e) => std::process::exit(report(e)),
    }
}

fn report(e: CliError) -> i32 {
    match e {
        CliError::Cfg(CfgError(m)) => {
            eprintln!("config error: {m}");
            1
        }
        CliError::Run(RunError(m)) => {
            eprintln!("error: {m}");
            2
        }
        CliError::Check(CheckError(m)) => {
            eprintln!("check failed: {m}");
            3
        }
    }
}
