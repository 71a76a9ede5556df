//! The nine acceptance criteria, one pass/fail line each.
//!
//! `cargo test --test acceptance -- 3 4` runs only the listed criteria.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::fixtures::{cohort, network, oracle_gap, quadruples};
use metamixer::cohort::{MixingFlags, StepStreams};
use metamixer::losses::warmup_factor;
use metamixer::mixing::{global_mix, local_mix, make_mask};
use metamixer::training::{self, RunPaths};
use metamixer::{gradcheck, Architecture, ExperimentConfig, Network, Quadruple, RandomStream, RunOptions, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mixing_invariants() -> Outcome {
    let (h, w) = (32, 32);
    let bound = (w + h) as f64 / (w * h) as f64;
    let mut rng = RandomStream::new(0, "mask");
    let mut worst: f64 = 0.0;
    for step in 1..=9 {
        let lambda1 = step as f64 / 10.0;
        for _ in 0..10_000 {
            let m = make_mask(&mut rng, lambda1, h, w).map_err(|e| e.to_string())?;
            worst = worst.max((m.area_ratio() - lambda1).abs());
        }
    }
    let img = |o: f64| Tensor::from_fn(&[3, h, w], |i| (i as f64 + o).sin());
    let q = Quadruple::new([img(0.0), img(1.0)], [img(2.0), img(3.0)], 0, 1).unwrap();
    let full = local_mix(&q, &make_mask(&mut rng, 1.0, h, w).unwrap(), 2).unwrap();
    let empty = local_mix(&q, &make_mask(&mut rng, 0.0, h, w).unwrap(), 2).unwrap();
    let degenerate = full.m1 == q.c1
        && full.m2 == q.c2
        && full.soft_label == [1.0, 0.0]
        && empty.m1 == q.d1
        && empty.m2 == q.d2
        && empty.soft_label == [0.0, 1.0]
        && global_mix(&q.c1, &q.d1, 1.0).unwrap() == q.c1
        && global_mix(&q.c1, &q.d1, 0.0).unwrap() == q.d1;
    check(
        worst <= bound && degenerate,
        format!("max |area ratio − λ₁| = {worst:.5} (bound {bound:.5}), degenerate cases exact: {degenerate}"),
    )
}

fn shipped_architectures() -> Vec<(Architecture, [usize; 3])> {
    let mut out = Vec::new();
    for p in ["cifar", "desk", "imagenet"] {
        let cfg = ExperimentConfig::preset(p).unwrap();
        let side = match p {
            "desk" => cfg.synthetic_side,
            "imagenet" => 64,
            _ => 32,
        };
        for a in cfg.architectures {
            out.push((a, [3, side, side]));
        }
    }
    for a in ["plain-conv-w8", "toy", "toy-h4-f6", "tiny-resnet-w4-b2"] {
        out.push((a.parse().unwrap(), [3, 12, 12]));
    }
    out.dedup();
    out
}

fn composition_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let archs = shipped_architectures();
    for (i, (arch, shape)) in archs.iter().enumerate() {
        let net = Network::new(*arch, *shape, 10, &mut RandomStream::new(i as u64, "init")).map_err(|e| e.to_string())?;
        let mut rng = RandomStream::new(i as u64, "x");
        let x = Tensor::from_fn(&[2, shape[0], shape[1], shape[2]], |_| rng.uniform() * 2.0 - 1.0);
        let full = net.infer(&x).unwrap();
        for k in 0..=net.terminal_point() {
            let rec = net.infer_from(k, &net.infer_to(k, &x).unwrap()).unwrap();
            for (a, b) in rec.logits.data().iter().zip(full.logits.data()).chain(rec.feature.data().iter().zip(full.feature.data())) {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
            }
            points += 1;
        }
    }
    check(
        worst <= 1e-6,
        format!("{} architectures, {points} points, max relative deviation {worst:.2e}", archs.len()),
    )
}

fn gradient_checks() -> Outcome {
    let report = gradcheck::run_suite(0).map_err(|e| e.to_string())?;
    let summary = report
        .terms
        .iter()
        .map(|t| format!("{} {}/{}", t.term, t.within_rel, t.coordinates))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        report.passed() && report.student_parameters <= 500,
        format!(
            "{} params; {summary}; teacher |g| {:e}; detachment diff {:e}",
            report.student_parameters, report.teacher_grad_max, report.detachment_diff
        ),
    )
}

fn scalar_oracle() -> Outcome {
    let two = oracle_gap(&["toy-h3-f3", "toy-h3-f3"], 11, 25);
    let three = oracle_gap(&["toy-h3-f3", "toy-h3-f3", "toy-h2-f3"], 12, 25);
    let warm = oracle_gap(&["toy-h3-f3", "toy-h4-f3"], 13, 3);
    let worst = two.max(three).max(warm);
    check(worst <= 1e-6, format!("max |Δ| n=2 {two:.1e}, n=3 {three:.1e}, mid-warmup {warm:.1e}"))
}

fn schedule_facts() -> Outcome {
    let cfg = ExperimentConfig::load(&root().join("configs/default.toml")).map_err(|e| e.to_string())?;
    let s = cfg.schedule();
    let lrs: Vec<f64> = [0, 40, 70, 100, 130].iter().map(|&e| s.lr_at(e).unwrap()).collect();
    let expected = [0.05, 0.005, 5e-4, 5e-5, 5e-6];
    let lr_ok = lrs.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-12 * b);
    let warm = [warmup_factor(0, cfg.warmup_epochs), warmup_factor(10, cfg.warmup_epochs), warmup_factor(20, cfg.warmup_epochs), warmup_factor(90, cfg.warmup_epochs)];
    let warm_ok = warm == [0.0, 0.5, 1.0, 1.0];
    let defaults = (cfg.beta, cfg.gamma, cfg.delta, cfg.temperature, cfg.alpha1, cfg.alpha2);
    let defaults_ok = defaults == (4.0, 0.04, 2.0, 4.0, 1.0, 0.2);
    check(
        lr_ok && warm_ok && defaults_ok,
        format!("lr {lrs:?}, warmup {warm:?}, (β,γ,δ,T,α₁,α₂) = {defaults:?}"),
    )
}

fn identical_twins() -> Outcome {
    let desk = ExperimentConfig::preset("desk").unwrap();
    let mut worst: f64 = 0.0;
    for (i, arch) in desk.architectures.iter().map(|a| a.to_string()).chain(["toy-h3-f3".into()]).enumerate() {
        let a = network(&arch, 10, i as u64);
        let c = cohort(vec![a.clone(), a], MixingFlags::default());
        let batch = quadruples(8, 10, i as u64);
        for step in 0..4 {
            let mut draws = c.draw(&batch, &mut StepStreams::new(step)).unwrap();
            draws.mix_points[1] = draws.mix_points[0];
            for b in c.compute_step(&batch, &draws, 0).unwrap().breakdowns {
                worst = worst.max(b.m_logit.abs()).max(b.fea.abs()).max(b.e_logit.abs());
            }
        }
    }
    check(worst < 1e-10, format!("max |m_logit|, |fea|, |e_logit| = {worst:.1e}"))
}

/// Desk runs shared by criteria 7–9.
struct Desk {
    out: PathBuf,
    both: Vec<f64>,
    both_ens: Vec<f64>,
}

fn desk_config(seed: u64, tag: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&root().join("configs/desk.toml")).unwrap();
    cfg.seed = seed;
    cfg.out_dir = out.join(format!("{tag}-{seed}"));
    cfg.local_mixing = tag == "both" || tag == "local";
    cfg.global_mixing = tag == "both" || tag == "global";
    cfg
}

fn distill(seed: u64, tag: &str, out: &Path) -> metamixer::RunReport {
    let t = Instant::now();
    let cfg = desk_config(seed, tag, out);
    let report = training::run(&cfg).unwrap();
    eprintln!("  {tag} seed {seed}: {:?} ({:.0?})", report.last, t.elapsed());
    report
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn directional(desk: &mut Desk) -> Outcome {
    let mut wins = 0;
    let mut ens_wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let report = distill(seed, "both", &desk.out);
        let cfg = desk_config(seed, "both", &desk.out);
        let t = Instant::now();
        let (_, base) = training::train_independent(&cfg, &training::load_splits(&cfg).unwrap()).unwrap();
        eprintln!("  baseline seed {seed}: {base:?} ({:.0?})", t.elapsed());
        let (avg, ens) = (report.avg(), report.ens().unwrap());
        wins += (avg > base.avg) as usize;
        ens_wins += (ens >= avg) as usize;
        desk.both.push(avg);
        desk.both_ens.push(ens);
        lines.push(format!("seed {seed}: baseline {:.2} → Avg {:.2} / Ens {:.2}", 100.0 * base.avg, 100.0 * avg, 100.0 * ens));
    }
    check(
        wins >= 2 && ens_wins >= 2,
        format!("Avg > baseline on {wins}/3, Ens ≥ Avg on {ens_wins}/3 [{}]", lines.join("; ")),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_order(desk: &mut Desk) -> Outcome {
    if desk.both.is_empty() {
        for seed in SEEDS {
            let r = distill(seed, "both", &desk.out);
            desk.both.push(r.avg());
            desk.both_ens.push(r.ens().unwrap());
        }
    }
    let local: Vec<f64> = SEEDS.iter().map(|&s| distill(s, "local", &desk.out).avg()).collect();
    let none: Vec<f64> = SEEDS.iter().map(|&s| distill(s, "none", &desk.out).avg()).collect();
    let (b, l, n) = (100.0 * mean(&desk.both), 100.0 * mean(&local), 100.0 * mean(&none));
    let tie = 0.2;
    check(
        b >= l - tie && b >= n - tie && b - n >= 0.5,
        format!("mean Avg: both {b:.2}, local-only {l:.2}, none {n:.2} (both − none = {:+.2})", b - n),
    )
}

fn determinism(desk: &Desk) -> Outcome {
    let first = desk.out.join("both-0");
    if !RunPaths::new(&first).metrics().exists() {
        distill(0, "both", &desk.out);
    }
    distill(0, "both", &desk.out.join("rerun"));
    let a = fs::read_to_string(RunPaths::new(&first).metrics()).unwrap();
    let b = fs::read_to_string(RunPaths::new(&desk.out.join("rerun/both-0")).metrics()).unwrap();

    let cfg = desk_config(0, "both", &desk.out.join("resumed"));
    let mid = cfg.epochs / 2;
    let opts = RunOptions {
        resume: Some(RunPaths::new(&first).checkpoint(mid)),
    };
    training::run_with(&cfg, &opts).unwrap();
    let resumed = fs::read_to_string(RunPaths::new(&cfg.out_dir).metrics()).unwrap();
    let tail: Vec<&str> = a
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() >= mid)
        .collect();
    let resumed_rows: Vec<&str> = resumed.lines().skip(1).collect();
    check(
        a == b && tail == resumed_rows && !tail.is_empty(),
        format!(
            "rerun identical: {}; resumed from epoch {mid}: {} of {} rows identical",
            a == b,
            tail.iter().zip(&resumed_rows).filter(|(x, y)| x == y).count(),
            tail.len()
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&out);
    fs::create_dir_all(&out).unwrap();
    let mut desk = Desk {
        out: out.clone(),
        both: Vec::new(),
        both_ens: Vec::new(),
    };

    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} [{tag}] {name}: {detail} ({:.1?})", t.elapsed());
    };
    if run(1) {
        report(1, "mixing invariants", &mut mixing_invariants);
    }
    if run(2) {
        report(2, "composition identity", &mut composition_identity);
    }
    if run(3) {
        report(3, "gradient checks", &mut gradient_checks);
    }
    if run(4) {
        report(4, "scalar-oracle equivalence", &mut scalar_oracle);
    }
    if run(5) {
        report(5, "schedule facts", &mut schedule_facts);
    }
    if run(6) {
        report(6, "identical twins", &mut identical_twins);
    }
    if run(7) {
        report(7, "desk MetaMixer vs baseline", &mut || directional(&mut desk));
    }
    if run(8) {
        report(8, "ablation order", &mut || ablation_order(&mut desk));
    }
    if run(9) {
        report(9, "determinism and resume", &mut || determinism(&desk));
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
