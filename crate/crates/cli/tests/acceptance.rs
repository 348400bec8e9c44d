//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 5, 6 and 10 share one trained model and held-out phantom set;
//! criterion 9 evaluates the baselines on the same held-out set.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhpnet::baselines::{train_baseline, BaselineConfig, BaselineKind, BaselineNet};
use uhpnet::data::{split_dataset, ConditioningVector, DatasetManifest, Mask};
use uhpnet::infer::{growth_logistic, longest_diameter, mc_sample_mode, SegmentationSampler};
use uhpnet::metrics::{dice, evaluate, ged, iou, EvalOptions, GroundTruthMode, MetricReport};
use uhpnet::net::{LatentLevelParams, NetworkWeights, SampleMode};
use uhpnet::phantom::{generate_cohort, generate_cohort_with, CohortSpec};
use uhpnet::train::{
    graph_recon_from_probs, hpu_weights, kl_diag_gaussian, moment_diameter, train, Ablation,
    DiameterProxy, ReconMode, ReconTargets, TrainConfig,
};
use uhpnet_autograd::{Graph, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, max_side: usize) -> Mask {
    let side = rng.random_range(1..=max_side);
    let density = rng.random_range(0.0..1.0);
    Mask::new(
        side,
        side,
        (0..side * side).map(|_| rng.random_bool(density)).collect(),
    )
    .unwrap()
}

fn exhaustive_diameter(m: &Mask, spacing_mm: f64) -> f64 {
    let pts: Vec<(usize, usize)> = (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x))
        .collect();
    let mut best = 0.0f64;
    for &(y0, x0) in &pts {
        for &(y1, x1) in &pts {
            let (dy, dx) = (y0 as f64 - y1 as f64, x0 as f64 - x1 as f64);
            best = best.max((dy * dy + dx * dx).sqrt());
        }
    }
    best * spacing_mm
}

fn pair_distance(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn mean_distance(xs: &[Mask], ys: &[Mask]) -> f64 {
    let mut total = 0.0;
    for x in xs {
        for y in ys {
            total += pair_distance(x, y);
        }
    }
    total / (xs.len() * ys.len()) as f64
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let side = rng.random_range(1..=32);
        let density = rng.random_range(0.05..0.95);
        let set = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Mask> {
            (0..n)
                .map(|_| {
                    Mask::new(
                        side,
                        side,
                        (0..side * side).map(|_| rng.random_bool(density)).collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let (n, m) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let (a, b) = (set(&mut rng, n), set(&mut rng, m));
        let got = ged(&a, &b).map_err(|e| e.to_string())?;
        let oracle = 2.0 * mean_distance(&a, &b) - mean_distance(&a, &a) - mean_distance(&b, &b);
        worst = worst.max((got.ged2 - oracle).abs());
    }
    let mut mismatches = 0;
    for _ in 0..200 {
        let m = random_mask(&mut rng, 32);
        let spacing = rng.random_range(0.3..2.0);
        if longest_diameter(&m, spacing) != exhaustive_diameter(&m, spacing) {
            mismatches += 1;
        }
    }
    check(
        worst <= 1e-12 && mismatches == 0,
        format!("ged max |diff| {worst:.1e} over 50 sets (tol 1e-12); longest diameter mismatches {mismatches}/200"),
    )
}

fn criterion_2() -> Outcome {
    let level = |m: f32, lv: f32| LatentLevelParams {
        mean: Tensor::new(&[1, 1, 1, 1], vec![m]).unwrap(),
        log_variance: Tensor::new(&[1, 1, 1, 1], vec![lv]).unwrap(),
    };
    let kl = kl_diag_gaussian(&level(1.0, 0.0), &level(0.0, 0.0)).map_err(|e| e.to_string())?;
    let mask = |bits: &[usize]| {
        let mut m = Mask::empty(20, 20);
        for &i in bits {
            m.set(i / 20, i % 20, true);
        }
        m
    };
    let a = mask(&(0..100).collect::<Vec<_>>());
    let b = mask(&(50..150).collect::<Vec<_>>());
    let far = mask(&(200..300).collect::<Vec<_>>());
    let empty = Mask::empty(20, 20);
    let d = |x: &Mask, y: &Mask| dice(x, y).unwrap();
    let j = |x: &Mask, y: &Mask| iou(x, y).unwrap();
    let overlaps = [
        d(&a, &a) == 1.0,
        d(&a, &far) == 0.0,
        d(&a, &b) == 0.5,
        d(&empty, &empty) == 1.0,
        j(&a, &a) == 1.0,
        j(&a, &far) == 0.0,
        j(&a, &b) == 50.0 / 150.0,
        j(&empty, &empty) == 1.0,
    ];
    let f2 = growth_logistic(2.0);
    check(
        f2 == 0.5 && (kl - 0.5).abs() <= 1e-9 && overlaps.iter().all(|&o| o),
        format!(
            "f(2) = {f2}; KL = {kl}; overlap cases {}/{} exact",
            overlaps.iter().filter(|&&o| o).count(),
            overlaps.len()
        ),
    )
}

/// `1 − IoU_soft + γ·|D − D1|` with `D` from `proxy`, in closed form.
fn direct_loss(
    p: &[f64],
    y: &[f64],
    d1: f64,
    spacing: f64,
    gamma: f64,
    proxy: DiameterProxy,
) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let (sp, sy): (f64, f64) = (p.iter().sum(), y.iter().sum());
    let iou_loss = 1.0 - (inter + 1e-6) / (sp + sy - inter + 1e-6);
    let d = match proxy {
        DiameterProxy::EquivalentCircle => 2.0 * (sp / std::f64::consts::PI).sqrt() * spacing,
        DiameterProxy::Moments => moment_diameter(p, 4, spacing),
    };
    iou_loss + gamma * (d - d1).abs()
}

fn criterion_3() -> Outcome {
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for proxy in [DiameterProxy::EquivalentCircle, DiameterProxy::Moments] {
        for _ in 0..20 {
            let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
            let mut y: Vec<f64> = (0..16)
                .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
                .collect();
            y[rng.random_range(0..16)] = 1.0;
            let (d1, spacing, gamma) = (
                rng.random_range(0.5..6.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.1..2.0),
            );
            let mut g = Graph::<f64>::new();
            let pv = g.variable(Tensor::new(&[1, 1, 4, 4], p.clone()).unwrap());
            let targets = ReconTargets {
                masks: Tensor::new(&[1, 1, 4, 4], y.clone()).unwrap(),
                d1_mm: Tensor::new(&[1], vec![d1]).unwrap(),
                spacing_mm: Tensor::new(&[1], vec![spacing]).unwrap(),
            };
            let loss =
                graph_recon_from_probs(&mut g, pv, &targets, gamma, ReconMode::IouL1Diam, proxy)
                    .map_err(|e| e.to_string())?;
            let grads = g.backward(loss).map_err(|e| e.to_string())?;
            let analytic = grads.wrt(pv).unwrap().data().to_vec();
            for i in 0..16 {
                let (mut up, mut down) = (p.clone(), p.clone());
                up[i] += STEP;
                down[i] -= STEP;
                let numeric = (direct_loss(&up, &y, d1, spacing, gamma, proxy)
                    - direct_loss(&down, &y, d1, spacing, gamma, proxy))
                    / (2.0 * STEP);
                let rel =
                    (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    check(
        worst <= 1e-3,
        format!("max relative gradient error {worst:.2e} over 2 x 20 instances (tol 1e-3)"),
    )
}

/// Mean Dice of the latent-mean prediction against each nodule's Y1.
fn mean_mode_dice(w: &NetworkWeights, m: &DatasetManifest) -> Result<f64, String> {
    let mut total = 0.0;
    for e in m.entries() {
        let d0 = e.annotations.iter().map(|a| a.d0_mm).sum::<f64>() / e.annotations.len() as f64;
        let cond = ConditioningVector::from_measurements(
            i64::from(e.pair.days_between),
            d0,
            &w.normalization,
        )
        .map_err(|e| e.to_string())?;
        let s = mc_sample_mode(
            w,
            &e.pair.i0,
            &cond,
            1,
            0.5,
            0,
            SampleMode::Mean,
            e.pair.spacing_mm,
        )
        .map_err(|e| e.to_string())?;
        total += dice(&s.masks[0], &e.pair.y1).map_err(|e| e.to_string())?;
    }
    Ok(total / m.len() as f64)
}

fn criterion_4() -> Outcome {
    let m = generate_cohort_with(&CohortSpec::default(), 8, 0.5, 1)
        .map_err(|e| e.to_string())?
        .manifest;
    let config = TrainConfig {
        base_filters: 16,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&m, &config).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let w = hpu_weights(&out.checkpoint).map_err(|e| e.to_string())?;
    let d = mean_mode_dice(&w, &m)?;
    check(
        d >= 0.85 && minutes <= 10.0,
        format!(
            "mean-mode Dice {d:.3} (>= 0.85) after {} epochs in {minutes:.1} min (<= 10)",
            config.epochs
        ),
    )
}

struct Phantoms {
    train: DatasetManifest,
    test: DatasetManifest,
}

fn phantoms() -> Phantoms {
    let all = generate_cohort(250, 0.5, 2024).unwrap();
    let (train, test) = split_dataset(&all, 0.2, 7).unwrap();
    assert_eq!((train.len(), test.len()), (200, 50));
    Phantoms { train, test }
}

const GENERALIZATION_EPOCHS: usize = 40;

fn criterion_5(ph: &Phantoms, report: &mut Option<MetricReport>) -> Outcome {
    let config = TrainConfig {
        base_filters: 16,
        epochs: GENERALIZATION_EPOCHS,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&ph.train, &config).map_err(|e| e.to_string())?;
    let w = hpu_weights(&out.checkpoint).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        k: 200,
        n_bootstrap: 1000,
        ..EvalOptions::default()
    };
    let r = evaluate(&w, &ph.test, &opts).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let c = r.mode(GroundTruthMode::Closest).unwrap();
    let (bacc, mae) = (
        c.bacc.point.unwrap_or(f64::NAN),
        c.mae_mm.point.unwrap_or(f64::NAN),
    );
    let dice = c.dice.point.unwrap_or(f64::NAN);
    *report = Some(r);
    check(
        bacc >= 0.80 && mae <= 1.5 && dice >= 0.80 && minutes <= 60.0,
        format!(
            "Bacc(CLOSEST) {bacc:.3} (>= 0.80), MAE(CLOSEST) {mae:.3} mm (<= 1.5), Dice {dice:.3} (>= 0.80), {minutes:.1} min (<= 60)"
        ),
    )
}

fn criterion_6(report: &Option<MetricReport>) -> Outcome {
    let r = report
        .as_ref()
        .ok_or("no phantom report (criterion 5 failed to produce one)")?;
    let mut parts = Vec::new();
    let mut ok = true;
    for m in &r.modes {
        let (b, b2, pw) = (m.bacc.point, m.bacc_2std.point, m.p_within_2std.point);
        let coherent = matches!((b, b2), (Some(b), Some(b2)) if b2 <= b);
        let spread = matches!(pw, Some(p) if p > 0.0 && p < 1.0);
        ok &= coherent && spread;
        parts.push(format!(
            "{} Bacc_2std {:.3} <= Bacc {:.3}, P(in 2std) {:.3}",
            m.mode.name(),
            b2.unwrap_or(f64::NAN),
            b.unwrap_or(f64::NAN),
            pw.unwrap_or(f64::NAN)
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_7(ph: &Phantoms) -> Outcome {
    const EPOCHS: usize = 10;
    let opts = EvalOptions {
        k: 50,
        n_bootstrap: 10,
        modes: vec![GroundTruthMode::Closest],
        ..EvalOptions::default()
    };
    let mae = |ablation: Ablation, seed: u64| -> Result<f64, String> {
        let base = TrainConfig {
            base_filters: 16,
            epochs: EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&ph.train, &ablation.apply(&base)).map_err(|e| e.to_string())?;
        let w = hpu_weights(&out.checkpoint).map_err(|e| e.to_string())?;
        let r = evaluate(&w, &ph.test, &opts).map_err(|e| e.to_string())?;
        Ok(r.mode(GroundTruthMode::Closest)
            .unwrap()
            .mae_mm
            .point
            .unwrap_or(f64::NAN))
    };
    let mut bce = Vec::new();
    let mut soft_iou = Vec::new();
    for seed in 0..3 {
        bce.push(mae(Ablation::Bd0, seed)?);
        soft_iou.push(mae(Ablation::Id0, seed)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mi) = (mean(&bce), mean(&soft_iou));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    check(
        mi < mb,
        format!(
            "mean MAE(CLOSEST) IoU {mi:.3} < BCE {mb:.3} mm required; per seed IoU [{}], BCE [{}]; {EPOCHS} epochs",
            fmt(&soft_iou),
            fmt(&bce)
        ),
    )
}

/// Runs the binary; exit code 3 (NaN metrics, files still written) is
/// accepted when `nan_ok` is set.
fn uhpnet_with(cwd: &Path, args: &[&str], nan_ok: bool) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_uhpnet"))
        .current_dir(cwd)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() || (nan_ok && out.status.code() == Some(3)) {
        Ok(())
    } else {
        Err(format!(
            "uhpnet {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn uhpnet(cwd: &Path, args: &[&str]) -> Result<(), String> {
    uhpnet_with(cwd, args, false)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every command inside `root` with fixed seeds and relative paths,
/// so that two runs see identical arguments.
fn pipeline(root: &Path) -> Result<(), String> {
    uhpnet(
        root,
        &[
            "phantom-gen",
            "--out",
            "ph",
            "--n-nodules",
            "8",
            "--seed",
            "5",
        ],
    )?;
    let manifest = "ph/manifest.csv";
    let tiny = [
        "--set",
        "base_filters=4",
        "--set",
        "num_latent_levels=2",
        "--epochs",
        "2",
    ];
    let mut train_args = vec![
        "train",
        "--manifest",
        manifest,
        "--out",
        "hpu",
        "--seed",
        "3",
    ];
    train_args.extend(tiny);
    uhpnet(root, &train_args)?;
    let mut base_args = vec![
        "train",
        "--manifest",
        manifest,
        "--model",
        "BAYES_TD",
        "--out",
        "bayes",
        "--seed",
        "3",
    ];
    base_args.extend(tiny);
    uhpnet(root, &base_args)?;
    for model in ["hpu", "bayes"] {
        let ckpt = format!("{model}/checkpoint.bin");
        uhpnet(
            root,
            &[
                "predict",
                "--checkpoint",
                &ckpt,
                "--manifest",
                manifest,
                "--nodule-id",
                "PH0002",
                "--k",
                "20",
                "--seed",
                "9",
                "--out",
                &format!("{model}-predict"),
            ],
        )?;
        uhpnet_with(
            root,
            &[
                "evaluate",
                "--checkpoint",
                &ckpt,
                "--manifest",
                manifest,
                "--split",
                "all",
                "--k",
                "10",
                "--n-bootstrap",
                "50",
                "--seed",
                "9",
                "--out",
                &format!("{model}-eval"),
            ],
            true,
        )?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names_match = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        names_match && differing.is_empty(),
        format!(
            "{} output files compared across two runs; differing: {differing:?}",
            fa.len()
        ),
    )
}

/// Whether any pixel's soft probability varies across samples.
fn soft_spread(s: &dyn SegmentationSampler, ph: &Phantoms) -> Result<bool, String> {
    let e = &ph.test.entries()[0];
    let d0 = e.annotations[0].d0_mm;
    let cond = ConditioningVector::from_measurements(
        i64::from(e.pair.days_between),
        d0,
        s.normalization(),
    )
    .map_err(|e| e.to_string())?;
    let maps = s
        .sample_probs(&e.pair.i0, &cond, 0, 20, 1)
        .map_err(|e| e.to_string())?;
    Ok((0..maps[0].len()).any(|i| maps.iter().any(|m| m[i] != maps[0][i])))
}

fn criterion_9(ph: &Phantoms) -> Outcome {
    let config = TrainConfig {
        base_filters: 8,
        epochs: 2,
        ..TrainConfig::default()
    };
    let opts = EvalOptions {
        k: 20,
        n_bootstrap: 50,
        ..EvalOptions::default()
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in BaselineKind::ALL {
        let out = train_baseline(
            &BaselineConfig::from_train(kind, &config),
            &ph.train,
            &config,
        )
        .map_err(|e| format!("{kind}: {e}"))?;
        let net = BaselineNet::from_checkpoint(&out.checkpoint).map_err(|e| e.to_string())?;
        let r = evaluate(&net, &ph.test, &opts).map_err(|e| format!("{kind}: {e}"))?;
        let max_std = r
            .records
            .iter()
            .map(|x| x.est_growth_std_mm)
            .fold(0.0, f64::max);
        let spread = soft_spread(&net, ph)?;
        match kind {
            BaselineKind::UResNet => ok &= max_std == 0.0 && !spread,
            BaselineKind::BayesTd | BaselineKind::Spu => ok &= spread,
            BaselineKind::P2pGan => {}
        }
        parts.push(format!(
            "{kind} evaluated, max growth std {max_std:.3}, soft samples vary: {spread}"
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_10(report: &Option<MetricReport>) -> Outcome {
    let r = report
        .as_ref()
        .ok_or("no phantom report (criterion 5 failed to produce one)")?;
    let mut ok = r.options.n_bootstrap == 1000;
    let mut parts = Vec::new();
    for m in &r.modes {
        let (p, b) = (m.bacc.point, m.bacc.mean);
        let gap = match (p, b) {
            (Some(p), Some(b)) => (p - b).abs(),
            _ => f64::NAN,
        };
        ok &= gap <= 0.02;
        parts.push(format!("{} |mean - point| {gap:.4}", m.mode.name()));
    }
    check(
        ok,
        format!(
            "N = {}: {} (tol 0.02)",
            r.options.n_bootstrap,
            parts.join(", ")
        ),
    )
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match result {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n}: {tag} [{secs:.0} s] {detail}");
    ok
}

fn main() {
    // Listing and filtered runs from the test harness carry arguments.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    if args.iter().any(|a| !a.starts_with('-'))
        && !args.iter().any(|a| "acceptance".contains(a.as_str()))
    {
        return;
    }
    let mut passed = Vec::new();
    passed.push(run(1, criterion_1));
    passed.push(run(2, criterion_2));
    passed.push(run(3, criterion_3));
    passed.push(run(8, criterion_8));
    passed.push(run(4, criterion_4));
    let ph = phantoms();
    let mut report = None;
    passed.push(run(5, || criterion_5(&ph, &mut report)));
    passed.push(run(6, || criterion_6(&report)));
    passed.push(run(10, || criterion_10(&report)));
    passed.push(run(9, || criterion_9(&ph)));
    passed.push(run(7, || criterion_7(&ph)));
    let failed = passed.iter().filter(|&&p| !p).count();
    println!(
        "acceptance: {} of {} criteria passed",
        passed.len() - failed,
        passed.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
