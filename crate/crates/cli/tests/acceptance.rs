//! Acceptance suite. Runs as a plain binary (no libtest harness) so every
//! criterion prints one PASS/FAIL line even when `cargo test` captures output.
//! Exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mind_core::backbone::{fuse_modalities, init_weights, mind_forward, self_attention, AblationFlags, MindModel, ModelConfig};
use mind_core::degrade::{degrade, NoiseKind, NoiseSpec};
use mind_core::evalkit::{paired_t_test, psnr, EvalReport};
use mind_core::imagedata::Image;
use mind_core::nle::{estimate_sigma_map, gradient_map, sigma_scalar};
use mind_core::objective::{ssim, LossWeightsConfig};
use mind_core::trainer::gradcheck::{grad_check, GradCheckOptions};
use mind_core::trainer::{read_history, NoiseCurriculum, RunConfig, HISTORY_FILE};
use mind_core::Tensor;

// Runtime budgets.
const A1_BUDGET: Duration = Duration::from_secs(1);
const A2_BUDGET: Duration = Duration::from_secs(30);
const A3_BUDGET: Duration = Duration::from_secs(30 * 60);
const A4_BUDGET: Duration = Duration::from_secs(5 * 60);
const A5_BUDGET: Duration = Duration::from_secs(10);
const A6_BUDGET: Duration = Duration::from_secs(5);
const A7_BUDGET: Duration = Duration::from_secs(60);
const A9_SLACK: Duration = Duration::from_secs(2 * 60);

// Tolerances.
const A1_LAMBDA_TOL: f64 = 1e-9;
const A2_REL_TOL: f64 = 0.10;
const A3_GAIN_OVER_NOISY_DB: f64 = 3.0;
const A3_GAIN_OVER_BLUR_DB: f64 = 0.5;
const A4_COMPOSITE_TOL: f64 = 1e-3;
const A4_OP_TOL: f64 = 1e-4;
const A6_ROW_SUM_TOL: f64 = 1e-6;
const A7_P_TOL: f64 = 1e-4;
const A7_FP_RANGE: (f64, f64) = (0.03, 0.07);
/// A 0.1 offset is not representable between f32 pixels; 0.4f32 − 0.3f32 is
/// 0.1 − 6e-9, which reads as 20 dB + 5.2e-7.
const A10_PSNR_TOL: f64 = 1e-6;
const A10_SSIM_IDENTICAL_TOL: f64 = 1e-12;
const A10_SSIM_PAIR_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn mind(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mind"))
        .args(args)
        .env("MIND_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`mind {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn a1() -> Outcome {
    let csv = mind(&["curves", "--start", "0", "--stop", "30", "--step", "1"])?;
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    ensure(rows[0] == [0.0, 1.0, 0.8, 0.6, 0.4, 0.1], || format!("row σ=0 is {:?}", rows[0]))?;
    let r10 = rows.iter().find(|r| r[0] == 10.0).ok_or("no σ=10 row")?;
    let err = (r10[1] - (-1.5f64).exp()).abs();
    ensure(err < A1_LAMBDA_TOL, || format!("λ_mse(10) off by {err:e}"))?;
    for w in rows.windows(2) {
        for c in 1..6 {
            ensure(w[1][c] < w[0][c], || format!("column {c} not decreasing at σ={}", w[1][0]))?;
        }
    }
    Ok(format!("{} rows, λ_mse(10) error {err:.1e}", rows.len()))
}

fn a2() -> Outcome {
    let levels = [0.05, 0.10, 0.25];
    let mut means = Vec::new();
    for (li, &sigma) in levels.iter().enumerate() {
        let mut acc = 0.0;
        for k in 0..20u64 {
            let clean = Image::filled(128, 128, 0.5).map_err(|e| e.to_string())?;
            let noisy = degrade(&clean, &NoiseSpec::gaussian(sigma, 100 * li as u64 + k)).map_err(|e| e.to_string())?;
            acc += sigma_scalar(&estimate_sigma_map(&noisy, &clean, 15).map_err(|e| e.to_string())?);
        }
        let m = acc / 20.0;
        let rel = (m - sigma).abs() / sigma;
        ensure(rel <= A2_REL_TOL, || format!("σ={sigma}: estimate {m:.4} ({:.1}% off)", rel * 100.0))?;
        means.push(m);
    }
    ensure(means[0] < means[1] && means[1] < means[2], || format!("not ordered: {means:?}"))?;
    Ok(format!("estimates {:.4} / {:.4} / {:.4}", means[0], means[1], means[2]))
}

struct A3Run {
    dir: tempfile::TempDir,
    config: PathBuf,
    elapsed: Duration,
}

/// Default model and schedule shape, with a larger initial step: 480 Adam
/// steps at 1e-4 leave the network well short of the blur baseline.
const A3_LR0: f64 = 1e-3;

fn a3_config(root: &Path) -> RunConfig {
    RunConfig {
        lr0: A3_LR0,
        noise: NoiseCurriculum::Fixed {
            kind: NoiseKind::Gaussian,
            level: 0.15,
        },
        epochs: 30,
        seed: 42,
        dataset_root: root.join("train"),
        ..RunConfig::default()
    }
}

fn a3(run: &mut Option<A3Run>) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    mind(&["make-phantoms", "--count", "24", "--size", "96", "--seed", "0", s(&root.join("train"))])?;
    mind(&["make-phantoms", "--count", "50", "--size", "64", "--seed", "1000", s(&root.join("held"))])?;
    let cfg = a3_config(root);
    let cfg_path = root.join("a3.json");
    fs::write(&cfg_path, cfg.to_json_pretty()).map_err(|e| e.to_string())?;
    mind(&["train", "--config", s(&cfg_path), "--out", s(&root.join("run"))])?;
    let report = root.join("report.json");
    mind(&[
        "evaluate",
        "--ckpt",
        s(&root.join("run/final.ckpt")),
        "--data",
        s(&root.join("held")),
        "--noise",
        "gaussian:0.15",
        "--batches",
        "8",
        "--out",
        s(&report),
    ])?;
    let elapsed = start.elapsed();
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let noise = "gaussian:0.15";
    let mindp = r.row("mind", noise).ok_or("no mind row")?.aggregate.psnr;
    let noisyp = r.row("noisy", noise).ok_or("no noisy row")?.aggregate.psnr;
    let blur = r.best_blur(noise).ok_or("no blur rows")?;
    let detail = format!(
        "mind {mindp:.2} dB, noisy {noisyp:.2} dB, best blur {} {:.2} dB, {:.0} s",
        blur.method,
        blur.aggregate.psnr,
        elapsed.as_secs_f64()
    );
    *run = Some(A3Run {
        dir,
        config: cfg_path,
        elapsed,
    });
    ensure(mindp >= noisyp + A3_GAIN_OVER_NOISY_DB, || format!("gain over noisy too small: {detail}"))?;
    ensure(mindp >= blur.aggregate.psnr + A3_GAIN_OVER_BLUR_DB, || format!("gain over blur too small: {detail}"))?;
    ensure(elapsed < A3_BUDGET, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn a4() -> Outcome {
    let composite = ["total_loss", "encode_decode", "mind_forward"];
    let ops = [
        "modulate",
        "channel_attention",
        "spatial_attention",
        "naab_forward",
        "self_attention",
        "loss_mse",
        "loss_ssim",
        "loss_perceptual",
    ];
    let opts = GradCheckOptions {
        image_size: 16,
        ..GradCheckOptions::default()
    };
    let mut worst = (String::new(), 0.0f64);
    for (names, tol) in [(&ops[..], A4_OP_TOL), (&composite[..], A4_COMPOSITE_TOL)] {
        for &c in names {
            let r = grad_check(c, &opts).map_err(|e| e.to_string())?;
            ensure(r.max_rel_error < tol, || {
                format!("{c}: {:.2e} ≥ {tol:e} at {}", r.max_rel_error, r.worst)
            })?;
            if r.max_rel_error > worst.1 {
                worst = (c.to_string(), r.max_rel_error);
            }
        }
    }
    Ok(format!("11 components, worst {} {:.2e}", worst.0, worst.1))
}

fn a5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let px: Vec<f32> = (0..64 * 64).map(|_| rng.gen()).collect();
    let img = Image::new(64, 64, px).map_err(|e| e.to_string())?;
    let flags = AblationFlags::all();
    for f in &flags {
        let model = MindModel::new(ModelConfig::default(), *f, LossWeightsConfig::default(), 11).map_err(|e| e.to_string())?;
        let out = mind_forward(&img, &model).map_err(|e| e.to_string())?;
        ensure(out.denoised.pixels() == img.pixels(), || format!("{} changed the input", f.label()))?;
    }
    Ok(format!("{} flag combinations bit-exact", flags.len()))
}

fn a6() -> Outcome {
    let cfg = ModelConfig::default();
    let store = init_weights::<f64>(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let l = 48;
    let z = Tensor::new(
        &[l, cfg.embed_dim],
        (0..l * cfg.embed_dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let (_, attn) = self_attention(&z, &cfg, &store, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for row in attn.data().chunks(l) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= A6_ROW_SUM_TOL, || format!("row sum off by {worst:e}"))?;

    // randomly initialized attention weights, noisy input
    let model = MindModel::new(cfg.clone(), AblationFlags::full(), LossWeightsConfig::default(), 4).map_err(|e| e.to_string())?;
    let clean = mind_core::imagedata::synthetic_phantom(32, 4);
    let noisy = degrade(&clean, &NoiseSpec::gaussian(0.2, 4)).map_err(|e| e.to_string())?;
    let d = mind_forward(&noisy, &model).map_err(|e| e.to_string())?.diagnostics;
    let alpha = d.alpha.ok_or("no channel gates")?;
    let spatial = d.spatial.ok_or("no spatial gate")?;
    let open = |v: &f32| *v > 0.0 && *v < 1.0;
    ensure(alpha.iter().all(open), || "α outside (0,1)".into())?;
    ensure(spatial.values().iter().all(open), || "spatial gate outside (0,1)".into())?;

    let mut counts = Vec::new();
    for (h, w, p) in [(8, 8, 2), (32, 48, 8), (64, 64, 4)] {
        let c = ModelConfig {
            patch: p,
            scales: 1,
            ..ModelConfig::default()
        };
        let st = init_weights::<f64>(&c, 1);
        let img = Image::filled(h, w, 0.5).map_err(|e| e.to_string())?;
        let g = gradient_map(&img, Default::default()).map_err(|e| e.to_string())?;
        let tokens = fuse_modalities(&img, &img, &g, &c, &st).map_err(|e| e.to_string())?;
        let want = 3 * (h / p) * (w / p);
        ensure(tokens.shape()[0] == want && c.token_count(h, w) == want, || {
            format!("({h},{w},{p}): {} tokens, want {want}", tokens.shape()[0])
        })?;
        counts.push(want);
    }
    Ok(format!("row-sum error {worst:.1e}, L = {counts:?}"))
}

fn a7() -> Outcome {
    let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let t = 2.0 / (1.0 / 3f64.sqrt());
    let closed = 2.0 * (1.0 - 0.5 * (1.0 + t / (t * t + 2.0).sqrt()));
    ensure((r.p - closed).abs() < A7_P_TOL, || format!("p {} vs closed form {closed}", r.p))?;
    ensure((r.p - 0.0742).abs() < A7_P_TOL, || format!("p {} vs 0.0742", r.p))?;
    let same = paired_t_test(&[0.3, 0.1, 0.7], &[0.3, 0.1, 0.7]).map_err(|e| e.to_string())?;
    ensure(same.p == 1.0, || format!("identical samples gave p = {}", same.p))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut hits = 0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        if paired_t_test(&a, &b).map_err(|e| e.to_string())?.p < 0.05 {
            hits += 1;
        }
    }
    let rate = hits as f64 / 1000.0;
    ensure((A7_FP_RANGE.0..=A7_FP_RANGE.1).contains(&rate), || format!("false-positive rate {rate}"))?;
    Ok(format!("p = {:.5}, closed form {closed:.5}, false-positive rate {rate}", r.p))
}

fn a8(run: &Option<A3Run>) -> Outcome {
    let run = run.as_ref().ok_or("A3 produced no model")?;
    let start = Instant::now();
    let out = run.dir.path().join("ablate");
    let csv = mind(&[
        "ablate",
        "--config",
        s(&run.config),
        "--out",
        s(&out),
        "--full-ckpt",
        s(&run.dir.path().join("run/final.ckpt")),
        "--eval-data",
        s(&run.dir.path().join("held")),
    ])?;
    let elapsed = start.elapsed();
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let rows = table["rows"].as_array().ok_or("no rows")?;
    ensure(rows.len() == 7, || format!("{} rows", rows.len()))?;
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap_or("")).collect();
    let want = ["full", "-naab", "-nle", "-multiscale", "-crossmodal"];
    ensure(labels[..5] == want, || format!("labels {labels:?}"))?;
    for r in rows {
        for k in ["psnr", "ssim", "perc_proxy"] {
            ensure(r[k].as_f64().is_some_and(f64::is_finite), || format!("{} {k} not finite", r["label"]))?;
        }
    }
    ensure(csv.lines().count() == 8, || "csv row count".into())?;
    ensure(elapsed <= 5 * run.elapsed, || {
        format!("{:.0} s exceeds 5 × A3 ({:.0} s)", elapsed.as_secs_f64(), run.elapsed.as_secs_f64())
    })?;
    let deltas: Vec<String> = rows[1..5]
        .iter()
        .map(|r| format!("{} {:+.2}", r["label"].as_str().unwrap(), r["delta_psnr"].as_f64().unwrap()))
        .collect();
    Ok(format!("7 rows, ΔPSNR vs full: {}, {:.0} s", deltas.join(", "), elapsed.as_secs_f64()))
}

fn a9(a3_elapsed: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let bytes = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));

    mind(&["make-phantoms", "--count", "6", "--size", "80", "--seed", "3", s(&root.join("train"))])?;
    let src = root.join("train/clean/img_0000.pgm");
    for name in ["s1.pgm", "s2.pgm"] {
        mind(&["synth", "--noise", "poisson", "--level", "30", "--seed", "9", s(&src), s(&root.join(name))])?;
    }
    ensure(bytes(root.join("s1.pgm"))? == bytes(root.join("s2.pgm"))?, || "synth differs".into())?;

    let cfg = RunConfig {
        epochs: 3,
        patches_per_epoch: 16,
        dataset_root: root.join("train"),
        ..RunConfig::default()
    };
    let cfg_path = root.join("cfg.json");
    fs::write(&cfg_path, cfg.to_json_pretty()).map_err(|e| e.to_string())?;
    for r in ["r1", "r2"] {
        mind(&["train", "--config", s(&cfg_path), "--out", s(&root.join(r))])?;
    }
    for f in ["final.ckpt", "best.ckpt", HISTORY_FILE] {
        ensure(bytes(root.join("r1").join(f))? == bytes(root.join("r2").join(f))?, || format!("{f} differs between runs"))?;
    }

    let r3 = root.join("r3");
    mind(&["train", "--config", s(&cfg_path), "--out", s(&r3), "--stop-after-epochs", "1"])?;
    mind(&["train", "--config", s(&cfg_path), "--out", s(&r3), "--resume", s(&r3.join("last.ckpt"))])?;
    let full = read_history(root.join("r1").join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let resumed = read_history(r3.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    ensure(full == resumed, || format!("history differs ({} vs {} records)", full.len(), resumed.len()))?;
    ensure(bytes(root.join("r1/final.ckpt"))? == bytes(r3.join("final.ckpt"))?, || "resumed checkpoint differs".into())?;
    let elapsed = start.elapsed();
    if let Some(a3) = a3_elapsed {
        ensure(elapsed < a3 + A9_SLACK, || format!("{:.0} s", elapsed.as_secs_f64()))?;
    }
    Ok(format!("{} history records identical after resume, {:.0} s", full.len(), elapsed.as_secs_f64()))
}

fn a10() -> Outcome {
    let e = |e: mind_core::MindError| e.to_string();
    let a = Image::filled(32, 32, 0.3).map_err(e)?;
    let b = Image::filled(32, 32, 0.4).map_err(e)?;
    let p = psnr(&b, &a).map_err(e)?;
    ensure((p - 20.0).abs() < A10_PSNR_TOL, || format!("psnr {p}"))?;
    let img = mind_core::imagedata::synthetic_phantom(48, 10);
    let same = ssim(&img, &img).map_err(e)?;
    ensure((same - 1.0).abs() < A10_SSIM_IDENTICAL_TOL, || format!("ssim(x,x) = {same}"))?;
    let c4 = Image::filled(32, 32, 0.4).map_err(e)?;
    let c5 = Image::filled(32, 32, 0.5).map_err(e)?;
    let pair = ssim(&c4, &c5).map_err(e)?;
    ensure((pair - 0.97568).abs() < A10_SSIM_PAIR_TOL, || format!("constant-pair ssim {pair}"))?;
    Ok(format!("psnr {p:.9} dB, ssim(x,x) {same}, constant pair {pair:.5}"))
}

fn main() {
    // libtest flags (e.g. --nocapture, filters) are accepted and ignored
    let list = std::env::args().any(|a| a == "--list");
    if list {
        return;
    }
    let mut failed = 0;
    let mut record = |id: &str, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let res = match (res, budget) {
            (Ok(d), Some(b)) if took >= b => Err(format!("{d}; took {took:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        match &res {
            Ok(d) => println!("{id} PASS  {name}: {d} [{took:.2?}]"),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL  {name}: {d} [{took:.2?}]");
            }
        }
    };
    record("A1", "λ(σ) curve", Some(A1_BUDGET), &mut a1);
    record("A2", "noise-level calibration", Some(A2_BUDGET), &mut a2);
    let mut run = None;
    record("A3", "toy denoising gain", None, &mut || a3(&mut run));
    record("A4", "gradient suite", Some(A4_BUDGET), &mut a4);
    record("A5", "identity at init", Some(A5_BUDGET), &mut a5);
    record("A6", "attention invariants", Some(A6_BUDGET), &mut a6);
    record("A7", "paired t-test", Some(A7_BUDGET), &mut a7);
    record("A8", "ablation table", None, &mut || a8(&run));
    let a3_elapsed = run.as_ref().map(|r| r.elapsed);
    record("A9", "determinism and resume", None, &mut || a9(a3_elapsed));
    record("A10", "metric exactness", None, &mut a10);
    if failed > 0 {
        println!("acceptance: {failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 10 criteria passed");
}
