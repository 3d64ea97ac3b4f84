use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mind_core::backbone::ModelConfig;
use mind_core::imagedata::{read_image, synthetic_phantom, write_image, ImageFormat};
use mind_core::trainer::{initial_checkpoint, NoiseCurriculum, RunConfig};
use mind_core::degrade::NoiseKind;

const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "estimate-noise",
    "train",
    "denoise",
    "evaluate",
    "ablate",
    "curves",
    "gradcheck",
    "make-phantoms",
];

fn mind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mind"))
        .args(args)
        .env("MIND_THREADS", "1")
        .output()
        .expect("spawn mind")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Set MIND_UPDATE_GOLDEN=1 to rewrite the files after an intentional change.
#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("MIND_UPDATE_GOLDEN").is_some();
    let mut cases = vec![("mind".to_string(), vec!["--help"])];
    for s in SUBCOMMANDS {
        cases.push((s.to_string(), vec![s, "--help"]));
    }
    for (name, args) in cases {
        let out = mind(&args);
        assert!(out.status.success(), "{name} --help failed");
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(text, want, "help for {name} drifted from {}", path.display());
    }
}

#[test]
fn every_flag_documents_a_default() {
    for s in SUBCOMMANDS {
        let text = String::from_utf8(mind(&[s, "--help"]).stdout).unwrap();
        let usage = text.lines().find(|l| l.starts_with("Usage:")).unwrap();
        // an option's help may continue on the following indented lines
        let mut blocks: Vec<String> = Vec::new();
        for l in text.lines().map(str::trim_start) {
            if l.starts_with('-') {
                blocks.push(l.to_string());
            } else if let Some(b) = blocks.last_mut() {
                b.push(' ');
                b.push_str(l);
            }
        }
        for line in blocks.iter().filter(|l| l.starts_with("--")) {
            let flag = line.split_whitespace().next().unwrap();
            if flag == "--help" || flag == "--version" {
                continue;
            }
            // required flags appear in the usage line and have no default
            let required = usage.contains(&format!("{flag} <"));
            assert!(required || line.contains("[default"), "{s}: `{line}` has no default");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    for args in [vec!["frobnicate"], vec!["curves", "--bogus"], vec![]] {
        let out = mind(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    for args in [
        vec!["synth", "--noise", "pink", "--level", "0.1", "a", "b"],
        vec!["gradcheck", "not_a_component"],
        vec!["evaluate", "--ckpt", "c", "--data", "d", "--noise", "gaussian"],
    ] {
        let out = mind(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("invalid value"), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pgm");
    let out = mind(&["estimate-noise", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    write_image(&synthetic_phantom(40, 3), &a, ImageFormat::Pgm16).unwrap();
    let (b1, b2) = (dir.path().join("b1.pgm"), dir.path().join("b2.pgm"));
    for b in [&b1, &b2] {
        let out = mind(&["synth", "--noise", "gaussian", "--level", "0.1", "--seed", "7", p(&a), p(b)]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b1).unwrap());
}

#[test]
fn curves_first_row_is_the_base_weights() {
    let out = mind(&["curves", "--stop", "10"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sigma,lambda_mse,lambda_ssim,lambda_edge,lambda_perc,lambda_adv"
    );
    let row0: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row0, vec![0.0, 1.0, 0.8, 0.6, 0.4, 0.1]);
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn estimate_noise_writes_map_and_scalar() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("c.pgm");
    let noisy = dir.path().join("n.pgm");
    let map = dir.path().join("m.pfm");
    write_image(&mind_core::Image::filled(64, 64, 0.5).unwrap(), &clean, ImageFormat::Pgm16).unwrap();
    assert!(mind(&["synth", "--noise", "gaussian", "--level", "0.1", "--seed", "1", p(&clean), p(&noisy)])
        .status
        .success());
    let out = mind(&["estimate-noise", "--coarse", p(&clean), "--out-map", p(&map), p(&noisy)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.ends_with('\n'));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let s = v["sigma_mean"].as_f64().unwrap();
    assert!((0.08..0.12).contains(&s), "{s}");
    assert_eq!(read_image(&map).unwrap().height(), 64);
}

fn tiny_config(dir: &Path) -> RunConfig {
    let model = ModelConfig {
        base_channels: 8,
        embed_dim: 16,
        key_dim: 16,
        transformer_layers: 1,
        ..ModelConfig::default()
    };
    RunConfig {
        input_size: 32,
        batch_size: 2,
        epochs: 2,
        patches_per_epoch: 4,
        noise: NoiseCurriculum::Fixed {
            kind: NoiseKind::Gaussian,
            level: 0.15,
        },
        model,
        dataset_root: dir.join("data"),
        ..RunConfig::default()
    }
}

#[test]
fn denoise_with_untrained_checkpoint_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("init.ckpt");
    initial_checkpoint(&tiny_config(dir.path())).unwrap().save(&ck).unwrap();
    let input = dir.path().join("in.pgm");
    let output = dir.path().join("out.pgm");
    let diag = dir.path().join("diag");
    write_image(&synthetic_phantom(32, 9), &input, ImageFormat::Pgm16).unwrap();
    let out = mind(&["denoise", "--ckpt", p(&ck), "--dump-diagnostics", p(&diag), p(&input), p(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_image(&input).unwrap();
    let b = read_image(&output).unwrap();
    let q = 0.5 / 65535.0;
    assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| (x - y).abs() <= q));
    for f in ["sigma.pfm", "spatial.pfm", "alpha.pfm", "coarse.pfm", "diagnostics.json"] {
        assert!(diag.join(f).exists(), "{f}");
    }
    let sp = read_image(diag.join("spatial.pfm")).unwrap();
    assert!(sp.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_json_pretty()).unwrap();
    let data = dir.path().join("data");
    assert!(mind(&["make-phantoms", "--count", "4", "--size", "40", p(&data)]).status.success());
    let held = dir.path().join("held");
    assert!(mind(&["make-phantoms", "--count", "4", "--size", "32", "--seed", "100", p(&held)])
        .status
        .success());

    let run1 = dir.path().join("run1");
    let out = mind(&["train", "--config", p(&cfg_path), "--out", p(&run1)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["step"], 4);
    for f in ["final.ckpt", "best.ckpt", "last.ckpt", "history.jsonl"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let run2 = dir.path().join("run2");
    assert!(mind(&["train", "--config", p(&cfg_path), "--out", p(&run2)]).status.success());
    assert_eq!(fs::read(run1.join("final.ckpt")).unwrap(), fs::read(run2.join("final.ckpt")).unwrap());

    let report = dir.path().join("report.json");
    let out = mind(&[
        "evaluate",
        "--ckpt",
        p(&run1.join("final.ckpt")),
        "--data",
        p(&held),
        "--batches",
        "2",
        "--out",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.ends_with('\n'));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn gradcheck_single_component() {
    let out = mind(&["gradcheck", "loss_mse"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["component"], "loss_mse");
    assert_eq!(v["pass"], true);
}
