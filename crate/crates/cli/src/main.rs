//! `mind`: command-line front end for degradation, noise estimation,
//! training, inference and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use mind_core::backbone::mind_forward;
use mind_core::degrade::{degrade, NoiseKind, NoiseSpec};
use mind_core::evalkit::{
    ablate, emit_lambda_curve, evaluate_run, write_attention_maps, AblateOptions, EvalNoise, EvalOptions, Method,
};
use mind_core::filter::gaussian_blur;
use mind_core::imagedata::{read_image, synthetic_phantom, write_dataset, write_image, write_pfm_map, Dataset, ImageFormat};
use mind_core::nle::{estimate_sigma_map, sigma_scalar};
use mind_core::objective::LossWeightsConfig;
use mind_core::trainer::gradcheck::{grad_check, tolerance, GradCheckOptions, COMPONENTS};
use mind_core::trainer::{self, threads_from_env, Checkpoint, RunConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "mind", version, about = "Noise-adaptive image denoising toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade a clean image with seeded synthetic noise
    Synth {
        /// gaussian, poisson, speckle or motion_blur
        #[arg(long, value_parser = parse_kind)]
        noise: NoiseKind,
        /// Noise level (σ, peak, variance or blur length by kind)
        #[arg(long)]
        level: f64,
        /// Motion-blur angle in radians
        #[arg(long, default_value_t = 0.0)]
        angle: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reject levels outside the training curriculum range [default: off]
        #[arg(long)]
        strict: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Estimate the per-pixel noise map of an image
    EstimateNoise {
        /// Averaging window side (odd)
        #[arg(long, default_value_t = 15)]
        window: usize,
        /// Reference estimate of the clean image [default: Gaussian blur, σ 1.5, of INPUT]
        #[arg(long)]
        coarse: Option<PathBuf>,
        /// Where to write the σ map as PFM [default: not written]
        #[arg(long)]
        out_map: Option<PathBuf>,
        input: PathBuf,
    },
    /// Train a model from a run configuration
    Train {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and history.jsonl
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed [default: from config]
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh [default: none]
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete [default: run all]
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Denoise one image with a trained checkpoint
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write sigma/spatial/alpha maps, the coarse image and diagnostics.json here [default: none]
        #[arg(long)]
        dump_diagnostics: Option<PathBuf>,
        input: PathBuf,
        output: PathBuf,
    },
    /// Score a checkpoint and the classical baselines on held-out images
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root holding clean/*.pgm
        #[arg(long)]
        data: PathBuf,
        /// Number of disjoint batches for the paired t-tests
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// Degradation as kind:level; repeat for several
        #[arg(long = "noise", default_value = "gaussian:0.15", value_parser = parse_eval_noise)]
        noises: Vec<EvalNoise>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Report path [default: standard output]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the single-module ablations and tabulate them against the full model
    Ablate {
        /// Run configuration (JSON) shared by every row
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the table and per-configuration runs
        #[arg(long)]
        out: PathBuf,
        /// Use this checkpoint for the full row instead of training it [default: train]
        #[arg(long)]
        full_ckpt: Option<PathBuf>,
        /// Held-out dataset root [default: 16 synthetic phantoms disjoint from make-phantoms seeds]
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Degradation for the main rows, as kind:level
        #[arg(long, default_value = "gaussian:0.15", value_parser = parse_eval_noise)]
        noise: EvalNoise,
        /// Seed for the evaluation degradations
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Tabulate the loss weights against the noise level (σ in percent)
    Curves {
        /// Run configuration whose loss weights are used [default: built-in weights]
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path [default: standard output]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long, default_value_t = 50.0)]
        stop: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// Component to check [default: all]
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(COMPONENTS))]
        component: Option<String>,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write seeded synthetic phantoms as a dataset (ROOT/clean/*.pgm)
    MakePhantoms {
        #[arg(long, default_value_t = 24)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        root: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<NoiseKind, String> {
    NoiseKind::parse(s).ok_or_else(|| format!("unknown noise kind `{s}` (gaussian, poisson, speckle, motion_blur)"))
}

fn parse_eval_noise(s: &str) -> Result<EvalNoise, String> {
    EvalNoise::parse(s).map_err(|e| e.to_string())
}

/// Seeds of the default held-out phantoms, far from anything `make-phantoms`
/// is likely to be asked for.
const HELD_OUT_SEED: u64 = 1 << 40;

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(&text, out)
}

fn write_text(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<mind_core::backbone::MindModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model()?)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth {
            noise,
            level,
            angle,
            seed,
            strict,
            input,
            output,
        } => {
            let img = read_image(&input)?;
            let spec = NoiseSpec::new(noise, level, seed).with_angle(angle);
            spec.validate(strict)?;
            let out = degrade(&img, &spec)?;
            write_image(&out, &output, ImageFormat::for_path(&output))?;
        }
        Command::EstimateNoise {
            window,
            coarse,
            out_map,
            input,
        } => {
            let img = read_image(&input)?;
            let coarse = match coarse {
                Some(p) => read_image(p)?,
                None => gaussian_blur(&img, 1.5)?,
            };
            let map = estimate_sigma_map(&img, &coarse, window)?;
            if let Some(p) = &out_map {
                write_pfm_map(map.height(), map.width(), map.values(), p)?;
            }
            write_json(&json!({ "sigma_mean": sigma_scalar(&map), "window": window }), None)?;
        }
        Command::Train {
            config,
            out,
            seed,
            resume,
            stop_after_epochs,
        } => {
            fs::create_dir_all(&out)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                threads: threads_from_env()?,
                stop_after_epochs,
            };
            let outcome = match resume {
                Some(ck) => {
                    let ck = Checkpoint::load(&ck)?;
                    let cfg = RunConfig::load_resolved(&config)?;
                    if seed.is_some_and(|s| s != ck.meta.config.seed) {
                        bail!("--seed differs from the checkpoint's seed");
                    }
                    let images = trainer::load_training_images(&cfg)?;
                    trainer::resume(ck, &images, &opts)?
                }
                None => {
                    let mut cfg = RunConfig::load_resolved(&config)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    trainer::train(&cfg, &opts)?
                }
            };
            let last = outcome.history.last().map(|r| r.loss.total);
            write_json(
                &json!({
                    "step": outcome.checkpoint.meta.step,
                    "epoch": outcome.checkpoint.meta.epoch,
                    "final_loss": last,
                    "best_loss": outcome.best_loss,
                    "out": out,
                }),
                None,
            )?;
        }
        Command::Denoise {
            ckpt,
            dump_diagnostics,
            input,
            output,
        } => {
            let model = load_model(&ckpt)?;
            let img = read_image(&input)?;
            let res = mind_forward(&img, &model)?;
            write_image(&res.denoised, &output, ImageFormat::for_path(&output))?;
            if let Some(dir) = dump_diagnostics {
                fs::create_dir_all(&dir)?;
                write_attention_maps(&res, &dir)?;
                write_image(&res.diagnostics.coarse, dir.join("coarse.pfm"), ImageFormat::Pfm)?;
                let d = &res.diagnostics;
                let text = serde_json::to_string_pretty(&json!({
                    "sigma_scalar": d.sigma_scalar,
                    "lambdas": d.lambdas,
                    "gamma": d.gamma,
                    "beta": d.beta,
                    "alpha": d.alpha,
                }))? + "\n";
                fs::write(dir.join("diagnostics.json"), text)?;
            }
        }
        Command::Evaluate {
            ckpt,
            data,
            batches,
            noises,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let images: Vec<_> = ds.items.into_iter().map(|i| i.clean).collect();
            let opts = EvalOptions {
                noises,
                methods: Method::default_set(),
                batches,
                seed,
            };
            let report = evaluate_run(&images, Some(&model), &opts)?;
            write_json(&serde_json::to_value(&report)?, out.as_deref())?;
            if !report.all_finite() {
                bail!("report contains non-finite metrics");
            }
        }
        Command::Ablate {
            config,
            out,
            full_ckpt,
            eval_data,
            noise,
            seed,
        } => {
            let cfg = RunConfig::load_resolved(&config)?;
            fs::create_dir_all(&out)?;
            let train_images = trainer::load_training_images(&cfg)?;
            let eval_images = match eval_data {
                Some(root) => Dataset::load(root)?.items.into_iter().map(|i| i.clean).collect(),
                None => (0..16)
                    .map(|i| synthetic_phantom(cfg.input_size, HELD_OUT_SEED + i))
                    .collect::<Vec<_>>(),
            };
            let full_model = full_ckpt.as_deref().map(load_model).transpose()?;
            let opts = AblateOptions {
                train: TrainOptions {
                    out_dir: Some(out.clone()),
                    threads: threads_from_env()?,
                    stop_after_epochs: None,
                },
                full_model,
                noise,
                seed,
            };
            let table = ablate(&cfg, &train_images, &eval_images, &opts)?;
            fs::write(out.join("ablation.csv"), table.to_csv())?;
            let text = serde_json::to_string_pretty(&table)? + "\n";
            fs::write(out.join("ablation.json"), text)?;
            for n in &table.notes {
                log::info!("{n}");
            }
            write_text(&table.to_csv(), None)?;
            if !table.all_finite() {
                bail!("ablation table contains non-finite values");
            }
        }
        Command::Curves {
            config,
            out,
            start,
            stop,
            step,
        } => {
            let loss = match config {
                Some(p) => RunConfig::load(p)?.loss,
                None => LossWeightsConfig::default(),
            };
            write_text(&emit_lambda_curve(&loss, start, stop, step)?, out.as_deref())?;
        }
        Command::Gradcheck { component, eps, seed } => {
            let names: Vec<String> = match component {
                Some(c) => vec![c],
                None => COMPONENTS.iter().map(|s| s.to_string()).collect(),
            };
            let opts = GradCheckOptions {
                eps,
                seed,
                ..GradCheckOptions::default()
            };
            let mut failed = Vec::new();
            let mut so = std::io::stdout().lock();
            for name in &names {
                let r = grad_check(name, &opts)?;
                let tol = tolerance(name);
                let pass = r.max_rel_error < tol;
                if !pass {
                    failed.push(name.clone());
                }
                let mut v = serde_json::to_value(&r)?;
                v["tolerance"] = json!(tol);
                v["pass"] = json!(pass);
                writeln!(so, "{}", serde_json::to_string(&v)?)?;
            }
            so.flush()?;
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::MakePhantoms { count, size, seed, root } => {
            if count == 0 {
                bail!("--count must be positive");
            }
            if size < 16 {
                bail!("--size must be at least 16");
            }
            let images: Vec<_> = (0..count as u64).map(|i| synthetic_phantom(size, seed + i)).collect();
            write_dataset(&root, &images)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
