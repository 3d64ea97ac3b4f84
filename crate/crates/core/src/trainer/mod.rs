//! Optimization loop: seeded batch synthesis, Adam with cosine decay,
//! checkpointing and resumption, and the finite-difference gradient checker.
//!
//! Every random draw of step `s` comes from a ChaCha8 stream selected by
//! `(seed, s)`, so a run resumed from any epoch boundary replays exactly the
//! batches an uninterrupted run would have seen. Per-sample gradients are
//! summed in batch order, which keeps results independent of the worker
//! count.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optim;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::mind_forward_var;
use crate::degrade::{degrade, NoiseKind, NoiseSpec};
use crate::error::{MindError, Result};
use crate::graph::Graph;
use crate::imagedata::{Dataset, Image};
use crate::objective::{discriminator_loss_var, total_loss_var, Discriminator, LossReport, PerceptualExtractor};
use crate::params::{Init, ParamStore};

pub use checkpoint::{initial_checkpoint, Checkpoint, CheckpointMeta, RngState};
pub use config::{cosine_lr, NoiseCurriculum, RunConfig};
pub use optim::Adam;

pub const RNG_ALGORITHM: &str = "chacha8-stream-per-step";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Worker count from `MIND_THREADS`; unset means all cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("MIND_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(MindError::Config(format!("MIND_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the history file go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    /// Return after this many epochs in total (simulated interruption).
    pub stop_after_epochs: Option<usize>,
}

impl TrainOptions {
    pub fn strict() -> Self {
        Self {
            threads: 1,
            ..Self::default()
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Records produced by this invocation.
    pub history: Vec<HistoryRecord>,
    pub best_loss: Option<f64>,
}

impl TrainOutcome {
    /// Mean total loss per epoch, in order.
    pub fn epoch_means(&self) -> Vec<(u64, f64)> {
        epoch_means(&self.history)
    }
}

pub fn epoch_means(history: &[HistoryRecord]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in history {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.loss.total;
                last.2 += 1;
            }
            _ => out.push((r.epoch, r.loss.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// One degraded training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clean: Image,
    pub noisy: Image,
    pub spec: NoiseSpec,
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws a noise specification according to the curriculum.
pub fn draw_noise(curriculum: &NoiseCurriculum, rng: &mut ChaCha8Rng) -> NoiseSpec {
    let (kind, level) = match curriculum {
        NoiseCurriculum::Mixed => {
            let kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
            let (lo, hi) = kind.level_range();
            (kind, rng.gen_range(lo..=hi))
        }
        NoiseCurriculum::Fixed { kind, level } => (*kind, *level),
    };
    NoiseSpec::new(kind, level, rng.gen())
}

/// The batch of step `step`: random image, crop, optional rot90 and ±10%
/// intensity scaling, then degradation.
pub fn draw_batch(cfg: &RunConfig, images: &[Image], step: u64) -> Result<Vec<Sample>> {
    let mut rng = step_rng(cfg.seed, step);
    let size = cfg.input_size;
    (0..cfg.batch_size)
        .map(|_| {
            let img = &images[rng.gen_range(0..images.len())];
            let top = rng.gen_range(0..=img.height() - size);
            let left = rng.gen_range(0..=img.width() - size);
            let mut clean = img.crop(top, left, size, size)?;
            if cfg.augment {
                let turns = rng.gen_range(0..4);
                let scale: f32 = rng.gen_range(0.9..=1.1);
                clean = clean.rot90(turns).map_pixels(|p| p * scale).clamped();
            }
            let spec = draw_noise(&cfg.noise, &mut rng);
            let noisy = degrade(&clean, &spec)?;
            Ok(Sample { clean, noisy, spec })
        })
        .collect()
}

struct SampleResult {
    grads: ParamStore<f32>,
    disc_grads: Option<ParamStore<f32>>,
    report: LossReport,
}

fn sample_step(
    cfg: &RunConfig,
    params: &ParamStore<f32>,
    phi: &PerceptualExtractor<f32>,
    disc: Option<&ParamStore<f32>>,
    s: &Sample,
) -> Result<SampleResult> {
    let inv_batch = 1.0 / cfg.batch_size as f32;
    let g = Graph::<f32>::new();
    let p = params.bind(&g);
    let fwd = mind_forward_var(&cfg.model, cfg.flags, &p, g.constant(s.noisy.to_tensor()));
    let sigma = fwd.sigma_scalar();
    let phi_b = phi.bind(&g);
    let disc_b = disc.map(|d| d.bind_frozen(&g));
    let lv = total_loss_var(
        fwd.denoised,
        g.constant(s.clean.to_tensor()),
        sigma,
        &cfg.loss,
        phi,
        &phi_b,
        disc_b.as_ref(),
    )?;
    let report = lv.report(sigma);
    let denoised = (*fwd.denoised.value()).clone();
    let grads = p.gradients(&g.backward(lv.total.mul_scalar(inv_batch)));

    let disc_grads = disc.map(|d| {
        let g = Graph::<f32>::new();
        let db = d.bind(&g);
        let real = Discriminator::forward(&db, g.constant(s.clean.to_tensor()));
        let fake = Discriminator::forward(&db, g.constant(denoised));
        let loss = discriminator_loss_var(real, fake).mul_scalar(inv_batch);
        db.gradients(&g.backward(loss))
    });
    Ok(SampleResult {
        grads,
        disc_grads,
        report,
    })
}

fn sum_in_order(parts: impl Iterator<Item = ParamStore<f32>>) -> Option<ParamStore<f32>> {
    let mut acc: Option<ParamStore<f32>> = None;
    for g in parts {
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (k, t) in a.iter_mut() {
                    t.add_assign(g.get(k).expect("same parameter set"));
                }
            }
        }
    }
    acc
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut lambdas = [0.0; 5];
    for (i, l) in lambdas.iter_mut().enumerate() {
        *l = avg(&|r| r.lambdas[i]);
    }
    LossReport {
        mse: avg(&|r| r.mse),
        ssim_loss: avg(&|r| r.ssim_loss),
        edge: avg(&|r| r.edge),
        perceptual: avg(&|r| r.perceptual),
        adversarial: avg(&|r| r.adversarial),
        lambdas,
        total: avg(&|r| r.total),
        sigma_scalar: avg(&|r| r.sigma_scalar),
    }
}

/// Full optimizer and weight state between steps.
struct State {
    params: ParamStore<f32>,
    adam: Adam,
    disc: Option<(ParamStore<f32>, Adam)>,
    step: u64,
    epoch: u64,
    best_loss: Option<f64>,
}

impl State {
    fn from_checkpoint(ck: &Checkpoint) -> Result<State> {
        let cfg = &ck.meta.config;
        let params = ck.model()?.params;
        let (m, v) = ck.adam_moments();
        let mut adam = Adam::new(&params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        if !m.is_empty() {
            adam.m = m;
            adam.v = v;
        }
        adam.t = ck.meta.adam_t;
        let disc = if cfg.loss.adversarial_enabled {
            let mut d = ck.discriminator();
            if d.is_empty() {
                d = ParamStore::new();
                Discriminator::init(&mut d, &mut Init::new(cfg.seed ^ 0xd15c));
            }
            let mut da = Adam::new(&d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            let (m, v) = ck.disc_moments();
            if !m.is_empty() {
                da.m = m;
                da.v = v;
            }
            da.t = ck.meta.disc_adam_t;
            Some((d, da))
        } else {
            None
        };
        Ok(State {
            params,
            adam,
            disc,
            step: ck.meta.step,
            epoch: ck.meta.epoch,
            best_loss: ck.meta.best_loss,
        })
    }

    fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut tensors = self.params.clone();
        let put = |t: &mut ParamStore<f32>, prefix: &str, s: &ParamStore<f32>| {
            for (k, v) in s.iter() {
                t.insert(format!("{prefix}{k}"), v.clone());
            }
        };
        put(&mut tensors, checkpoint::ADAM_M, &self.adam.m);
        put(&mut tensors, checkpoint::ADAM_V, &self.adam.v);
        let mut disc_t = 0;
        if let Some((d, da)) = &self.disc {
            put(&mut tensors, "", d);
            put(&mut tensors, checkpoint::DISC_ADAM_M, &da.m);
            put(&mut tensors, checkpoint::DISC_ADAM_V, &da.v);
            disc_t = da.t;
        }
        Checkpoint {
            tensors,
            meta: CheckpointMeta {
                step: self.step,
                epoch: self.epoch,
                adam_t: self.adam.t,
                disc_adam_t: disc_t,
                best_loss: self.best_loss,
                config: cfg.clone(),
                rng: RngState {
                    algorithm: RNG_ALGORITHM.into(),
                    seed: cfg.seed,
                    next_step: self.step,
                },
            },
        }
    }
}

pub fn load_training_images(cfg: &RunConfig) -> Result<Vec<Image>> {
    let ds = Dataset::load(&cfg.dataset_root)?;
    Ok(ds.items.into_iter().map(|i| i.clean).collect())
}

/// Trains from scratch on the clean images under `cfg.dataset_root`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let images = load_training_images(cfg)?;
    train_on(cfg, &images, opts)
}

pub fn train_on(cfg: &RunConfig, images: &[Image], opts: &TrainOptions) -> Result<TrainOutcome> {
    run(initial_checkpoint(cfg)?, images, opts)
}

/// Continues a run from a checkpoint written at an epoch boundary.
pub fn resume(ck: Checkpoint, images: &[Image], opts: &TrainOptions) -> Result<TrainOutcome> {
    ck.meta.config.validate()?;
    run(ck, images, opts)
}

fn open_history(dir: &Path, keep_before: u64) -> Result<BufWriter<File>> {
    let path = dir.join(HISTORY_FILE);
    let mut kept = Vec::new();
    if keep_before > 0 && path.exists() {
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            let rec: HistoryRecord = serde_json::from_str(&line)?;
            if rec.step < keep_before {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(&path)?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        out.push(serde_json::from_str(&line?)?);
    }
    Ok(out)
}

fn run(ck: Checkpoint, images: &[Image], opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = ck.meta.config.clone();
    if images.is_empty() {
        return Err(MindError::Dataset("no clean images to train on".into()));
    }
    if let Some(small) = images.iter().find(|i| i.height() < cfg.input_size || i.width() < cfg.input_size) {
        return Err(MindError::Dataset(format!(
            "image {}x{} is smaller than input_size {}",
            small.height(),
            small.width(),
            cfg.input_size
        )));
    }
    let mut state = State::from_checkpoint(&ck)?;
    let phi = PerceptualExtractor::<f32>::new(cfg.perceptual_seed);
    let spe = cfg.steps_per_epoch() as u64;
    let total = cfg.total_steps();
    let threads = opts.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MindError::Config(format!("thread pool: {e}")))?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut hist_file = match &opts.out_dir {
        Some(dir) => Some(open_history(dir, state.step)?),
        None => None,
    };
    let mut history = Vec::new();
    let stop_epoch = opts.stop_after_epochs.map_or(cfg.epochs as u64, |e| (e as u64).min(cfg.epochs as u64));

    while state.epoch < stop_epoch {
        let mut epoch_sum = 0.0;
        for _ in 0..spe {
            let step = state.step;
            let lr = cosine_lr(step as usize, total, cfg.lr0, cfg.lr_min)?;
            let batch = draw_batch(&cfg, images, step)?;
            let disc = state.disc.as_ref().map(|(d, _)| d);
            let work = |s: &Sample| sample_step(&cfg, &state.params, &phi, disc, s);
            let results: Vec<SampleResult> = if threads == 1 {
                batch.iter().map(work).collect::<Result<_>>()?
            } else {
                pool.install(|| batch.par_iter().map(work).collect::<Result<_>>())?
            };
            let reports: Vec<LossReport> = results.iter().map(|r| r.report.clone()).collect();
            let report = mean_report(&reports);
            if !report.total.is_finite() || reports.iter().any(|r| !r.total.is_finite()) {
                return Err(MindError::NonFinite(format!(
                    "loss at step {step}: {}",
                    serde_json::to_string(&report).unwrap_or_default()
                )));
            }
            let disc_grads = sum_in_order(results.iter().filter_map(|r| r.disc_grads.clone()));
            let grads = sum_in_order(results.into_iter().map(|r| r.grads)).expect("nonempty batch");
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(MindError::NonFinite(format!("gradient at step {step}")));
            }
            state.adam.step(&mut state.params, &grads, lr);
            if let (Some((d, da)), Some(dg)) = (state.disc.as_mut(), disc_grads) {
                da.step(d, &dg, lr);
            }
            let rec = HistoryRecord {
                step,
                epoch: state.epoch,
                lr,
                loss: report,
            };
            if let Some(w) = hist_file.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            epoch_sum += rec.loss.total;
            history.push(rec);
            state.step += 1;
        }
        state.epoch += 1;
        let mean = epoch_sum / spe as f64;
        log::info!("epoch {}/{} mean loss {mean:.6}", state.epoch, cfg.epochs);
        let improved = state.best_loss.is_none_or(|b| mean < b);
        if improved {
            state.best_loss = Some(mean);
        }
        if let Some(dir) = &opts.out_dir {
            let ck = state.to_checkpoint(&cfg);
            if improved {
                ck.save(dir.join(BEST_CKPT))?;
            }
            ck.save(dir.join(LAST_CKPT))?;
            if let Some(w) = hist_file.as_mut() {
                w.flush()?;
            }
        }
    }
    let checkpoint = state.to_checkpoint(&cfg);
    if let Some(dir) = &opts.out_dir {
        if state.epoch == cfg.epochs as u64 {
            checkpoint.save(dir.join(FINAL_CKPT))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_loss: state.best_loss,
    })
}
