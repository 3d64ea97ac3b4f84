//! Quality metrics, classical baselines, paired t-tests, evaluation and
//! ablation reports, and the λ-curve and attention-map exports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::{mind_forward, AblationFlags, Inference, MindModel};
use crate::degrade::{degrade, NoiseKind, NoiseSpec};
use crate::error::{MindError, Result};
use crate::filter::{gaussian_blur, median_filter};
use crate::imagedata::{write_pfm_map, Image};
use crate::objective::{lambda_weights, loss_mse, loss_perceptual, ssim, LossWeightsConfig, PerceptualExtractor, PERCEPTUAL_SEED};
use crate::trainer::{train_on, RunConfig, TrainOptions};

/// 10·log10(1/MSE); +∞ for identical images.
pub fn psnr(xhat: &Image, x: &Image) -> Result<f64> {
    let mse = loss_mse(xhat, x)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn rmse(xhat: &Image, x: &Image) -> Result<f64> {
    Ok(loss_mse(xhat, x)?.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Baseline {
    GaussianBlur { sigma: f64 },
    Median { k: usize },
}

pub fn baseline_denoise(img: &Image, method: Baseline) -> Result<Image> {
    match method {
        Baseline::GaussianBlur { sigma } => gaussian_blur(img, sigma),
        Baseline::Median { k } => median_filter(img, k),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Two-sided paired t-test on a − b. Zero spread gives t = 0, p = 1 when the
/// mean difference is zero and p = 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(MindError::Parameter(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(MindError::Parameter(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(MindError::NonFinite("paired t-test sample".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        (t, p.clamp(0.0, 1.0))
    };
    Ok(TTestResult {
        n,
        mean_diff: mean,
        t,
        df,
        p,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Frozen-extractor feature distance, a stand-in for a learned metric.
    pub perc_proxy: f64,
}

impl ImageMetrics {
    pub fn compute(xhat: &Image, x: &Image, phi: &PerceptualExtractor<f64>) -> Result<ImageMetrics> {
        Ok(ImageMetrics {
            psnr: psnr(xhat, x)?,
            ssim: ssim(xhat, x)?,
            rmse: rmse(xhat, x)?,
            perc_proxy: loss_perceptual(xhat, x, phi)?,
        })
    }

    pub fn mean(items: &[ImageMetrics]) -> ImageMetrics {
        let n = items.len() as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        ImageMetrics {
            psnr: avg(|m| m.psnr),
            ssim: avg(|m| m.ssim),
            rmse: avg(|m| m.rmse),
            perc_proxy: avg(|m| m.perc_proxy),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.psnr, self.ssim, self.rmse, self.perc_proxy].iter().all(|v| v.is_finite())
    }
}

/// What produces the estimate being scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Mind,
    /// The noisy input itself.
    Noisy,
    Baseline(Baseline),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Mind => "mind".into(),
            Method::Noisy => "noisy".into(),
            Method::Baseline(Baseline::GaussianBlur { sigma }) => format!("gaussian_blur({sigma})"),
            Method::Baseline(Baseline::Median { k }) => format!("median({k})"),
        }
    }

    pub fn default_set() -> Vec<Method> {
        vec![
            Method::Mind,
            Method::Noisy,
            Method::Baseline(Baseline::GaussianBlur { sigma: 0.8 }),
            Method::Baseline(Baseline::GaussianBlur { sigma: 1.2 }),
            Method::Baseline(Baseline::GaussianBlur { sigma: 1.6 }),
            Method::Baseline(Baseline::Median { k: 3 }),
        ]
    }

    fn apply(&self, noisy: &Image, model: Option<&MindModel>) -> Result<Image> {
        match self {
            Method::Mind => {
                let m = model.ok_or_else(|| MindError::Config("mind method needs a checkpoint".into()))?;
                Ok(mind_forward(noisy, m)?.denoised)
            }
            Method::Noisy => Ok(noisy.clone()),
            Method::Baseline(b) => baseline_denoise(noisy, *b),
        }
    }
}

/// Degradation applied to held-out images (seed assigned per image).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalNoise {
    pub kind: NoiseKind,
    pub level: f64,
}

impl EvalNoise {
    pub fn label(&self) -> String {
        format!("{}:{}", serde_json::to_value(self.kind).unwrap().as_str().unwrap(), self.level)
    }

    /// `kind:level`, e.g. `gaussian:0.15`.
    pub fn parse(s: &str) -> Result<EvalNoise> {
        let (k, l) = s
            .split_once(':')
            .ok_or_else(|| MindError::Parameter(format!("noise must look like kind:level, got `{s}`")))?;
        let kind = NoiseKind::parse(k).ok_or_else(|| MindError::Parameter(format!("unknown noise kind `{k}`")))?;
        let level: f64 = l
            .parse()
            .map_err(|_| MindError::Parameter(format!("bad noise level `{l}`")))?;
        let spec = NoiseSpec::new(kind, level, 0);
        spec.validate(false)?;
        Ok(EvalNoise { kind, level })
    }

    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec::new(self.kind, self.level, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub noise: String,
    pub seed: u64,
    pub per_image: Vec<ImageMetrics>,
    pub per_batch: Vec<ImageMetrics>,
    pub aggregate: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub noise: String,
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub result: TTestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricsReport>,
    pub ttests: Vec<PairTest>,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.per_image.iter().all(|m| m.is_finite()))
            && self
                .ttests
                .iter()
                .all(|t| t.result.p.is_finite() && t.result.mean_diff.is_finite())
    }

    pub fn row(&self, method: &str, noise: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.method == method && r.noise == noise)
    }

    /// Best Gaussian-blur row by mean PSNR at one noise setting.
    pub fn best_blur(&self, noise: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .filter(|r| r.noise == noise && r.method.starts_with("gaussian_blur"))
            .max_by(|a, b| a.aggregate.psnr.total_cmp(&b.aggregate.psnr))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub noises: Vec<EvalNoise>,
    pub methods: Vec<Method>,
    pub batches: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            noises: vec![EvalNoise {
                kind: NoiseKind::Gaussian,
                level: 0.15,
            }],
            methods: Method::default_set(),
            batches: 8,
            seed: 2024,
        }
    }
}

/// Disjoint seeded subsets of `0..n` of near-equal size.
pub fn batch_partition(n: usize, batches: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batches < 2 {
        return Err(MindError::Parameter(format!("need at least 2 batches, got {batches}")));
    }
    if n < batches {
        return Err(MindError::Dataset(format!("{n} images cannot fill {batches} batches")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..batches)
        .map(|b| idx[b * n / batches..(b + 1) * n / batches].to_vec())
        .collect())
}

/// Largest top-left crop whose sides are multiples of `m`.
pub fn crop_to_multiple(img: &Image, m: usize) -> Result<Image> {
    let (h, w) = (img.height() / m * m, img.width() / m * m);
    if h == 0 || w == 0 {
        return Err(MindError::Dimension(format!(
            "image {}x{} is smaller than the required multiple {m}",
            img.height(),
            img.width()
        )));
    }
    img.crop(0, 0, h, w)
}

fn per_image_seed(seed: u64, noise: usize, image: usize) -> u64 {
    seed ^ (noise as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (image as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Scores each method on every (noise, image) pair and runs paired t-tests
/// on per-batch PSNR and SSIM for every pair of methods.
pub fn evaluate_run(images: &[Image], model: Option<&MindModel>, opts: &EvalOptions) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(MindError::Dataset("no evaluation images".into()));
    }
    if opts.methods.is_empty() || opts.noises.is_empty() {
        return Err(MindError::Parameter("need at least one method and one noise setting".into()));
    }
    let multiple = model.map_or(8, |m| lcm(8, m.config.required_multiple()));
    let images: Vec<Image> = images.iter().map(|i| crop_to_multiple(i, multiple)).collect::<Result<_>>()?;
    let parts = batch_partition(images.len(), opts.batches, opts.seed)?;
    let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
    let mut rows = Vec::new();
    let mut ttests = Vec::new();
    for (ni, noise) in opts.noises.iter().enumerate() {
        let noisy: Vec<Image> = images
            .iter()
            .enumerate()
            .map(|(j, img)| degrade(img, &noise.spec(per_image_seed(opts.seed, ni, j))))
            .collect::<Result<_>>()?;
        let mut block = Vec::new();
        for method in &opts.methods {
            let per_image: Vec<ImageMetrics> = images
                .iter()
                .zip(&noisy)
                .map(|(clean, y)| ImageMetrics::compute(&method.apply(y, model)?, clean, &phi))
                .collect::<Result<_>>()?;
            let per_batch: Vec<ImageMetrics> = parts
                .iter()
                .map(|b| ImageMetrics::mean(&b.iter().map(|&i| per_image[i]).collect::<Vec<_>>()))
                .collect();
            block.push(MetricsReport {
                method: method.label(),
                noise: noise.label(),
                seed: opts.seed,
                aggregate: ImageMetrics::mean(&per_image),
                per_image,
                per_batch,
            });
        }
        for i in 0..block.len() {
            for j in i..block.len() {
                for (metric, f) in [("psnr", (|m: &ImageMetrics| m.psnr) as fn(&ImageMetrics) -> f64), ("ssim", |m| m.ssim)] {
                    let a: Vec<f64> = block[i].per_batch.iter().map(f).collect();
                    let b: Vec<f64> = block[j].per_batch.iter().map(f).collect();
                    ttests.push(PairTest {
                        noise: noise.label(),
                        metric: metric.into(),
                        method_a: block[i].method.clone(),
                        method_b: block[j].method.clone(),
                        result: paired_t_test(&a, &b)?,
                    });
                }
            }
        }
        rows.extend(block);
    }
    Ok(EvalReport { rows, ttests })
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// σ samples `start, start + step, …` up to `stop` inclusive.
pub fn sigma_samples(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() || start < 0.0 {
        return Err(MindError::Parameter(format!(
            "empty sigma range {start}..={stop} step {step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

pub const LAMBDA_CSV_HEADER: &str = "sigma,lambda_mse,lambda_ssim,lambda_edge,lambda_perc,lambda_adv";

/// λ(σ) table; σ in percent units.
pub fn emit_lambda_curve(cfg: &LossWeightsConfig, start: f64, stop: f64, step: f64) -> Result<String> {
    let mut out = String::from(LAMBDA_CSV_HEADER);
    out.push('\n');
    for s in sigma_samples(start, stop, step)? {
        let l = lambda_weights(s, cfg)?;
        write!(out, "{s:?}").unwrap();
        for v in l {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `spatial.pfm`, `alpha.pfm` (a 1×C row) and `sigma.pfm`; the first
/// two only when the model has its attention block.
pub fn emit_attention_maps(model: &MindModel, img: &Image, outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    write_attention_maps(&mind_forward(img, model)?, outdir)
}

pub fn write_attention_maps(out: &Inference, outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = outdir.as_ref();
    let mut written = Vec::new();
    let sigma = dir.join("sigma.pfm");
    write_pfm_map(out.sigma.height(), out.sigma.width(), out.sigma.values(), &sigma)?;
    written.push(sigma);
    if let (Some(sp), Some(alpha)) = (&out.diagnostics.spatial, &out.diagnostics.alpha) {
        let p = dir.join("spatial.pfm");
        write_pfm_map(sp.height(), sp.width(), sp.values(), &p)?;
        written.push(p);
        let p = dir.join("alpha.pfm");
        write_pfm_map(1, alpha.len(), alpha, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub noise: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perc_proxy: f64,
    /// Relative to the full model at the training noise setting.
    pub delta_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Human-readable directional comparisons; informational only.
    pub notes: Vec<String>,
}

impl AblationTable {
    pub fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.psnr.is_finite() && r.ssim.is_finite() && r.perc_proxy.is_finite())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,noise,psnr,ssim,perc_proxy,delta_psnr\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.4},{:.5},{:.6},{:+.4}", r.label, r.noise, r.psnr, r.ssim, r.perc_proxy, r.delta_psnr).unwrap();
        }
        s
    }
}

/// Full model, each single-module ablation, and σ-stress rows at 0.05/0.25.
pub const STRESS_LEVELS: [f64; 2] = [0.05, 0.25];

pub fn ablation_flag_set() -> Vec<AblationFlags> {
    let f = AblationFlags::full();
    vec![
        f,
        AblationFlags { use_naab: false, ..f },
        AblationFlags { use_nle: false, ..f },
        AblationFlags { use_multiscale: false, ..f },
        AblationFlags { use_crossmodal: false, ..f },
    ]
}

/// Subdirectory for one ablation run: `full`, `no-naab`, ...
pub fn run_dir_name(flags: AblationFlags) -> String {
    flags
        .label()
        .split(' ')
        .map(|p| p.replacen('-', "no-", 1))
        .collect::<Vec<_>>()
        .join("_")
}

pub struct AblateOptions {
    /// Per-configuration runs go to `<out_dir>/<run_dir_name>` when set.
    pub train: TrainOptions,
    /// Reuse this model for the full row instead of training it.
    pub full_model: Option<MindModel>,
    /// Noise setting of the five main rows; stress rows use Gaussian noise.
    pub noise: EvalNoise,
    pub seed: u64,
}

/// Trains (or reuses) each configuration and scores it on `eval_images`.
pub fn ablate(cfg: &RunConfig, train_images: &[Image], eval_images: &[Image], opts: &AblateOptions) -> Result<AblationTable> {
    let mut models = Vec::new();
    for flags in ablation_flag_set() {
        let model = match (&opts.full_model, flags == AblationFlags::full()) {
            (Some(m), true) => m.clone(),
            _ => {
                let run = RunConfig { flags, ..cfg.clone() };
                log::info!("ablate: training {}", flags.label());
                let mut topts = opts.train.clone();
                topts.out_dir = topts.out_dir.map(|d| d.join(run_dir_name(flags)));
                if let Some(d) = &topts.out_dir {
                    std::fs::create_dir_all(d)?;
                }
                train_on(&run, train_images, &topts)?.checkpoint.model()?
            }
        };
        models.push(model);
    }
    let score = |model: &MindModel, noise: EvalNoise| -> Result<ImageMetrics> {
        let eo = EvalOptions {
            noises: vec![noise],
            methods: vec![Method::Mind],
            batches: 2,
            seed: opts.seed,
        };
        Ok(evaluate_run(eval_images, Some(model), &eo)?.rows[0].aggregate)
    };
    let mut rows = Vec::new();
    let mut full_psnr = 0.0;
    for model in &models {
        let m = score(model, opts.noise)?;
        if model.flags == AblationFlags::full() {
            full_psnr = m.psnr;
        }
        rows.push(AblationRow {
            label: model.flags.label(),
            flags: model.flags,
            noise: opts.noise.label(),
            psnr: m.psnr,
            ssim: m.ssim,
            perc_proxy: m.perc_proxy,
            delta_psnr: 0.0,
        });
    }
    for level in STRESS_LEVELS {
        let noise = EvalNoise {
            kind: NoiseKind::Gaussian,
            level,
        };
        let m = score(&models[0], noise)?;
        rows.push(AblationRow {
            label: format!("full @ sigma={}", (level * 100.0).round()),
            flags: AblationFlags::full(),
            noise: noise.label(),
            psnr: m.psnr,
            ssim: m.ssim,
            perc_proxy: m.perc_proxy,
            delta_psnr: 0.0,
        });
    }
    for r in rows.iter_mut() {
        r.delta_psnr = r.psnr - full_psnr;
    }
    let notes = rows[1..5]
        .iter()
        .map(|r| {
            let dir = if r.delta_psnr < 0.0 { "below" } else { "at or above" };
            format!("{}: {:+.3} dB, {dir} the full model", r.label, r.delta_psnr)
        })
        .collect();
    Ok(AblationTable { rows, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::imagedata::{read_image, synthetic_phantom};
    use crate::objective::DEFAULT_ALPHA;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn psnr_values() {
        let x = Image::filled(16, 16, 0.3).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let a = Image::filled(16, 16, 0.25).unwrap();
        let b = Image::filled(16, 16, 0.375).unwrap();
        // 0.125² is exact in binary
        assert_eq!(psnr(&a, &b).unwrap(), -10.0 * (0.015625f64).log10());
        let y = Image::filled(16, 16, 0.4).unwrap();
        assert!((psnr(&y, &x).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        assert!((rmse(&y, &x).unwrap() - 0.1).abs() < 1e-7);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn psnr_falls_with_noise_level() {
        let x = synthetic_phantom(64, 3);
        for seed in 0..5 {
            let p: Vec<f64> = [0.05, 0.10, 0.25]
                .iter()
                .map(|&s| psnr(&degrade(&x, &NoiseSpec::gaussian(s, seed)).unwrap(), &x).unwrap())
                .collect();
            assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
        }
    }

    #[test]
    fn t_test_closed_form_df2() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        let t = 2.0 / (1.0 / 3f64.sqrt());
        assert!((r.t - t).abs() < 1e-12);
        assert_eq!(r.df, 2);
        let closed = 2.0 * (1.0 - 0.5 * (1.0 + t / (t * t + 2.0).sqrt()));
        assert!((r.p - closed).abs() < 1e-10);
        assert!((r.p - 0.0742).abs() < 1e-4);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [0.3, 0.4, 0.5];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let b = [0.2, 0.3, 0.4];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.p == 0.0 || r.p < 1e-12);
        let shifted = [1.5, 2.5, 3.5];
        let r = paired_t_test(&shifted, &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn t_test_false_positive_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut hits = 0;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            if paired_t_test(&a, &b).unwrap().p < 0.05 {
                hits += 1;
            }
        }
        let rate = hits as f64 / 1000.0;
        assert!((0.03..=0.07).contains(&rate), "{rate}");
    }

    #[test]
    fn lambda_csv() {
        let csv = emit_lambda_curve(&LossWeightsConfig::default(), 0.0, 30.0, 1.0).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), LAMBDA_CSV_HEADER);
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 31);
        assert_eq!(&rows[0][1..], &DEFAULT_ALPHA);
        assert!((rows[10][1] - (-1.5f64).exp()).abs() < 1e-12);
        for w in rows.windows(2) {
            for c in 1..6 {
                assert!(w[1][c] < w[0][c]);
            }
        }
        assert!(emit_lambda_curve(&LossWeightsConfig::default(), 5.0, 1.0, 1.0).is_err());
        assert!(emit_lambda_curve(&LossWeightsConfig::default(), 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let p = batch_partition(50, 8, 3).unwrap();
        let mut all: Vec<usize> = p.concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(p.iter().all(|b| b.len() >= 6));
        assert_eq!(p, batch_partition(50, 8, 3).unwrap());
        assert!(batch_partition(5, 8, 1).is_err());
    }

    fn small_model(flags: AblationFlags) -> MindModel {
        let cfg = ModelConfig {
            base_channels: 8,
            embed_dim: 16,
            key_dim: 16,
            transformer_layers: 1,
            ..ModelConfig::default()
        };
        MindModel::new(cfg, flags, LossWeightsConfig::default(), 1).unwrap()
    }

    #[test]
    fn evaluation_structure() {
        let images: Vec<Image> = (0..8).map(|s| synthetic_phantom(34, s)).collect();
        let model = small_model(AblationFlags::full());
        let opts = EvalOptions {
            noises: vec![EvalNoise::parse("gaussian:0.1").unwrap(), EvalNoise::parse("speckle:0.2").unwrap()],
            methods: vec![Method::Mind, Method::Noisy, Method::Baseline(Baseline::Median { k: 3 })],
            batches: 4,
            seed: 5,
        };
        let r = evaluate_run(&images, Some(&model), &opts).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.all_finite());
        for row in &r.rows {
            assert_eq!(row.per_image.len(), 8);
            let agg = ImageMetrics::mean(&row.per_image);
            assert!((agg.psnr - row.aggregate.psnr).abs() < 1e-9);
        }
        // untrained model is the identity, so it ties the noisy input exactly
        let mind = r.row("mind", "gaussian:0.1").unwrap();
        let noisy = r.row("noisy", "gaussian:0.1").unwrap();
        assert_eq!(mind.per_image, noisy.per_image);
        for t in r.ttests.iter().filter(|t| t.method_a == t.method_b) {
            assert_eq!(t.result.p, 1.0);
        }
    }

    #[test]
    fn attention_maps_from_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(AblationFlags::full());
        let img = degrade(&synthetic_phantom(32, 2), &NoiseSpec::gaussian(0.1, 1)).unwrap();
        let files = emit_attention_maps(&model, &img, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let sp = read_image(dir.path().join("spatial.pfm")).unwrap();
        assert!((sp.height(), sp.width()) == (32, 32));
        let alpha = read_image(dir.path().join("alpha.pfm")).unwrap();
        assert_eq!((alpha.height(), alpha.width()), (1, 8));
        read_image(dir.path().join("sigma.pfm")).unwrap();

        let mut zeroed = model.clone();
        model.config.naab().zero(&mut zeroed.params);
        emit_attention_maps(&zeroed, &img, dir.path()).unwrap();
        let sp = read_image(dir.path().join("spatial.pfm")).unwrap();
        assert!(sp.pixels().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn baselines() {
        let img = synthetic_phantom(20, 1);
        let b = baseline_denoise(&img, Baseline::GaussianBlur { sigma: 1.0 }).unwrap();
        assert_eq!((b.height(), b.width()), (20, 20));
        assert!(baseline_denoise(&img, Baseline::Median { k: 2 }).is_err());
    }
}
