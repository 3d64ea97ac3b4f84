//! Loss terms, the noise-adaptive weights λᵢ(σ) = αᵢ·exp(−βᵢ·σ) and their
//! weighted total.
//!
//! σ enters the weights in percent of the intensity range, so a pixel-unit
//! estimate is multiplied by [`SIGMA_PERCENT`] first.

use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::graph::{Graph, Var};
use crate::imagedata::Image;
use crate::nle::{gradient_magnitude, GradientOperator};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub const TERMS: [&str; 5] = ["mse", "ssim", "edge", "perc", "adv"];
pub const DEFAULT_ALPHA: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.1];
pub const DEFAULT_BETA: f64 = 0.15;
pub const SIGMA_PERCENT: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

pub const PERCEPTUAL_SEED: u64 = 0x5eed_9e7c;
const PERCEPTUAL_CHANNELS: [usize; 4] = [1, 16, 32, 32];
const DISC_CHANNELS: [usize; 3] = [1, 8, 16];
const D_CLAMP: f64 = 1e-7;

/// Decay rates: one shared value or one per term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaDecay {
    Shared(f64),
    PerTerm([f64; 5]),
}

impl BetaDecay {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            BetaDecay::Shared(b) => *b,
            BetaDecay::PerTerm(b) => b[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightsConfig {
    pub alpha: [f64; 5],
    pub beta_decay: BetaDecay,
    pub adversarial_enabled: bool,
}

impl Default for LossWeightsConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta_decay: BetaDecay::Shared(DEFAULT_BETA),
            adversarial_enabled: false,
        }
    }
}

impl LossWeightsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0..5).all(|i| {
            let b = self.beta_decay.get(i);
            self.alpha[i].is_finite() && self.alpha[i] >= 0.0 && b.is_finite() && b >= 0.0
        });
        if !ok {
            return Err(MindError::Config(
                "loss alpha and beta_decay must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

pub fn sigma_to_percent(sigma_pixel: f64) -> f64 {
    sigma_pixel * SIGMA_PERCENT
}

/// λᵢ = αᵢ·exp(−βᵢ·σ) with σ in percent units.
pub fn lambda_weights(sigma_percent: f64, cfg: &LossWeightsConfig) -> Result<[f64; 5]> {
    if !(sigma_percent >= 0.0) || !sigma_percent.is_finite() {
        return Err(MindError::Parameter(format!(
            "noise level must be finite and nonnegative, got {sigma_percent}"
        )));
    }
    let mut l = [0.0; 5];
    for (i, v) in l.iter_mut().enumerate() {
        *v = cfg.alpha[i] * (-cfg.beta_decay.get(i) * sigma_percent).exp();
    }
    Ok(l)
}

/// Per-step record of every term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub ssim_loss: f64,
    pub edge: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub lambdas: [f64; 5],
    pub total: f64,
    /// Pixel units.
    pub sigma_scalar: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 5] {
        [self.mse, self.ssim_loss, self.edge, self.perceptual, self.adversarial]
    }

    pub fn recompute_total(&self) -> f64 {
        self.terms().iter().zip(&self.lambdas).map(|(t, l)| t * l).sum()
    }
}

/// Normalized 2-D Gaussian, `[1, 1, k, k]`.
pub fn gaussian_window<T: Real>(k: usize, sigma: f64) -> Tensor<T> {
    let r = (k / 2) as f64;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let data = (0..k * k).map(|i| T::lit(g[i / k] * g[i % k])).collect();
    Tensor::from_vec(&[1, 1, k, k], data)
}

pub fn mse_var<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a.sub(b).square().mean()
}

/// Mean SSIM over the valid region of the 11×11 Gaussian window.
pub fn ssim_var<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let g = a.graph();
    let win = g.constant(gaussian_window(SSIM_WINDOW, SSIM_SIGMA));
    let blur = |x: Var<'g, T>| x.conv2d(win, None, 1, 0);
    let (mu_a, mu_b) = (blur(a), blur(b));
    let (mu_aa, mu_bb, mu_ab) = (mu_a.square(), mu_b.square(), mu_a.mul(mu_b));
    let s_aa = blur(a.square()).sub(mu_aa);
    let s_bb = blur(b.square()).sub(mu_bb);
    let s_ab = blur(a.mul(b)).sub(mu_ab);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let num = mu_ab
        .mul_scalar(T::lit(2.0))
        .add_scalar(c1)
        .mul(s_ab.mul_scalar(T::lit(2.0)).add_scalar(c2));
    let den = mu_aa.add(mu_bb).add_scalar(c1).mul(s_aa.add(s_bb).add_scalar(c2));
    num.div(den).mean()
}

pub fn ssim_loss_var<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    ssim_var(a, b).neg().add_scalar(T::one())
}

/// mean |∇a − ∇b| with the normalized Sobel magnitude.
pub fn edge_var<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let op = GradientOperator::Sobel;
    gradient_magnitude(a, op).sub(gradient_magnitude(b, op)).abs().mean()
}

/// Frozen three-layer stride-2 convolution stack standing in for a
/// pretrained feature network.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T: Real> {
    pub seed: u64,
    weights: ParamStore<T>,
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let mut weights = ParamStore::new();
        for l in 0..3 {
            let (ci, co) = (PERCEPTUAL_CHANNELS[l], PERCEPTUAL_CHANNELS[l + 1]);
            weights.insert(format!("phi.{l}.w"), init.lecun(&[co, ci, 3, 3], 9 * ci));
            weights.insert(format!("phi.{l}.b"), Tensor::zeros(&[co]));
        }
        Self { seed, weights }
    }

    pub fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        self.weights.bind_frozen(g)
    }

    /// Final-layer features of a `[1, H, W]` var.
    pub fn features<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for l in 0..3 {
            h = h
                .reflect_pad(1)
                .conv2d(p.get(&format!("phi.{l}.w")), Some(p.get(&format!("phi.{l}.b"))), 2, 0);
            if l < 2 {
                h = h.relu();
            }
        }
        h
    }

    pub fn loss_var<'g>(&self, p: &Bound<'g, T>, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        mse_var(self.features(p, a), self.features(p, b))
    }
}

/// Small convolutional real/fake classifier.
#[derive(Clone, Debug)]
pub struct Discriminator;

impl Discriminator {
    pub fn init<T: Real>(store: &mut ParamStore<T>, init: &mut Init) {
        for l in 0..2 {
            let (ci, co) = (DISC_CHANNELS[l], DISC_CHANNELS[l + 1]);
            store.insert(format!("disc.{l}.w"), init.he(&[co, ci, 3, 3], 9 * ci));
            store.insert(format!("disc.{l}.b"), Tensor::zeros(&[co]));
        }
        let c = DISC_CHANNELS[2];
        store.insert("disc.head.w", init.lecun(&[1, c], c));
        store.insert("disc.head.b", Tensor::zeros(&[1]));
    }

    pub fn new_weights<T: Real>(seed: u64) -> ParamStore<T> {
        let mut s = ParamStore::new();
        Self::init(&mut s, &mut Init::new(seed));
        s
    }

    /// Confidence in (0, 1) that `x` is clean, as a `[1]` var.
    pub fn forward<'g, T: Real>(p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for l in 0..2 {
            h = h
                .reflect_pad(1)
                .conv2d(p.get(&format!("disc.{l}.w")), Some(p.get(&format!("disc.{l}.b"))), 2, 0)
                .relu();
        }
        let c = DISC_CHANNELS[2];
        let pooled = h.mean_inner().reshape(&[c, 1]);
        p.get("disc.head.w")
            .matmul(pooled)
            .reshape(&[1])
            .add(p.get("disc.head.b"))
            .sigmoid()
    }
}

/// −ln D with D clamped to [1e-7, 1 − 1e-7].
pub fn adversarial_from_confidence<'g, T: Real>(d: Var<'g, T>) -> Var<'g, T> {
    d.clamp(T::lit(D_CLAMP), T::lit(1.0 - D_CLAMP)).ln().neg().sum()
}

/// Standard discriminator objective −ln D(x) − ln(1 − D(x̂)).
pub fn discriminator_loss_var<'g, T: Real>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
    let lo = T::lit(D_CLAMP);
    let hi = T::lit(1.0 - D_CLAMP);
    let real = d_real.clamp(lo, hi).ln().neg();
    let fake = d_fake.neg().add_scalar(T::one()).clamp(lo, hi).ln().neg();
    real.add(fake).sum()
}

/// The five term vars plus their weighted sum.
pub struct LossVars<'g, T: Real> {
    pub terms: [Var<'g, T>; 5],
    pub total: Var<'g, T>,
    pub lambdas: [f64; 5],
}

/// Weighted total Σ λᵢ(σ)·Lᵢ on `[1, H, W]` vars. `disc` supplies bound
/// discriminator weights when the adversarial term is enabled.
pub fn total_loss_var<'g, T: Real>(
    xhat: Var<'g, T>,
    x: Var<'g, T>,
    sigma_pixel: f64,
    cfg: &LossWeightsConfig,
    phi: &PerceptualExtractor<T>,
    phi_bound: &Bound<'g, T>,
    disc: Option<&Bound<'g, T>>,
) -> Result<LossVars<'g, T>> {
    let lambdas = lambda_weights(sigma_to_percent(sigma_pixel), cfg)?;
    let g = xhat.graph();
    let adv = match (cfg.adversarial_enabled, disc) {
        (true, Some(d)) => adversarial_from_confidence(Discriminator::forward(d, xhat)),
        (true, None) => {
            return Err(MindError::Config("adversarial term enabled without a discriminator".into()))
        }
        (false, _) => g.constant(Tensor::scalar(T::zero())),
    };
    let terms = [
        mse_var(xhat, x),
        ssim_loss_var(xhat, x),
        edge_var(xhat, x),
        phi.loss_var(phi_bound, xhat, x),
        adv,
    ];
    let mut total = terms[0].mul_scalar(T::lit(lambdas[0]));
    for i in 1..5 {
        total = total.add(terms[i].mul_scalar(T::lit(lambdas[i])));
    }
    Ok(LossVars {
        terms,
        total,
        lambdas,
    })
}

impl<'g, T: Real> LossVars<'g, T> {
    /// Report whose total is recomputed in f64 from the recorded terms.
    pub fn report(&self, sigma_pixel: f64) -> LossReport {
        let t: Vec<f64> = self.terms.iter().map(|v| v.item().to_f64().unwrap()).collect();
        let mut r = LossReport {
            mse: t[0],
            ssim_loss: t[1],
            edge: t[2],
            perceptual: t[3],
            adversarial: t[4],
            lambdas: self.lambdas,
            total: 0.0,
            sigma_scalar: sigma_pixel,
        };
        r.total = r.recompute_total();
        r
    }
}

fn pair_check(a: &Image, b: &Image) -> Result<()> {
    a.check_same_dims(b)
}

fn on_pair<F>(a: &Image, b: &Image, f: F) -> f64
where
    F: for<'g> Fn(Var<'g, f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::<f64>::new();
    f(g.constant(a.to_tensor()), g.constant(b.to_tensor())).item()
}

pub fn loss_mse(xhat: &Image, x: &Image) -> Result<f64> {
    pair_check(xhat, x)?;
    Ok(on_pair(xhat, x, mse_var))
}

pub fn check_ssim_size(img: &Image) -> Result<()> {
    if img.height() < SSIM_WINDOW || img.width() < SSIM_WINDOW {
        return Err(MindError::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn ssim(xhat: &Image, x: &Image) -> Result<f64> {
    pair_check(xhat, x)?;
    check_ssim_size(x)?;
    Ok(on_pair(xhat, x, ssim_var))
}

pub fn loss_ssim(xhat: &Image, x: &Image) -> Result<f64> {
    Ok(1.0 - ssim(xhat, x)?)
}

pub fn loss_edge(xhat: &Image, x: &Image) -> Result<f64> {
    pair_check(xhat, x)?;
    x.require_min_side("loss_edge")?;
    Ok(on_pair(xhat, x, edge_var))
}

pub fn check_perceptual_size(img: &Image) -> Result<()> {
    if img.height() % 8 != 0 || img.width() % 8 != 0 {
        return Err(MindError::Dimension(format!(
            "perceptual features need sides divisible by 8, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn loss_perceptual(xhat: &Image, x: &Image, phi: &PerceptualExtractor<f64>) -> Result<f64> {
    pair_check(xhat, x)?;
    check_perceptual_size(x)?;
    let g = Graph::<f64>::new();
    let p = phi.bind(&g);
    Ok(phi
        .loss_var(&p, g.constant(xhat.to_tensor()), g.constant(x.to_tensor()))
        .item())
}

pub fn loss_adversarial(xhat: &Image, disc: &ParamStore<f64>, cfg: &LossWeightsConfig) -> Result<f64> {
    if !cfg.adversarial_enabled {
        return Err(MindError::Config("adversarial term is disabled".into()));
    }
    let g = Graph::<f64>::new();
    let p = disc.bind_frozen(&g);
    Ok(adversarial_from_confidence(Discriminator::forward(&p, g.constant(xhat.to_tensor()))).item())
}

/// Every term on concrete images, double precision.
pub fn total_loss(
    xhat: &Image,
    x: &Image,
    sigma_pixel: f64,
    cfg: &LossWeightsConfig,
    phi: &PerceptualExtractor<f64>,
    disc: Option<&ParamStore<f64>>,
) -> Result<LossReport> {
    pair_check(xhat, x)?;
    check_ssim_size(x)?;
    check_perceptual_size(x)?;
    let g = Graph::<f64>::new();
    let pb = phi.bind(&g);
    let db = disc.map(|d| d.bind_frozen(&g));
    let vars = total_loss_var(
        g.constant(xhat.to_tensor()),
        g.constant(x.to_tensor()),
        sigma_pixel,
        cfg,
        phi,
        &pb,
        db.as_ref(),
    )?;
    Ok(vars.report(sigma_pixel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::synthetic_phantom;
    use crate::trainer::gradcheck::check_scalar_fn;
    use proptest::prelude::*;

    fn offset(img: &Image, d: f32) -> Image {
        Image::new(img.height(), img.width(), img.pixels().iter().map(|p| p + d).collect()).unwrap()
    }

    #[test]
    fn lambda_at_zero_is_alpha() {
        let cfg = LossWeightsConfig::default();
        assert_eq!(lambda_weights(0.0, &cfg).unwrap(), [1.0, 0.8, 0.6, 0.4, 0.1]);
        let l = lambda_weights(10.0, &cfg).unwrap();
        assert!((l[0] - 0.22313016014842982).abs() < 1e-12);
        let (lo, hi) = (lambda_weights(5.0, &cfg).unwrap(), lambda_weights(25.0, &cfg).unwrap());
        assert!(lo.iter().zip(&hi).all(|(a, b)| b < a));
        assert!(lambda_weights(-1.0, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn lambda_ratio_and_ordering(s1 in 0.0f64..50.0, s2 in 0.0f64..50.0) {
            let cfg = LossWeightsConfig::default();
            let a = lambda_weights(s1, &cfg).unwrap();
            let b = lambda_weights(s2, &cfg).unwrap();
            for i in 0..5 {
                let ratio = b[i] / a[i];
                prop_assert!((ratio - (-DEFAULT_BETA * (s2 - s1)).exp()).abs() < 1e-12 * ratio.max(1.0));
                for j in 0..5 {
                    if cfg.alpha[i] > cfg.alpha[j] {
                        prop_assert!(a[i] > a[j]);
                    }
                }
            }
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..1000, d in -0.3f32..0.3) {
            let x = synthetic_phantom(16, seed);
            let y = offset(&x, d).clamped();
            prop_assert!(loss_mse(&y, &x).unwrap() >= 0.0);
            prop_assert!(loss_ssim(&y, &x).unwrap() >= -1e-12);
            prop_assert!(loss_edge(&y, &x).unwrap() >= 0.0);
        }
    }

    #[test]
    fn per_term_beta_from_json() {
        let cfg: LossWeightsConfig = serde_json::from_str(
            r#"{"alpha":[1,1,1,1,1],"beta_decay":[0,0.1,0.2,0.3,0.4],"adversarial_enabled":false}"#,
        )
        .unwrap();
        let l = lambda_weights(10.0, &cfg).unwrap();
        assert_eq!(l[0], 1.0);
        assert!((l[4] - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mse_values() {
        let x = Image::filled(8, 8, 0.25).unwrap();
        assert_eq!(loss_mse(&x, &x).unwrap(), 0.0);
        let y = Image::filled(8, 8, 0.5).unwrap();
        assert_eq!(loss_mse(&y, &x).unwrap(), 0.0625);
        let z = Image::filled(8, 8, 0.35).unwrap();
        assert!((loss_mse(&z, &x).unwrap() - 0.01).abs() < 1e-8);
    }

    #[test]
    fn ssim_constant_pair_hand_value() {
        let a = Image::filled(16, 16, 0.4).unwrap();
        let b = Image::filled(16, 16, 0.5).unwrap();
        let expect = (2.0 * 0.2 + 1e-4) / (0.41 + 1e-4);
        let l = loss_ssim(&a, &b).unwrap();
        assert!((1.0 - l - expect).abs() < 1e-6, "{l}");
        assert_eq!(loss_ssim(&a, &a).unwrap(), 0.0);
        let x = synthetic_phantom(24, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::filled(8, 8, 0.1).unwrap(), &Image::filled(8, 8, 0.1).unwrap()).is_err());
    }

    #[test]
    fn ssim_symmetric() {
        let a = synthetic_phantom(20, 1);
        let b = synthetic_phantom(20, 2);
        let d = loss_ssim(&a, &b).unwrap() - loss_ssim(&b, &a).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn edge_ignores_constant_offset() {
        let x = synthetic_phantom(16, 5).map_pixels(|p| p * 0.5);
        let y = offset(&x, 0.2);
        assert!(loss_edge(&y, &x).unwrap() < 1e-6);
        assert_eq!(loss_edge(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_frozen_and_zero_on_identity() {
        let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
        let x = synthetic_phantom(16, 5);
        let y = synthetic_phantom(16, 6);
        assert_eq!(loss_perceptual(&x, &x, &phi).unwrap(), 0.0);
        let a = loss_perceptual(&y, &x, &phi).unwrap();
        let b = loss_perceptual(&y, &x, &PerceptualExtractor::new(PERCEPTUAL_SEED)).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
        assert!(loss_perceptual(&Image::filled(12, 12, 0.).unwrap(), &Image::filled(12, 12, 0.).unwrap(), &phi).is_err());
    }

    #[test]
    fn adversarial_values() {
        let g = Graph::<f64>::new();
        let half = g.constant(Tensor::from_vec(&[1], vec![0.5]));
        assert!((adversarial_from_confidence(half).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.1, 0.5, 0.9, 0.999, 1.0] {
            let v = adversarial_from_confidence(g.constant(Tensor::from_vec(&[1], vec![d]))).item();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-6);
        let disc = Discriminator::new_weights::<f64>(1);
        let x = synthetic_phantom(16, 1);
        let cfg = LossWeightsConfig::default();
        assert!(matches!(loss_adversarial(&x, &disc, &cfg), Err(MindError::Config(_))));
        let on = LossWeightsConfig {
            adversarial_enabled: true,
            ..cfg
        };
        assert!(loss_adversarial(&x, &disc, &on).unwrap() > 0.0);
    }

    #[test]
    fn total_vanishes_on_identity_and_is_consistent() {
        let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
        let cfg = LossWeightsConfig::default();
        let x = synthetic_phantom(16, 9);
        let r = total_loss(&x, &x, 0.1, &cfg, &phi, None).unwrap();
        assert_eq!(r.total, 0.0);
        let y = synthetic_phantom(16, 10);
        let r = total_loss(&y, &x, 0.0, &cfg, &phi, None).unwrap();
        let manual = r.mse + 0.8 * r.ssim_loss + 0.6 * r.edge + 0.4 * r.perceptual;
        assert!((r.total - manual).abs() < 1e-12);
        assert!((r.total - r.recompute_total()).abs() < 1e-9);
        assert_eq!(r.adversarial, 0.0);
    }

    fn image_inputs(seed: u64, size: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let x = synthetic_phantom(size, seed);
        let y = synthetic_phantom(size, seed + 1).map_pixels(|p| 0.1 + 0.8 * p);
        s.insert("xhat", y.to_tensor());
        s.insert("x", x.to_tensor());
        s
    }

    #[test]
    fn mse_gradient_is_exact() {
        let inputs = image_inputs(1, 8);
        let r = check_scalar_fn("loss_mse", &inputs, |p| mse_var(p.get("xhat"), p.get("x")), 1e-3, None);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn ssim_perceptual_total_gradients() {
        let inputs = image_inputs(2, 16);
        let r = check_scalar_fn("loss_ssim", &inputs, |p| ssim_loss_var(p.get("xhat"), p.get("x")), 1e-3, None);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
        let r = check_scalar_fn(
            "loss_perceptual",
            &inputs,
            |p| {
                let pb = phi.bind(p.graph());
                phi.loss_var(&pb, p.get("xhat"), p.get("x"))
            },
            1e-3,
            None,
        );
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
