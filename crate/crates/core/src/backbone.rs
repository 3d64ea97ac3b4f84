//! The denoising network: residual pyramid encoder-decoder, three-modality
//! token fusion with a transformer cascade, the noise estimator and mapper,
//! NAAB, and a residual reconstruction head.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::graph::{index, Graph, Var};
use crate::imagedata::Image;
use crate::naab::{naab_forward, NaabWeights};
use crate::nle::{gradient_magnitude, sigma_map_var, GradientOperator, MapperWeights, SigmaMap};
use crate::objective::{lambda_weights, sigma_to_percent, LossWeightsConfig};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

const MODALITIES: usize = 3;
const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 2;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub patch: usize,
    pub transformer_layers: usize,
    pub r: usize,
    pub sigma_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 32,
            embed_dim: 64,
            key_dim: 64,
            patch: 4,
            transformer_layers: 2,
            r: 4,
            sigma_window: crate::nle::DEFAULT_WINDOW,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MindError::Config(m));
        if self.scales == 0 || self.base_channels == 0 || self.patch == 0 || self.key_dim == 0 {
            return bad("scales, base_channels, patch and key_dim must be positive".into());
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if self.r == 0 || self.base_channels % self.r != 0 {
            return bad(format!("r = {} must divide base_channels = {}", self.r, self.base_channels));
        }
        if self.sigma_window < 3 || self.sigma_window % 2 == 0 {
            return bad(format!("sigma_window must be odd and >= 3, got {}", self.sigma_window));
        }
        Ok(())
    }

    /// Side lengths must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        let a = 1usize << (self.scales - 1);
        let b = self.patch;
        let gcd = |mut x: usize, mut y: usize| {
            while y != 0 {
                (x, y) = (y, x % y);
            }
            x
        };
        a / gcd(a, b) * b
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(MindError::Dimension(format!(
                "image sides must be multiples of {m}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Token count for an `h`×`w` input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        MODALITIES * (h / self.patch) * (w / self.patch)
    }

    pub fn naab(&self) -> NaabWeights {
        NaabWeights::new("naab", self.base_channels, self.r).expect("validated config")
    }

    pub fn mapper(&self) -> MapperWeights {
        MapperWeights::new("nle", self.base_channels)
    }

    /// Largest usable estimator window for an `h`×`w` input.
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        let side = h.min(w);
        let cap = if side % 2 == 1 { side } else { side - 1 };
        self.sigma_window.min(cap).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_naab: bool,
    pub use_nle: bool,
    pub use_multiscale: bool,
    pub use_crossmodal: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_naab: true,
            use_nle: true,
            use_multiscale: true,
            use_crossmodal: true,
        }
    }

    /// All 16 combinations, bit i of the index switching flag i on.
    pub fn all() -> Vec<AblationFlags> {
        (0..16u8)
            .map(|b| AblationFlags {
                use_naab: b & 1 != 0,
                use_nle: b & 2 != 0,
                use_multiscale: b & 4 != 0,
                use_crossmodal: b & 8 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let off: Vec<&str> = [
            (self.use_naab, "naab"),
            (self.use_nle, "nle"),
            (self.use_multiscale, "multiscale"),
            (self.use_crossmodal, "crossmodal"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.iter().map(|n| format!("-{n}")).collect::<Vec<_>>().join(" ")
        }
    }
}

fn conv_init<T: Real>(s: &mut ParamStore<T>, init: &mut Init, name: &str, cout: usize, cin: usize, gain: f64) {
    let fan = 9 * cin;
    s.insert(format!("{name}.w"), init.normal(&[cout, cin, 3, 3], gain * (2.0 / fan as f64).sqrt()));
    s.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn zero_conv<T: Real>(s: &mut ParamStore<T>, name: &str, cout: usize, cin: usize) {
    s.insert(format!("{name}.w"), Tensor::zeros(&[cout, cin, 3, 3]));
    s.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Freshly initialized weights: He-scaled convolutions, small residual
/// branches, and zero coarse/reconstruction heads and mapper heads.
pub fn init_weights<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let mut init = Init::new(seed);
    let c = cfg.base_channels;
    conv_init(&mut s, &mut init, "enc.in", c, 1, 1.0);
    for k in 0..cfg.scales {
        conv_init(&mut s, &mut init, &format!("enc.{k}.res1"), c, c, 1.0);
        conv_init(&mut s, &mut init, &format!("enc.{k}.res2"), c, c, 0.2);
        if k + 1 < cfg.scales {
            conv_init(&mut s, &mut init, &format!("enc.{k}.down"), c, c, 1.0);
            conv_init(&mut s, &mut init, &format!("dec.{k}.up"), c, c, 1.0);
            conv_init(&mut s, &mut init, &format!("dec.{k}.res1"), c, c, 1.0);
            conv_init(&mut s, &mut init, &format!("dec.{k}.res2"), c, c, 0.2);
        }
    }
    zero_conv(&mut s, "coarse", 1, c);
    zero_conv(&mut s, "recon", 1, c);

    let (d, dk, p) = (cfg.embed_dim, cfg.key_dim, cfg.patch);
    s.insert("fuse.embed.w", init.lecun(&[p * p, d], p * p));
    s.insert("fuse.embed.b", Tensor::zeros(&[d]));
    s.insert("fuse.tag", init.normal(&[MODALITIES, d], 0.02));
    s.insert("fuse.out.w", init.lecun(&[d, c * p * p], d));
    s.insert("fuse.out.b", Tensor::zeros(&[c * p * p]));
    for l in 0..cfg.transformer_layers {
        let n = |leaf: &str| format!("tf.{l}.{leaf}");
        s.insert(n("wq"), init.lecun(&[d, dk], d));
        s.insert(n("wk"), init.lecun(&[d, dk], d));
        s.insert(n("wv"), init.lecun(&[d, dk], d));
        s.insert(n("wo"), init.lecun(&[dk, d], dk));
        s.insert(n("ln1.g"), Tensor::full(&[d], T::one()));
        s.insert(n("ln1.b"), Tensor::zeros(&[d]));
        s.insert(n("ffn.w1"), init.he(&[d, FFN_MULT * d], d));
        s.insert(n("ffn.b1"), Tensor::zeros(&[FFN_MULT * d]));
        s.insert(n("ffn.w2"), init.lecun(&[FFN_MULT * d, d], FFN_MULT * d));
        s.insert(n("ffn.b2"), Tensor::zeros(&[d]));
        s.insert(n("ln2.g"), Tensor::full(&[d], T::one()));
        s.insert(n("ln2.b"), Tensor::zeros(&[d]));
    }
    cfg.mapper().init(&mut s, &mut init);
    cfg.naab().init(&mut s, &mut init);
    s
}

/// Errors unless `store` holds exactly the tensors `cfg` expects.
pub fn check_weights<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    cfg.validate()?;
    let expect: BTreeMap<String, Vec<usize>> = init_weights::<f32>(cfg, 0)
        .iter()
        .map(|(k, v)| (k.clone(), v.shape().to_vec()))
        .collect();
    for (name, shape) in &expect {
        match store.get(name) {
            None => return Err(MindError::Config(format!("checkpoint lacks parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(MindError::Config(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = store.names().find(|n| !expect.contains_key(*n)) {
        return Err(MindError::Config(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// 3×3 convolution with reflect padding.
fn conv3<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>, stride: usize) -> Var<'g, T> {
    x.reflect_pad(1).conv2d(
        p.get(&format!("{name}.w")),
        Some(p.get(&format!("{name}.b"))),
        stride,
        0,
    )
}

fn resblock<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    let h = conv3(p, &format!("{name}.res1"), x, 1).relu();
    x.add(conv3(p, &format!("{name}.res2"), h, 1))
}

/// Decoder features `[C, H, W]` and the coarse estimate `[1, H, W]` of a
/// `[1, H, W]` input. Without `multiscale` the same layers run at stride 1.
pub fn encode_decode_var<'g, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'g, T>,
    noisy: Var<'g, T>,
    multiscale: bool,
) -> (Var<'g, T>, Var<'g, T>) {
    let stride = if multiscale { 2 } else { 1 };
    let mut x = conv3(p, "enc.in", noisy, 1).relu();
    let mut skips = Vec::with_capacity(cfg.scales);
    for k in 0..cfg.scales {
        x = resblock(p, &format!("enc.{k}"), x);
        if k + 1 < cfg.scales {
            skips.push(x);
            x = conv3(p, &format!("enc.{k}.down"), x, stride).relu();
        }
    }
    for k in (0..cfg.scales.saturating_sub(1)).rev() {
        let up = if multiscale { x.upsample2x() } else { x };
        x = conv3(p, &format!("dec.{k}.up"), up, 1).relu().add(skips[k]);
        x = resblock(p, &format!("dec.{k}"), x);
    }
    let coarse = clamp_unit(noisy.sub(conv3(p, "coarse", x, 1)));
    (x, coarse)
}

fn clamp_unit<'g, T: Real>(v: Var<'g, T>) -> Var<'g, T> {
    v.clamp(T::zero(), T::one())
}

/// Fixed 2-D sinusoidal positions, `[(h/p)·(w/p), D]`: the first half of
/// each row encodes the patch row, the second half the patch column.
pub fn positional_table<T: Real>(ph: usize, pw: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = Vec::with_capacity(ph * pw * d);
    for ty in 0..ph {
        for tx in 0..pw {
            for pos in [ty, tx] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    data.push(T::lit(a.sin()));
                    data.push(T::lit(a.cos()));
                }
            }
        }
    }
    Tensor::from_vec(&[ph * pw, d], data)
}

fn row_block<'g, T: Real>(x: Var<'g, T>, start: usize, rows: usize, cols: usize) -> Var<'g, T> {
    let idx: Arc<[usize]> = (start * cols..(start + rows) * cols).collect();
    x.gather(idx, &[rows, cols])
}

/// Shared patch embedding of (noisy, coarse, grad) into `[L, D]` tokens with
/// per-modality tags and sinusoidal positions. `positions = false` drops the
/// positional term.
pub fn fuse_modalities_var<'g, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'g, T>,
    modalities: [Var<'g, T>; 3],
    positions: bool,
) -> Var<'g, T> {
    let s = modalities[0].shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (pp, d) = (cfg.patch, cfg.embed_dim);
    let (idx, shape) = index::patchify(h, w, pp);
    let idx: Arc<[usize]> = idx.into();
    let n_tok = shape[0];
    let pos = p.constant(positional_table(h / pp, w / pp, d));
    let tags = p.get("fuse.tag");
    let blocks: Vec<Var<'g, T>> = modalities
        .iter()
        .enumerate()
        .map(|(m, img)| {
            let patches = img.reshape(&[h * w]).gather(idx.clone(), &shape);
            let mut t = patches
                .matmul(p.get("fuse.embed.w"))
                .add_inner(p.get("fuse.embed.b"))
                .add_inner(row_block(tags, m, 1, d).reshape(&[d]));
            if positions {
                t = t.add(pos);
            }
            debug_assert_eq!(t.shape(), vec![n_tok, d]);
            t
        })
        .collect();
    Var::concat(&blocks)
}

/// One post-norm transformer layer. Returns the new tokens and the `[L, L]`
/// attention matrix.
pub fn self_attention_var<'g, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'g, T>,
    layer: usize,
    z: Var<'g, T>,
) -> (Var<'g, T>, Var<'g, T>) {
    let n = |leaf: &str| p.get(&format!("tf.{layer}.{leaf}"));
    let q = z.matmul(n("wq"));
    let k = z.matmul(n("wk"));
    let v = z.matmul(n("wv"));
    let scale = T::lit(1.0 / (cfg.key_dim as f64).sqrt());
    let attn = q.matmul_t(k, false, true).mul_scalar(scale).softmax_rows();
    let o = attn.matmul(v).matmul(n("wo"));
    let eps = T::lit(LN_EPS);
    let z1 = z
        .add(o)
        .layer_norm_rows(eps)
        .mul_inner(n("ln1.g"))
        .add_inner(n("ln1.b"));
    let f = z1
        .matmul(n("ffn.w1"))
        .add_inner(n("ffn.b1"))
        .relu()
        .matmul(n("ffn.w2"))
        .add_inner(n("ffn.b2"));
    let z2 = z1
        .add(f)
        .layer_norm_rows(eps)
        .mul_inner(n("ln2.g"))
        .add_inner(n("ln2.b"));
    (z2, attn)
}

/// Averages the three modality blocks of `[L, D]` tokens, projects each to
/// C·p² and lays the result out as a `[C, H, W]` map.
pub fn unpatch_var<'g, T: Real>(cfg: &ModelConfig, p: &Bound<'g, T>, z: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let (pp, d, c) = (cfg.patch, cfg.embed_dim, cfg.base_channels);
    let n_tok = (h / pp) * (w / pp);
    let mean = row_block(z, 0, n_tok, d)
        .add(row_block(z, n_tok, n_tok, d))
        .add(row_block(z, 2 * n_tok, n_tok, d))
        .mul_scalar(T::lit(1.0 / MODALITIES as f64));
    let proj = mean.matmul(p.get("fuse.out.w")).add_inner(p.get("fuse.out.b"));
    let (idx, shape) = index::unpatchify(c, h, w, pp);
    proj.gather(idx.into(), &shape)
}

/// Everything one forward pass produces.
pub struct ForwardVars<'g, T: Real> {
    pub denoised: Var<'g, T>,
    pub coarse: Var<'g, T>,
    /// `[1, H, W]`; zeros when the estimator is ablated.
    pub sigma: Var<'g, T>,
    pub gamma: Var<'g, T>,
    pub beta: Var<'g, T>,
    /// Features entering the attention block.
    pub features: Var<'g, T>,
    pub alpha: Option<Var<'g, T>>,
    pub spatial: Option<Var<'g, T>>,
    pub attention: Vec<Var<'g, T>>,
}

impl<'g, T: Real> ForwardVars<'g, T> {
    pub fn sigma_scalar(&self) -> f64 {
        self.sigma.value().data().iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / self.sigma.value().len() as f64
    }
}

/// The full pipeline on a `[1, H, W]` input.
pub fn mind_forward_var<'g, T: Real>(
    cfg: &ModelConfig,
    flags: AblationFlags,
    p: &Bound<'g, T>,
    noisy: Var<'g, T>,
) -> ForwardVars<'g, T> {
    mind_forward_with_sigma(cfg, flags, p, noisy, None)
}

/// [`mind_forward_var`] with an optional externally supplied σ map in place
/// of the estimate (used to hold σ fixed under finite differences).
pub fn mind_forward_with_sigma<'g, T: Real>(
    cfg: &ModelConfig,
    flags: AblationFlags,
    p: &Bound<'g, T>,
    noisy: Var<'g, T>,
    sigma_override: Option<Var<'g, T>>,
) -> ForwardVars<'g, T> {
    let g = p.graph();
    let s = noisy.shape();
    let (h, w) = (s[1], s[2]);
    let c = cfg.base_channels;
    let (mut features, coarse) = encode_decode_var(cfg, p, noisy, flags.use_multiscale);

    // σ is a statistic of the current coarse estimate; it is not a path for
    // training the encoder.
    let (sigma, gamma, beta) = if flags.use_nle {
        let sigma = sigma_override.unwrap_or_else(|| {
            sigma_map_var(noisy, coarse.detach(), cfg.window_for(h, w), GradientOperator::Sobel)
        });
        let (gamma, beta) = cfg.mapper().forward(p, sigma);
        (sigma, gamma, beta)
    } else {
        (
            g.constant(Tensor::zeros(&[1, h, w])),
            g.constant(Tensor::full(&[c], T::one())),
            g.constant(Tensor::zeros(&[c])),
        )
    };

    let mut attention = Vec::new();
    if flags.use_crossmodal {
        let grad = gradient_magnitude(noisy, GradientOperator::Sobel);
        let mut z = fuse_modalities_var(cfg, p, [noisy, coarse, grad], true);
        for l in 0..cfg.transformer_layers {
            let (nz, a) = self_attention_var(cfg, p, l, z);
            z = nz;
            attention.push(a);
        }
        features = features.add(unpatch_var(cfg, p, z, h, w));
    }

    let (att, alpha, spatial) = if flags.use_naab {
        let out = naab_forward(features, gamma, beta, &cfg.naab(), p);
        (out.features, Some(out.alpha), Some(out.spatial))
    } else {
        (features, None, None)
    };
    let denoised = clamp_unit(noisy.sub(conv3(p, "recon", att, 1)));
    ForwardVars {
        denoised,
        coarse,
        sigma,
        gamma,
        beta,
        features,
        alpha,
        spatial,
        attention,
    }
}

/// Architecture, switches, loss weighting and parameters of one model.
#[derive(Clone, Debug)]
pub struct MindModel {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub loss: LossWeightsConfig,
    pub params: ParamStore<f32>,
}

impl MindModel {
    pub fn new(config: ModelConfig, flags: AblationFlags, loss: LossWeightsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_weights(&config, seed);
        Ok(Self {
            config,
            flags,
            loss,
            params,
        })
    }

    pub fn with_params(config: ModelConfig, flags: AblationFlags, loss: LossWeightsConfig, params: ParamStore<f32>) -> Result<Self> {
        check_weights(&config, &params)?;
        Ok(Self {
            config,
            flags,
            loss,
            params,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub coarse: Image,
    /// Channel gates; `None` when NAAB is ablated.
    pub alpha: Option<Vec<f32>>,
    /// Spatial gate on the image grid.
    pub spatial: Option<SigmaMap>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub sigma_scalar: f64,
    pub lambdas: [f64; 5],
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub denoised: Image,
    pub sigma: SigmaMap,
    pub diagnostics: Diagnostics,
}

fn to_vec_f32<T: Real>(v: Var<'_, T>) -> Vec<f32> {
    v.value().data().iter().map(|x| x.to_f32().unwrap()).collect()
}

/// Denoises one image.
pub fn mind_forward(noisy: &Image, model: &MindModel) -> Result<Inference> {
    let cfg = &model.config;
    cfg.check_dims(noisy.height(), noisy.width())?;
    noisy.require_min_side("mind_forward")?;
    let g = Graph::<f32>::new();
    let p = model.params.bind_frozen(&g);
    let out = mind_forward_var(cfg, model.flags, &p, g.constant(noisy.to_tensor()));
    let sigma_scalar = out.sigma_scalar();
    let denoised = Image::from_tensor(&out.denoised.value())?;
    if !out.denoised.value().is_finite() {
        return Err(MindError::NonFinite("denoised output".into()));
    }
    Ok(Inference {
        denoised,
        sigma: SigmaMap::from_tensor(&out.sigma.value())?,
        diagnostics: Diagnostics {
            coarse: Image::from_tensor(&out.coarse.value())?,
            alpha: out.alpha.map(to_vec_f32),
            spatial: out.spatial.map(|s| SigmaMap::from_tensor(&s.value())).transpose()?,
            gamma: to_vec_f32(out.gamma),
            beta: to_vec_f32(out.beta),
            sigma_scalar,
            lambdas: lambda_weights(sigma_to_percent(sigma_scalar), &model.loss)?,
        },
    })
}

/// Coarse estimate and decoder features of one image.
pub fn encode_decode<T: Real>(
    noisy: &Image,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    flags: AblationFlags,
) -> Result<(Image, Tensor<T>)> {
    cfg.check_dims(noisy.height(), noisy.width())?;
    let g = Graph::<T>::new();
    let p = store.bind_frozen(&g);
    let (f, c) = encode_decode_var(cfg, &p, g.constant(noisy.to_tensor()), flags.use_multiscale);
    Ok((Image::from_tensor(&c.value())?, (*f.value()).clone()))
}

/// `[L, D]` token sequence of the three modalities.
pub fn fuse_modalities<T: Real>(
    noisy: &Image,
    coarse: &Image,
    grad: &SigmaMap,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    noisy.check_same_dims(coarse)?;
    if grad.height() != noisy.height() || grad.width() != noisy.width() {
        return Err(MindError::Dimension(format!(
            "gradient map is {}x{}, images are {}x{}",
            grad.height(),
            grad.width(),
            noisy.height(),
            noisy.width()
        )));
    }
    let pp = cfg.patch;
    if noisy.height() % pp != 0 || noisy.width() % pp != 0 {
        return Err(MindError::Dimension(format!(
            "image sides must be multiples of the patch size {pp}"
        )));
    }
    let g = Graph::<T>::new();
    let p = store.bind_frozen(&g);
    let z = fuse_modalities_var(
        cfg,
        &p,
        [
            g.constant(noisy.to_tensor()),
            g.constant(coarse.to_tensor()),
            g.constant(grad.to_tensor()),
        ],
        true,
    );
    let t = (*z.value()).clone();
    Ok(t)
}

/// One transformer layer applied to a token sequence: (tokens, attention).
pub fn self_attention<T: Real>(
    z: &Tensor<T>,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    layer: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z.shape().len() != 2 || z.shape()[1] != cfg.embed_dim {
        return Err(MindError::Dimension(format!(
            "tokens must be L x {}, got {:?}",
            cfg.embed_dim,
            z.shape()
        )));
    }
    if !z.is_finite() {
        return Err(MindError::NonFinite("token sequence".into()));
    }
    let g = Graph::<T>::new();
    let p = store.bind_frozen(&g);
    let (o, a) = self_attention_var(cfg, &p, layer, g.constant(z.clone()));
    let r = ((*o.value()).clone(), (*a.value()).clone());
    Ok(r)
}
