//! Noise-level estimation from gradient residual statistics, and the shallow
//! network turning a σ map into per-channel modulation (γ, β).
//!
//! The estimator only ever sees the noisy image and a coarse estimate of the
//! clean one, never the ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::graph::{Graph, Var};
use crate::imagedata::Image;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_WINDOW: usize = 15;

/// Width of the mapper's hidden convolutions.
pub const MAPPER_HIDDEN: usize = 8;

/// Expected normalized squared gradient magnitude per unit noise variance.
/// Each axis response is scaled to unit noise gain, so white noise of
/// variance σ² gives E[Gx² + Gy²] = 2σ².
pub const GRADIENT_ENERGY_PER_VARIANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SigmaMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(MindError::Size(format!(
                "{height}x{width} map given {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width]).expect("non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn transpose(&self) -> SigmaMap {
        let mut v = Vec::with_capacity(self.values.len());
        for x in 0..self.width {
            for y in 0..self.height {
                v.push(self.get(y, x));
            }
        }
        SigmaMap::new(self.width, self.height, v).unwrap()
    }

    /// Mean over a rectangular region `[y0, y1) × [x0, x1)`.
    pub fn region_mean(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                s += self.get(y, x) as f64;
            }
        }
        s / ((y1 - y0) * (x1 - x0)) as f64
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<SigmaMap> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(MindError::Dimension(format!("expected a 1xHxW map, got {s:?}"))),
        };
        SigmaMap::new(h, w, t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
    }
}

/// Mean of all map values.
pub fn sigma_scalar(sigma: &SigmaMap) -> f64 {
    sigma.values.iter().map(|&v| v as f64).sum::<f64>() / sigma.values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientOperator {
    #[default]
    Sobel,
    Scharr,
}

impl GradientOperator {
    /// Outer and centre taps of the smoothing profile across the derivative.
    fn taps(self) -> (f64, f64) {
        match self {
            GradientOperator::Sobel => (1.0, 2.0),
            GradientOperator::Scharr => (3.0, 10.0),
        }
    }

    /// √(Σk²) of the 3×3 kernel: √12 for Sobel, √236 for Scharr.
    pub fn noise_gain(self) -> f64 {
        let (a, b) = self.taps();
        (2.0 * (2.0 * a * a + b * b)).sqrt()
    }
}

/// Normalized (Gx, Gy) of a `[1, H, W]` var with reflect padding. Computed as
/// a central difference followed by smoothing across it, so constant regions
/// give exactly zero.
pub fn gradient_xy<'g, T: Real>(img: Var<'g, T>, op: GradientOperator) -> (Var<'g, T>, Var<'g, T>) {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let padded = img.reshape(&[1, h, w]).reflect_pad(1);
    let pw = w + 2;
    let view = |dy: isize, dx: isize| {
        let mut idx = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                idx.push(((y as isize + 1 + dy) as usize) * pw + (x as isize + 1 + dx) as usize);
            }
        }
        padded.gather(idx.into(), &[1, h, w])
    };
    let (a, b) = op.taps();
    let inv = T::lit(1.0 / op.noise_gain());
    let (a, b) = (T::lit(a), T::lit(b));
    let smooth = |m: Var<'g, T>, c: Var<'g, T>, p: Var<'g, T>| {
        m.mul_scalar(a).add(c.mul_scalar(b)).add(p.mul_scalar(a)).mul_scalar(inv)
    };
    let dx = |dy| view(dy, 1).sub(view(dy, -1));
    let dy = |dx| view(1, dx).sub(view(-1, dx));
    let gx = smooth(dx(-1), dx(0), dx(1));
    let gy = smooth(dy(-1), dy(0), dy(1));
    (gx, gy)
}

/// Normalized Gx² + Gy² of a `[1, H, W]` var, reflect padding.
pub fn gradient_energy<'g, T: Real>(img: Var<'g, T>, op: GradientOperator) -> Var<'g, T> {
    let (gx, gy) = gradient_xy(img, op);
    gx.square().add(gy.square())
}

/// √(Gx² + Gy²) of a `[1, H, W]` var.
pub fn gradient_magnitude<'g, T: Real>(img: Var<'g, T>, op: GradientOperator) -> Var<'g, T> {
    gradient_energy(img, op).sqrt()
}

/// Box mean over a `window`×`window` neighbourhood, reflect padding.
pub fn window_mean<'g, T: Real>(x: Var<'g, T>, window: usize) -> Var<'g, T> {
    let inv = T::one() / T::lit((window * window) as f64);
    let k = x
        .graph()
        .constant(Tensor::full(&[1, 1, window, window], inv));
    x.reflect_pad(window / 2).conv2d(k, None, 1, 0)
}

/// σ(i,j) = √( max(0, mean_window[(∇Y)²] − (∇X̂)²) / 2 ).
pub fn sigma_map_var<'g, T: Real>(
    noisy: Var<'g, T>,
    coarse: Var<'g, T>,
    window: usize,
    op: GradientOperator,
) -> Var<'g, T> {
    let local = window_mean(gradient_energy(noisy, op), window);
    let residual = local.sub(gradient_energy(coarse, op));
    residual
        .relu()
        .mul_scalar(T::lit(1.0 / GRADIENT_ENERGY_PER_VARIANCE))
        .sqrt()
}

pub fn gradient_map(img: &Image, op: GradientOperator) -> Result<SigmaMap> {
    img.require_min_side("gradient_map")?;
    let g = Graph::<f64>::new();
    let x = g.constant(img.to_tensor());
    SigmaMap::from_tensor(&gradient_magnitude(x, op).value())
}

pub fn validate_window(window: usize, h: usize, w: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 || window > h.min(w) {
        return Err(MindError::Parameter(format!(
            "window must be odd, >= 3 and <= {}, got {window}",
            h.min(w)
        )));
    }
    Ok(())
}

pub fn estimate_sigma_map(noisy: &Image, coarse: &Image, window: usize) -> Result<SigmaMap> {
    estimate_sigma_map_with(noisy, coarse, window, GradientOperator::Sobel)
}

pub fn estimate_sigma_map_with(
    noisy: &Image,
    coarse: &Image,
    window: usize,
    op: GradientOperator,
) -> Result<SigmaMap> {
    noisy.check_same_dims(coarse)?;
    noisy.require_min_side("estimate_sigma_map")?;
    validate_window(window, noisy.height(), noisy.width())?;
    let g = Graph::<f64>::new();
    let y = g.constant(noisy.to_tensor());
    let c = g.constant(coarse.to_tensor());
    SigmaMap::from_tensor(&sigma_map_var(y, c, window, op).value())
}

/// Per-channel γ, β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ModulationParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Parameter names of the σ→(γ, β) mapper under `prefix`.
pub struct MapperWeights {
    prefix: String,
    pub channels: usize,
}

impl MapperWeights {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    /// He-initialized convolutions, zero heads (identity modulation).
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let h = MAPPER_HIDDEN;
        let c = self.channels;
        store.insert(self.name("conv1.w"), init.he(&[h, 1, 3, 3], 9));
        store.insert(self.name("conv1.b"), Tensor::zeros(&[h]));
        store.insert(self.name("conv2.w"), init.he(&[h, h, 3, 3], 9 * h));
        store.insert(self.name("conv2.b"), Tensor::zeros(&[h]));
        store.insert(self.name("gamma.w"), Tensor::zeros(&[c, h]));
        store.insert(self.name("gamma.b"), Tensor::zeros(&[c]));
        store.insert(self.name("beta.w"), Tensor::zeros(&[c, h]));
        store.insert(self.name("beta.b"), Tensor::zeros(&[c]));
    }

    /// conv3×3 → ReLU → conv3×3 → ReLU → global mean → γ = 1 + tanh(·), β.
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        sigma: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let h = sigma
            .conv2d(p.get(&self.name("conv1.w")), Some(p.get(&self.name("conv1.b"))), 1, 1)
            .relu()
            .conv2d(p.get(&self.name("conv2.w")), Some(p.get(&self.name("conv2.b"))), 1, 1)
            .relu()
            .mean_inner()
            .reshape(&[MAPPER_HIDDEN, 1]);
        let c = self.channels;
        let gamma = p
            .get(&self.name("gamma.w"))
            .matmul(h)
            .reshape(&[c])
            .add(p.get(&self.name("gamma.b")))
            .tanh()
            .add_scalar(T::one());
        let beta = p
            .get(&self.name("beta.w"))
            .matmul(h)
            .reshape(&[c])
            .add(p.get(&self.name("beta.b")));
        (gamma, beta)
    }
}

pub fn map_to_modulation<T: Real>(
    sigma: &SigmaMap,
    weights: &MapperWeights,
    store: &ParamStore<T>,
) -> Result<ModulationParams> {
    if sigma.values().iter().any(|v| !v.is_finite()) {
        return Err(MindError::NonFinite("sigma map".into()));
    }
    let g = Graph::<T>::new();
    let p = store.bind_frozen(&g);
    let s = g.constant(sigma.to_tensor());
    let (gamma, beta) = weights.forward(&p, s);
    let f = |v: Var<'_, T>| v.value().data().iter().map(|x| x.to_f64().unwrap()).collect();
    Ok(ModulationParams {
        gamma: f(gamma),
        beta: f(beta),
    })
}
