//! Noise-adaptive attention block: γ/β feature recalibration followed by
//! channel attention (pooled descriptor through a ratio-`r` bottleneck) and
//! spatial attention (channel-pooled maps through a 7×7 convolution).

use crate::error::{MindError, Result};
use crate::graph::{Graph, Var};
use crate::nle::ModulationParams;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub const SPATIAL_KERNEL: usize = 7;

/// A `[C, H, W]` tensor.
pub type FeatureMap<T> = Tensor<T>;

/// Parameter names of one attention block under `prefix`.
#[derive(Clone, Debug)]
pub struct NaabWeights {
    prefix: String,
    pub channels: usize,
    pub ratio: usize,
}

/// Everything one forward pass of the block produces.
#[derive(Clone, Copy)]
pub struct NaabOutput<'g, T: Real> {
    pub features: Var<'g, T>,
    /// `[C]` channel gates.
    pub alpha: Var<'g, T>,
    /// `[1, H, W]` spatial gate.
    pub spatial: Var<'g, T>,
}

impl NaabWeights {
    pub fn new(prefix: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels == 0 || channels % ratio != 0 {
            return Err(MindError::Config(format!(
                "compression ratio {ratio} must divide channel count {channels}"
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            ratio,
        })
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.ratio
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let (c, cr) = (self.channels, self.reduced());
        let k = SPATIAL_KERNEL;
        store.insert(self.name("w1"), init.lecun(&[cr, c], c));
        store.insert(self.name("w2"), init.lecun(&[c, cr], cr));
        store.insert(self.name("spatial.w"), init.lecun(&[1, 2, k, k], 2 * k * k));
        store.insert(self.name("spatial.b"), Tensor::zeros(&[1]));
    }

    /// Sets every block parameter to zero (both gates become 0.5).
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        for leaf in ["w1", "w2", "spatial.w", "spatial.b"] {
            if let Some(t) = store.get_mut(&self.name(leaf)) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// F′ = γ·F + β, broadcast over H×W.
pub fn modulate<'g, T: Real>(f: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Var<'g, T> {
    f.mul_outer(gamma).add_outer(beta)
}

/// α = sigmoid(W₂·relu(W₁·z)), z the per-channel spatial mean of F′.
pub fn channel_attention<'g, T: Real>(fprime: Var<'g, T>, w: &NaabWeights, p: &Bound<'g, T>) -> Var<'g, T> {
    let c = w.channels;
    let z = fprime.mean_inner().reshape(&[c, 1]);
    let h = p.get(&w.name("w1")).matmul(z).relu();
    p.get(&w.name("w2")).matmul(h).sigmoid().reshape(&[c])
}

/// sigmoid(conv7×7([mean_c F ; max_c F])) with reflect padding → `[1, H, W]`.
pub fn spatial_attention<'g, T: Real>(f: Var<'g, T>, w: &NaabWeights, p: &Bound<'g, T>) -> Var<'g, T> {
    let pooled = Var::concat(&[f.mean_outer(), f.max_outer()]);
    pooled
        .reflect_pad(SPATIAL_KERNEL / 2)
        .conv2d(p.get(&w.name("spatial.w")), Some(p.get(&w.name("spatial.b"))), 1, 0)
        .sigmoid()
}

/// F_att = F′ ⊙ α ⊙ A_spatial.
pub fn naab_forward<'g, T: Real>(
    f: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    w: &NaabWeights,
    p: &Bound<'g, T>,
) -> NaabOutput<'g, T> {
    let fprime = modulate(f, gamma, beta);
    let alpha = channel_attention(fprime, w, p);
    let spatial = spatial_attention(f, w, p);
    let hw = spatial.value().len();
    let features = fprime.mul_outer(alpha).mul_inner(spatial.reshape(&[hw]));
    NaabOutput {
        features,
        alpha,
        spatial,
    }
}

fn check_feature_map<T: Real>(f: &FeatureMap<T>, channels: usize) -> Result<()> {
    let s = f.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(MindError::Dimension(format!("feature map must be CxHxW, got {s:?}")));
    }
    if s[0] != channels {
        return Err(MindError::Dimension(format!(
            "feature map has {} channels, expected {channels}",
            s[0]
        )));
    }
    if !f.is_finite() {
        return Err(MindError::NonFinite("feature map".into()));
    }
    Ok(())
}

fn modulation_vars<'g>(g: &'g Graph<f64>, m: &ModulationParams) -> (Var<'g, f64>, Var<'g, f64>) {
    let c = m.channels();
    (
        g.constant(Tensor::from_vec(&[c], m.gamma.clone())),
        g.constant(Tensor::from_vec(&[c], m.beta.clone())),
    )
}

/// Evaluates [`modulate`] on concrete values.
pub fn apply_modulation(f: &FeatureMap<f64>, m: &ModulationParams) -> Result<FeatureMap<f64>> {
    check_feature_map(f, m.channels())?;
    if m.gamma.len() != m.beta.len() {
        return Err(MindError::Dimension("gamma and beta lengths differ".into()));
    }
    let g = Graph::new();
    let (gamma, beta) = modulation_vars(&g, m);
    Ok((*modulate(g.constant(f.clone()), gamma, beta).value()).clone())
}

/// Gates and output of the block on concrete values.
pub struct NaabResult {
    pub features: FeatureMap<f64>,
    pub alpha: Vec<f64>,
    pub spatial: Tensor<f64>,
}

pub fn evaluate_naab(
    f: &FeatureMap<f64>,
    m: &ModulationParams,
    w: &NaabWeights,
    store: &ParamStore<f64>,
) -> Result<NaabResult> {
    check_feature_map(f, w.channels)?;
    if m.channels() != w.channels {
        return Err(MindError::Dimension(format!(
            "modulation has {} channels, block has {}",
            m.channels(),
            w.channels
        )));
    }
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (gamma, beta) = modulation_vars(&g, m);
    let out = naab_forward(g.constant(f.clone()), gamma, beta, w, &p);
    Ok(NaabResult {
        features: (*out.features.value()).clone(),
        alpha: out.alpha.value().data().to_vec(),
        spatial: (*out.spatial.value()).clone(),
    })
}
