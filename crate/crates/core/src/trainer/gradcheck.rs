//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::backbone::{
    encode_decode_var, fuse_modalities_var, init_weights, mind_forward_var, mind_forward_with_sigma,
    self_attention_var, AblationFlags, ModelConfig,
};
use crate::degrade::{degrade, NoiseSpec};
use crate::error::{MindError, Result};
use crate::graph::{Graph, Var};
use crate::imagedata::{synthetic_phantom, Image};
use crate::naab::{channel_attention, modulate, naab_forward, spatial_attention, NaabWeights};
use crate::objective::{
    edge_var, mse_var, ssim_loss_var, total_loss_var, LossWeightsConfig, PerceptualExtractor, PERCEPTUAL_SEED,
};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub component: String,
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates that only agreed at a reduced step.
    pub refined: usize,
}

/// Steps tried per coordinate, as fractions of the requested one. A stencil
/// that straddles a ReLU/abs/clamp kink disagrees at one step but not at a
/// smaller one; a wrong derivative disagrees at all of them.
const STEP_LADDER: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
const LADDER_STOP: f64 = 1e-7;

/// |a − f| / max(|a|, |f|, 1e-8).
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Fixed random tensor used to reduce a tensor-valued output to a scalar.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::new(seed).normal(shape, 1.0)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> f64
where
    F: for<'g> Fn(&Bound<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    f(&p).item()
}

/// Compares the gradient of scalar `f` with respect to every tensor in
/// `inputs` against (f(x+ε) − f(x−ε)) / 2ε. With `max_coords`, at most that
/// many evenly spaced coordinates of each tensor are perturbed.
pub fn check_scalar_fn<F>(
    component: &str,
    inputs: &ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> CheckReport
where
    F: for<'g> Fn(&Bound<'g, f64>) -> Var<'g, f64>,
{
    let analytic = {
        let g = Graph::new();
        let p = inputs.bind(&g);
        let out = f(&p);
        let grads = g.backward(out);
        p.gradients(&grads)
    };
    let mut work = inputs.clone();
    let mut report = CheckReport {
        component: component.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        refined: 0,
    };
    let names: Vec<String> = inputs.names().cloned().collect();
    for name in names {
        let n = inputs.get(&name).map_or(0, |t| t.len());
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let grad = analytic.get(&name).expect("gradient for every input");
        for i in coords {
            let x0 = inputs.get(&name).unwrap().data()[i];
            let a = grad.data()[i];
            let (mut err, mut numeric) = (f64::INFINITY, 0.0);
            for (rung, frac) in STEP_LADDER.iter().enumerate() {
                let h = eps * frac;
                work.get_mut(&name).unwrap().data_mut()[i] = x0 + h;
                let up = evaluate(&work, &f);
                work.get_mut(&name).unwrap().data_mut()[i] = x0 - h;
                let down = evaluate(&work, &f);
                work.get_mut(&name).unwrap().data_mut()[i] = x0;
                let fd = (up - down) / (2.0 * h);
                let e = relative_error(a, fd);
                if e < err {
                    err = e;
                    numeric = fd;
                }
                if err < LADDER_STOP {
                    if rung > 0 {
                        report.refined += 1;
                    }
                    break;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Components the registry can check.
pub const COMPONENTS: [&str; 14] = [
    "modulate",
    "channel_attention",
    "spatial_attention",
    "naab_forward",
    "self_attention",
    "map_to_modulation",
    "fuse_modalities",
    "loss_mse",
    "loss_ssim",
    "loss_edge",
    "loss_perceptual",
    "total_loss",
    "encode_decode",
    "mind_forward",
];

/// Pass threshold on the maximum relative error.
pub fn tolerance(component: &str) -> f64 {
    match component {
        "encode_decode" | "mind_forward" => 1e-3,
        _ => 1e-4,
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub seed: u64,
    /// Side of the images fed to image-level components.
    pub image_size: usize,
    /// Per-tensor coordinate cap for the network-sized components.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            seed: 7,
            image_size: 16,
            max_coords: Some(4),
        }
    }
}

/// The reduced network used for pipeline-level checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        scales: 3,
        base_channels: 8,
        embed_dim: 16,
        key_dim: 16,
        patch: 4,
        transformer_layers: 1,
        r: 4,
        sigma_window: 15,
    }
}

/// Replaces all-zero tensors (zero-initialized heads) with small random
/// values so that every parameter carries gradient.
pub fn randomize_zero_tensors(store: &mut ParamStore<f64>, seed: u64) {
    let mut init = Init::new(seed);
    for (_, t) in store.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = init.normal(t.shape(), 0.1);
        }
    }
}

fn subset(store: &ParamStore<f64>, prefix: &str) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (k, v) in store.iter().filter(|(k, _)| k.starts_with(prefix)) {
        out.insert(k.clone(), v.clone());
    }
    out
}

fn test_images(size: usize, seed: u64) -> Result<(Image, Image)> {
    let clean = synthetic_phantom(size, seed);
    let noisy = degrade(&clean, &NoiseSpec::gaussian(0.08, seed ^ 0x9e37))?;
    let clean_noisy = degrade(&clean, &NoiseSpec::gaussian(0.03, seed ^ 0x7f4a))?;
    Ok((noisy, clean_noisy))
}

/// Runs the finite-difference check for a registered component on seeded
/// random inputs in double precision.
pub fn grad_check(component: &str, opts: &GradCheckOptions) -> Result<CheckReport> {
    if !COMPONENTS.contains(&component) {
        return Err(MindError::UnknownComponent(format!(
            "`{component}` (known: {})",
            COMPONENTS.join(", ")
        )));
    }
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(MindError::Parameter(format!("eps must be positive, got {}", opts.eps)));
    }
    let seed = opts.seed;
    let mut init = Init::new(seed);
    let eps = opts.eps;
    let n = opts.image_size;
    let report = match component {
        "modulate" | "channel_attention" | "spatial_attention" | "naab_forward" => {
            let w = NaabWeights::new("naab", 4, 4)?;
            let mut inputs = ParamStore::new();
            w.init(&mut inputs, &mut init);
            inputs.insert("in.f", init.normal(&[4, 8, 8], 1.0));
            inputs.insert("in.gamma", init.normal::<f64>(&[4], 0.2).map(|v| v + 1.0));
            inputs.insert("in.beta", init.normal(&[4], 0.2));
            let out_shape: &[usize] = match component {
                "channel_attention" => &[4],
                "spatial_attention" => &[1, 8, 8],
                _ => &[4, 8, 8],
            };
            let proj = projection(out_shape, seed + 1);
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let (f, g, b) = (p.get("in.f"), p.get("in.gamma"), p.get("in.beta"));
                    let out = match component {
                        "modulate" => modulate(f, g, b),
                        "channel_attention" => channel_attention(modulate(f, g, b), &w, p),
                        "spatial_attention" => spatial_attention(f, &w, p),
                        _ => naab_forward(f, g, b, &w, p).features,
                    };
                    out.mul(p.constant(proj.clone())).sum()
                },
                eps,
                None,
            )
        }
        "self_attention" => {
            let cfg = check_model_config();
            let mut inputs = subset(&init_weights::<f64>(&cfg, seed), "tf.0.");
            inputs.insert("z", init.normal(&[8, cfg.embed_dim], 1.0));
            let proj = projection(&[8, cfg.embed_dim], seed + 1);
            check_scalar_fn(
                component,
                &inputs,
                |p| self_attention_var(&cfg, p, 0, p.get("z")).0.mul(p.constant(proj.clone())).sum(),
                eps,
                None,
            )
        }
        "map_to_modulation" => {
            let cfg = check_model_config();
            let mut inputs = subset(&init_weights::<f64>(&cfg, seed), "nle.");
            randomize_zero_tensors(&mut inputs, seed + 2);
            inputs.insert("sigma", init.normal::<f64>(&[1, n, n], 0.05).map(|v| v.abs() + 0.02));
            let c = cfg.base_channels;
            let (pg, pb) = (projection(&[c], seed + 3), projection(&[c], seed + 4));
            let mapper = cfg.mapper();
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let (g, b) = mapper.forward(p, p.get("sigma"));
                    g.mul(p.constant(pg.clone())).sum().add(b.mul(p.constant(pb.clone())).sum())
                },
                eps,
                None,
            )
        }
        "fuse_modalities" => {
            let cfg = check_model_config();
            let mut inputs = subset(&init_weights::<f64>(&cfg, seed), "fuse.");
            randomize_zero_tensors(&mut inputs, seed + 2);
            let (noisy, other) = test_images(n, seed)?;
            inputs.insert("in.noisy", noisy.to_tensor());
            inputs.insert("in.coarse", other.to_tensor());
            inputs.insert("in.grad", init.normal(&[1, n, n], 0.5));
            let proj = projection(&[cfg.token_count(n, n), cfg.embed_dim], seed + 1);
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let m = [p.get("in.noisy"), p.get("in.coarse"), p.get("in.grad")];
                    fuse_modalities_var(&cfg, p, m, true).mul(p.constant(proj.clone())).sum()
                },
                eps,
                None,
            )
        }
        "loss_mse" | "loss_ssim" | "loss_edge" | "loss_perceptual" | "total_loss" => {
            let (xhat, x) = test_images(n, seed)?;
            let mut inputs = ParamStore::new();
            inputs.insert("xhat", xhat.to_tensor());
            inputs.insert("x", x.to_tensor());
            let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
            let cfg = LossWeightsConfig::default();
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let (a, b) = (p.get("xhat"), p.get("x"));
                    match component {
                        "loss_mse" => mse_var(a, b),
                        "loss_ssim" => ssim_loss_var(a, b),
                        "loss_edge" => edge_var(a, b),
                        "loss_perceptual" => phi.loss_var(&phi.bind(p.graph()), a, b),
                        _ => {
                            let pb = phi.bind(p.graph());
                            total_loss_var(a, b, 0.1, &cfg, &phi, &pb, None)
                                .expect("adversarial disabled")
                                .total
                        }
                    }
                },
                eps,
                None,
            )
        }
        "encode_decode" => {
            let cfg = check_model_config();
            let mut inputs = init_weights::<f64>(&cfg, seed);
            inputs = {
                let mut kept = ParamStore::new();
                for (k, v) in inputs.iter() {
                    if k.starts_with("enc.") || k.starts_with("dec.") || k.starts_with("coarse.") {
                        kept.insert(k.clone(), v.clone());
                    }
                }
                kept
            };
            randomize_zero_tensors(&mut inputs, seed + 2);
            let (noisy, _) = test_images(n, seed)?;
            let x = noisy.map_pixels(|v| 0.2 + 0.6 * v).to_tensor();
            let proj = projection(&[1, n, n], seed + 1);
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let (_, coarse) = encode_decode_var(&cfg, p, p.constant(x.clone()), true);
                    coarse.mul(p.constant(proj.clone())).sum()
                },
                eps,
                opts.max_coords,
            )
        }
        _ => {
            let cfg = check_model_config();
            let mut inputs = init_weights::<f64>(&cfg, seed);
            randomize_zero_tensors(&mut inputs, seed + 2);
            let (noisy, clean) = test_images(n, seed)?;
            let x = noisy.map_pixels(|v| 0.2 + 0.6 * v).to_tensor();
            // σ is a stop-gradient statistic of the coarse estimate; freeze
            // it at the base point so perturbations see the same function.
            let sigma = {
                let g = Graph::new();
                let p = inputs.bind_frozen(&g);
                let out = mind_forward_var(&cfg, AblationFlags::full(), &p, g.constant(x.clone()));
                (*out.sigma.value()).clone()
            };
            let phi = PerceptualExtractor::<f64>::new(PERCEPTUAL_SEED);
            let loss_cfg = LossWeightsConfig::default();
            let clean = clean.to_tensor();
            check_scalar_fn(
                component,
                &inputs,
                |p| {
                    let s = Some(p.constant(sigma.clone()));
                    let out = mind_forward_with_sigma(&cfg, AblationFlags::full(), p, p.constant(x.clone()), s);
                    let pb = phi.bind(p.graph());
                    total_loss_var(out.denoised, p.constant(clean.clone()), 0.1, &loss_cfg, &phi, &pb, None)
                        .expect("adversarial disabled")
                        .total
                },
                eps,
                opts.max_coords,
            )
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut inputs = ParamStore::new();
        inputs.insert("x", Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]));
        let ok = check_scalar_fn("square", &inputs, |p| p.get("x").square().sum(), 1e-3, None);
        assert!(ok.max_rel_error < 1e-9, "{ok:?}");
        // detach hides the dependence from the analytic pass only
        let bad = check_scalar_fn(
            "detached",
            &inputs,
            |p| p.get("x").square().sum().add(p.get("x").detach().sum()),
            1e-3,
            None,
        );
        assert!(bad.max_rel_error > 0.1);
        assert_eq!(bad.checked, 3);
    }

    #[test]
    fn registry_rejects_unknown_and_checks_mse_exactly() {
        let e = grad_check("nope", &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(e, MindError::UnknownComponent(_)));
        let r = grad_check("loss_mse", &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn registry_components_pass() {
        for c in COMPONENTS {
            let r = grad_check(c, &GradCheckOptions::default()).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_error < tolerance(c), "{r:?}");
        }
    }

    #[test]
    fn sampled_coordinates() {
        let mut inputs = ParamStore::new();
        inputs.insert("x", projection(&[100], 1));
        let r = check_scalar_fn("exp", &inputs, |p| p.get("x").exp().sum(), 1e-4, Some(7));
        assert_eq!(r.checked, 7);
        assert!(r.max_rel_error < 1e-7);
    }
}
