//! Seeded synthetic degradation: additive Gaussian, Poisson shot noise,
//! multiplicative speckle and linear motion blur.
//!
//! Every random draw comes from a ChaCha8 stream seeded with `NoiseSpec::seed`,
//! consumed in raster order, so a spec fully determines its output.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::filter::{correlate_reflect, Kernel2d};
use crate::imagedata::Image;
use crate::nle::SigmaMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
    Speckle,
    MotionBlur,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::Gaussian,
        NoiseKind::Poisson,
        NoiseKind::Speckle,
        NoiseKind::MotionBlur,
    ];

    /// Level range used by strict validation and by the training curriculum.
    pub fn level_range(self) -> (f64, f64) {
        match self {
            NoiseKind::Gaussian => (0.05, 0.25),
            NoiseKind::Speckle => (0.10, 0.30),
            NoiseKind::MotionBlur => (5.0, 15.0),
            NoiseKind::Poisson => (10.0, 255.0),
        }
    }

    pub fn parse(s: &str) -> Option<NoiseKind> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" => Some(NoiseKind::Gaussian),
            "poisson" => Some(NoiseKind::Poisson),
            "speckle" => Some(NoiseKind::Speckle),
            "motion_blur" | "motion" => Some(NoiseKind::MotionBlur),
            _ => None,
        }
    }
}

pub const DEFAULT_POISSON_PEAK: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Gaussian σ or speckle s as a fraction of [0,1]; blur length in pixels;
    /// Poisson peak photon count.
    pub level: f64,
    /// Motion-blur direction in radians; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    pub seed: u64,
    /// Per-pixel multiplier in [0,1] on σ (gaussian) or s (speckle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_profile: Option<SigmaMap>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> Self {
        Self {
            kind,
            level,
            angle: None,
            seed,
            spatial_profile: None,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self::new(NoiseKind::Gaussian, sigma, seed)
    }

    pub fn with_angle(mut self, angle: f64) -> Self {
        self.angle = Some(angle);
        self
    }

    pub fn with_profile(mut self, profile: SigmaMap) -> Self {
        self.spatial_profile = Some(profile);
        self
    }

    /// Checks the level (range-limited when `strict`) and profile values.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if !(self.level.is_finite() && self.level > 0.0) {
            return Err(MindError::Parameter(match self.kind {
                NoiseKind::Poisson => format!("poisson peak must be positive, got {}", self.level),
                _ => format!("{:?} level must be positive, got {}", self.kind, self.level),
            }));
        }
        if strict {
            let (lo, hi) = self.kind.level_range();
            if self.level < lo || self.level > hi {
                return Err(MindError::Parameter(format!(
                    "{:?} level {} outside strict range [{lo}, {hi}]",
                    self.kind, self.level
                )));
            }
        }
        if let Some(a) = self.angle {
            if !a.is_finite() {
                return Err(MindError::Parameter("angle must be finite".into()));
            }
        }
        if let Some(p) = &self.spatial_profile {
            if p.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(MindError::Parameter("spatial_profile values must lie in [0,1]".into()));
            }
        }
        Ok(())
    }
}

pub fn degrade(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.validate(false)?;
    if let Some(p) = &spec.spatial_profile {
        if p.height() != img.height() || p.width() != img.width() {
            return Err(MindError::Dimension(format!(
                "spatial_profile is {}x{}, image is {}x{}",
                p.height(),
                p.width(),
                img.height(),
                img.width()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let profile = |i: usize| -> f64 {
        spec.spatial_profile
            .as_ref()
            .map_or(1.0, |p| p.values()[i] as f64)
    };
    let (h, w) = (img.height(), img.width());
    let px = img.pixels();
    let out: Vec<f32> = match spec.kind {
        NoiseKind::Gaussian => (0..px.len())
            .map(|i| {
                let g: f64 = rng.sample(StandardNormal);
                px[i] as f64 + spec.level * profile(i) * g
            })
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect(),
        NoiseKind::Speckle => (0..px.len())
            .map(|i| {
                let g: f64 = rng.sample(StandardNormal);
                px[i] as f64 * (1.0 + spec.level * profile(i) * g)
            })
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect(),
        NoiseKind::Poisson => {
            let peak = spec.level;
            px.iter()
                .map(|&x| {
                    let lam = x as f64 * peak;
                    let k = if lam > 0.0 {
                        Poisson::new(lam)
                            .map_err(|e| MindError::Parameter(format!("poisson rate {lam}: {e}")))?
                            .sample(&mut rng)
                    } else {
                        0.0
                    };
                    Ok((k / peak).clamp(0.0, 1.0) as f32)
                })
                .collect::<Result<Vec<f32>>>()?
        }
        NoiseKind::MotionBlur => {
            let angle = spec.angle.unwrap_or_else(|| rng.gen_range(0.0..PI));
            let k = motion_blur_kernel(spec.level, angle)?;
            return Ok(correlate_reflect(img, &k).clamped());
        }
    };
    Image::new(h, w, out)
}

/// Normalized line kernel of `length` pixels at `angle` radians (measured
/// counter-clockwise from the +x axis, image y pointing down). The segment is
/// sampled every quarter pixel and each sample is split bilinearly over its
/// four neighbouring grid cells.
pub fn motion_blur_kernel(length: f64, angle: f64) -> Result<Kernel2d> {
    if !(length.is_finite() && length > 0.0) {
        return Err(MindError::Parameter(format!("blur length must be positive, got {length}")));
    }
    let half = (length - 1.0).max(0.0) / 2.0;
    let radius = half.ceil() as usize + 1;
    let side = 2 * radius + 1;
    let mut weights = vec![0.0f64; side * side];
    let n = (4.0 * length.ceil()) as usize + 1;
    let (c, s) = (angle.cos(), angle.sin());
    for i in 0..n {
        let t = if n == 1 {
            0.0
        } else {
            -half + 2.0 * half * i as f64 / (n - 1) as f64
        };
        let x = radius as f64 + t * c;
        let y = radius as f64 - t * s;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let wgt = wx * wy;
                if wgt > 0.0 {
                    weights[(y0 + dy) * side + x0 + dx] += wgt;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok(Kernel2d { radius, weights })
}
