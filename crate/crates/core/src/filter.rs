//! Plain (non-differentiable) reflect-padded filters on [`Image`]s.

use crate::error::{MindError, Result};
use crate::graph::reflect_index;
use crate::imagedata::Image;

/// Square correlation kernel of side `2·radius + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel2d {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Correlates `img` with `k` using reflect padding. No clamping.
pub fn correlate_reflect(img: &Image, k: &Kernel2d) -> Image {
    let (h, w) = (img.height(), img.width());
    let r = k.radius as isize;
    let side = k.side();
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for ky in 0..side {
                let sy = reflect_index(y as isize + ky as isize - r, h);
                let row = &k.weights[ky * side..(ky + 1) * side];
                for (kx, &wt) in row.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let sx = reflect_index(x as isize + kx as isize - r, w);
                    acc += wt * img.get(sy, sx) as f64;
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    Image::new(h, w, out).expect("same dims")
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MindError::Parameter(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut t: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    Ok(t)
}

/// Separable Gaussian blur, reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_taps(sigma)?;
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, &t)| t * img.get(y, reflect_index(x as isize + i as isize - r, w)) as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, &t)| t * tmp[reflect_index(y as isize + i as isize - r, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    Image::new(h, w, out)
}

/// `k`×`k` median with reflect padding; `k` must be odd.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    if k == 0 || k % 2 == 0 {
        return Err(MindError::Parameter(format!("median window must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(k * k);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for dy in -r..=r {
                let sy = reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    buf.push(img.get(sy, reflect_index(x as isize + dx, w)));
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out[y * w + x] = *m;
        }
    }
    Image::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_taps_normalized() {
        for s in [0.5, 0.8, 1.2, 1.5, 3.0] {
            let t = gaussian_taps(s).unwrap();
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gaussian_taps(0.0).is_err());
    }

    #[test]
    fn median_removes_impulse() {
        let mut img = Image::filled(9, 9, 0.0).unwrap();
        img.pixels_mut()[40] = 1.0;
        let m = median_filter(&img, 3).unwrap();
        assert!(m.pixels().iter().all(|&v| v == 0.0));
        assert!(median_filter(&img, 4).is_err());
    }

    #[test]
    fn constant_images_are_fixed_points() {
        let img = Image::filled(7, 11, 0.37).unwrap();
        assert_eq!(median_filter(&img, 5).unwrap(), img);
        let b = gaussian_blur(&img, 1.2).unwrap();
        assert!(b.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }
}
