//! Grayscale images in [0,1], PGM/PFM files, patch cropping and the on-disk
//! dataset layout (`<root>/clean/*.pgm`, optionally `<root>/noisy/*.pgm`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::tensor::{Real, Tensor};

/// Smallest side accepted by the 3×3 gradient operators and patch cropping.
pub const MIN_SIDE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MindError::Dimension(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(MindError::Size(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut px = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                px.push(f(y, x));
            }
        }
        Self::new(height, width, px)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(MindError::Dimension(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Pointwise map, no clamping.
    pub fn map_pixels(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn clamped(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
        self
    }

    /// Dimension error unless both sides are at least `MIN_SIDE`.
    pub fn require_min_side(&self, what: &str) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(MindError::Dimension(format!(
                "{what} needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Image {
        Image::from_fn(self.width, self.height, |y, x| self.get(x, y)).expect("valid dims")
    }

    /// Rotation by `quarter_turns` × 90° counter-clockwise.
    pub fn rot90(&self, quarter_turns: usize) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Image::from_fn(w, h, |y, x| self.get(x, w - 1 - y)).unwrap(),
            2 => Image::from_fn(h, w, |y, x| self.get(h - 1 - y, w - 1 - x)).unwrap(),
            _ => Image::from_fn(w, h, |y, x| self.get(h - 1 - x, y)).unwrap(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(MindError::Dimension(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(h, w, |y, x| self.get(top + y, left + x))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// `[1, H, W]` tensor view for the differentiable pipeline.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.pixels.iter().map(|&p| T::lit(p as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => {
                return Err(MindError::Dimension(format!(
                    "expected a single-channel map, got shape {s:?}"
                )))
            }
        };
        Image::new(
            h,
            w,
            t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm8,
    Pgm16,
    Pfm,
}

impl ImageFormat {
    /// Picks a format from the file extension: `.pfm` → PFM, else 16-bit PGM.
    pub fn for_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pfm") => ImageFormat::Pfm,
            _ => ImageFormat::Pgm16,
        }
    }
}

/// A loaded image plus the number of samples that had to be clamped into
/// [0,1] (always zero for PGM).
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub image: Image,
    pub out_of_range: usize,
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    read_image_report(path).map(|l| l.image)
}

pub fn read_image_report(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let bytes = fs::read(path.as_ref())?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<LoadedImage> {
    match bytes.get(..2) {
        Some(b"P5") => decode_pgm(bytes),
        Some(b"Pf") => decode_pfm(bytes),
        Some(b"PF") => Err(MindError::Format(
            "magic: three-channel PFM (PF) is not supported".into(),
        )),
        _ => Err(MindError::Format("magic: expected P5 or Pf".into())),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, field: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(MindError::Format(format!("{field}: missing")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| MindError::Format(format!("{field}: not ASCII")))
    }

    fn usize_field(&mut self, field: &str) -> Result<usize> {
        let t = self.token(field)?;
        t.parse()
            .map_err(|_| MindError::Format(format!("{field}: invalid value `{t}`")))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end_header(&mut self, field: &str) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(MindError::Format(format!("{field}: header not terminated"))),
        }
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<LoadedImage> {
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.usize_field("width")?;
    let height = r.usize_field("height")?;
    let maxval = r.usize_field("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(MindError::Format(format!("maxval: {maxval} outside 1..=65535")));
    }
    let start = r.end_header("maxval")?;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(MindError::Size(format!(
            "PGM payload has {} bytes, {width}x{height} at {bpp} byte(s) per sample needs {need}",
            payload.len()
        )));
    }
    let scale = 1.0 / maxval as f64;
    let pixels: Vec<f32> = if bpp == 1 {
        payload[..need].iter().map(|&b| (b as f64 * scale) as f32).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * scale) as f32)
            .collect()
    };
    Ok(LoadedImage {
        image: Image::new(height, width, pixels)?,
        out_of_range: 0,
    })
}

fn decode_pfm(bytes: &[u8]) -> Result<LoadedImage> {
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.usize_field("width")?;
    let height = r.usize_field("height")?;
    let scale_tok = r.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| MindError::Format(format!("scale: invalid value `{scale_tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(MindError::Format(format!("scale: {scale_tok} must be finite and nonzero")));
    }
    let little = scale < 0.0;
    let start = r.end_header("scale")?;
    let need = width * height * 4;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(MindError::Size(format!(
            "PFM payload has {} bytes, {width}x{height} needs {need}",
            payload.len()
        )));
    }
    let mut pixels = vec![0f32; width * height];
    let mut out_of_range = 0;
    // rows are stored bottom-to-top
    for (row_idx, row) in payload[..need].chunks_exact(width * 4).enumerate() {
        let y = height - 1 - row_idx;
        for (x, c) in row.chunks_exact(4).enumerate() {
            let b = [c[0], c[1], c[2], c[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let clamped = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if clamped != v || v.is_nan() {
                out_of_range += 1;
            }
            pixels[y * width + x] = clamped;
        }
    }
    Ok(LoadedImage {
        image: Image::new(height, width, pixels)?,
        out_of_range,
    })
}

/// `round(p·maxval)` with halves rounded up, after clamping into [0,1].
pub fn quantize(p: f32, maxval: u32) -> u32 {
    let v = (p.clamp(0.0, 1.0) as f64) * maxval as f64;
    ((v + 0.5).floor() as u32).min(maxval)
}

pub fn encode_image(img: &Image, format: ImageFormat) -> Vec<u8> {
    let (h, w) = (img.height, img.width);
    match format {
        ImageFormat::Pgm8 => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(img.pixels.iter().map(|&p| quantize(p, 255) as u8));
            out
        }
        ImageFormat::Pgm16 => {
            let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
            for &p in &img.pixels {
                out.extend_from_slice(&(quantize(p, 65535) as u16).to_be_bytes());
            }
            out
        }
        ImageFormat::Pfm => encode_pfm_raw(h, w, &img.pixels),
    }
}

/// PFM bytes for an arbitrary real-valued map (values are not clamped).
pub fn encode_pfm_raw(h: usize, w: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for &v in &values[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_image(img: &Image, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let f = fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_image(img, format))?;
    w.flush()?;
    Ok(())
}

/// Writes any real-valued `h`×`w` map as PFM without clamping. Diagnostic maps
/// (attention, σ) use this.
pub fn write_pfm_map(h: usize, w: usize, values: &[f32], path: impl AsRef<Path>) -> Result<()> {
    if values.len() != h * w {
        return Err(MindError::Size(format!("map {h}x{w} given {} values", values.len())));
    }
    fs::write(path.as_ref(), encode_pfm_raw(h, w, values))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source: String,
    pub top: usize,
    pub left: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Image>,
    pub provenance: Vec<PatchOrigin>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn crop_patches(img: &Image, size: usize, count: usize, seed: u64) -> Result<PatchSet> {
    crop_patches_from("image", img, size, count, seed)
}

/// Crops `count` `size`×`size` patches at offsets drawn uniformly from a
/// ChaCha8 stream seeded with `seed`.
pub fn crop_patches_from(source: &str, img: &Image, size: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if size > img.height.min(img.width) || size < MIN_SIDE {
        return Err(MindError::Dimension(format!(
            "patch size {size} must lie in {MIN_SIDE}..={}",
            img.height.min(img.width)
        )));
    }
    if count == 0 {
        return Err(MindError::Parameter("patch count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for _ in 0..count {
        let top = rng.gen_range(0..=img.height - size);
        let left = rng.gen_range(0..=img.width - size);
        patches.push(img.crop(top, left, size, size)?);
        provenance.push(PatchOrigin {
            source: source.to_string(),
            top,
            left,
        });
    }
    Ok(PatchSet { patches, provenance })
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub name: String,
    pub clean: Image,
    pub noisy: Option<Image>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    /// Loads every `clean/*.pgm` under `root` in filename order, pairing each
    /// with `noisy/<same name>` when present.
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset> {
        let root = root.as_ref().to_path_buf();
        let clean_dir = root.join("clean");
        let entries = fs::read_dir(&clean_dir).map_err(|e| {
            MindError::Dataset(format!("cannot list {}: {e}", clean_dir.display()))
        })?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.to_ascii_lowercase().ends_with(".pgm"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(MindError::Dataset(format!(
                "no clean images under {}",
                clean_dir.display()
            )));
        }
        let mut items = Vec::with_capacity(names.len());
        for name in names {
            let clean = read_image(clean_dir.join(&name))?;
            let noisy_path = root.join("noisy").join(&name);
            let noisy = if noisy_path.exists() {
                let n = read_image(&noisy_path)?;
                clean.check_same_dims(&n)?;
                Some(n)
            } else {
                None
            };
            items.push(DatasetItem { name, clean, noisy });
        }
        Ok(Dataset { root, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Writes `images` as `<root>/clean/img_0000.pgm`, ... (16-bit).
pub fn write_dataset(root: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let dir = root.as_ref().join("clean");
    fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        write_image(img, dir.join(format!("img_{i:04}.pgm")), ImageFormat::Pgm16)?;
    }
    Ok(())
}

/// Piecewise-smooth test scene: a shaded background, a handful of ellipses
/// and rectangles at random intensities, and one sinusoidal texture region.
pub fn synthetic_phantom(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5048_414e_544f_4d00);
    let s = size as f64;
    let gx: f64 = rng.gen_range(-0.25..0.25);
    let gy: f64 = rng.gen_range(-0.25..0.25);
    let base: f64 = rng.gen_range(0.25..0.6);
    let mut px: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 / s, (i % size) as f64 / s);
            base + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();

    let n_shapes = rng.gen_range(4..9);
    for _ in 0..n_shapes {
        let cy = rng.gen_range(0.0..s);
        let cx = rng.gen_range(0.0..s);
        let ry = rng.gen_range(0.06..0.3) * s;
        let rx = rng.gen_range(0.06..0.3) * s;
        let val: f64 = rng.gen_range(0.05..0.95);
        let ellipse = rng.gen_bool(0.6);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    px[y * size + x] = val;
                }
            }
        }
    }

    let ty = rng.gen_range(0.0..s);
    let tx = rng.gen_range(0.0..s);
    let tr = rng.gen_range(0.1..0.25) * s;
    let freq = rng.gen_range(0.15..0.6);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let amp = rng.gen_range(0.05..0.15);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - ty, x as f64 - tx);
            if dy * dy + dx * dx <= tr * tr {
                let u = dx * theta.cos() + dy * theta.sin();
                px[y * size + x] += amp * (freq * u).sin();
            }
        }
    }

    Image::new(size, size, px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
        .expect("phantom size >= 3")
}
