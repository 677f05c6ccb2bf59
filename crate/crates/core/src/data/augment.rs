//! Photometric augmentations. None of them move pixels between locations
//! beyond a short blur, so region boxes pass through unchanged.

use rand::Rng;

use crate::data::image::image_size;
use crate::data::LabeledBox;
use crate::error::DataError;
use crate::tensor::Tensor;

/// Direction of the 1D motion-blur kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlurDirection {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl BlurDirection {
    const ALL: [BlurDirection; 4] = [
        BlurDirection::Horizontal,
        BlurDirection::Vertical,
        BlurDirection::Diagonal,
        BlurDirection::AntiDiagonal,
    ];

    fn step(self) -> (isize, isize) {
        match self {
            BlurDirection::Horizontal => (0, 1),
            BlurDirection::Vertical => (1, 0),
            BlurDirection::Diagonal => (1, 1),
            BlurDirection::AntiDiagonal => (1, -1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

/// Per-transform switches, probabilities and parameter ranges. Ranges are
/// inclusive `(lo, hi)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub motion_blur: bool,
    pub motion_blur_p: f64,
    /// Kernel length range in pixels.
    pub blur_length: (usize, usize),
    pub graying: bool,
    pub graying_p: f64,
    pub brightness_contrast: bool,
    pub brightness_contrast_p: f64,
    /// Additive brightness delta range.
    pub brightness: (f64, f64),
    /// Multiplicative contrast factor range (around mid-gray).
    pub contrast: (f64, f64),
    pub color_jitter: bool,
    pub color_jitter_p: f64,
    /// Per-channel gain range.
    pub jitter_gain: (f64, f64),
    /// Per-channel offset range.
    pub jitter_offset: (f64, f64),
    pub gamma: bool,
    pub gamma_p: f64,
    pub gamma_range: (f64, f64),
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            motion_blur: true,
            motion_blur_p: 0.2,
            blur_length: (3, 5),
            graying: true,
            graying_p: 0.05,
            brightness_contrast: true,
            brightness_contrast_p: 0.5,
            brightness: (-0.08, 0.08),
            contrast: (0.85, 1.15),
            color_jitter: true,
            color_jitter_p: 0.5,
            jitter_gain: (0.93, 1.07),
            jitter_offset: (-0.03, 0.03),
            gamma: true,
            gamma_p: 0.3,
            gamma_range: (0.8, 1.25),
            normalization: Normalization::default(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform off and identity normalization.
    pub fn disabled() -> Self {
        Self {
            motion_blur: false,
            graying: false,
            brightness_contrast: false,
            color_jitter: false,
            gamma: false,
            normalization: Normalization::identity(),
            ..Self::default()
        }
    }

    /// Only the normalization step, as used at evaluation time.
    pub fn eval_only(&self) -> Self {
        Self {
            normalization: self.normalization.clone(),
            ..Self::disabled()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(format!("{name} range ({lo}, {hi}) is invalid"))
            }
        };
        range("brightness", self.brightness)?;
        range("contrast", self.contrast)?;
        range("jitter_gain", self.jitter_gain)?;
        range("jitter_offset", self.jitter_offset)?;
        range("gamma", self.gamma_range)?;
        if self.gamma_range.0 <= 0.0 {
            return Err("gamma range must be positive".into());
        }
        if self.blur_length.0 < 1 || self.blur_length.0 > self.blur_length.1 {
            return Err(format!("blur length range {:?} is invalid", self.blur_length));
        }
        for (name, p) in [
            ("motion_blur_p", self.motion_blur_p),
            ("graying_p", self.graying_p),
            ("brightness_contrast_p", self.brightness_contrast_p),
            ("color_jitter_p", self.color_jitter_p),
            ("gamma_p", self.gamma_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err("normalization std must be positive".into());
        }
        Ok(())
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn clamp01(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Averages each pixel with its neighbors along a line of `length` pixels
/// centered on it; samples past the border are clamped to the edge.
pub fn motion_blur(img: &Tensor, length: usize, dir: BlurDirection) -> Result<Tensor, DataError> {
    let (w, h) = image_size(img)?;
    if length <= 1 {
        return Ok(img.clone());
    }
    let (dy, dx) = dir.step();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let half = (length as isize - 1) / 2;
    let offsets: Vec<isize> = (0..length as isize).map(|i| i - half).collect();
    let inv = 1.0 / length as f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for &o in &offsets {
                    let yy = (y as isize + o * dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + o * dx).clamp(0, w as isize - 1) as usize;
                    s += src[(c * h + yy) * w + xx];
                }
                out[(c * h + y) * w + x] = s * inv;
            }
        }
    }
    Ok(Tensor::new(img.shape(), out).expect("same shape"))
}

/// Rec. 601 luminance replicated into all three channels.
pub fn grayscale(img: &Tensor) -> Result<Tensor, DataError> {
    let (w, h) = image_size(img)?;
    let plane = w * h;
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..plane {
        let y = 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
        out[i] = y;
        out[plane + i] = y;
        out[2 * plane + i] = y;
    }
    Ok(Tensor::new(img.shape(), out).expect("same shape"))
}

/// `x -> (x - 0.5) * contrast + 0.5 + brightness`, clamped to `[0, 1]`.
pub fn brightness_contrast(img: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let shift = 0.5 * (1.0 - contrast) + brightness;
    let mut out = img.map(|x| contrast * x + shift);
    clamp01(&mut out);
    out
}

/// Per-channel `x -> gain[c] * x + offset[c]`, clamped to `[0, 1]`.
pub fn color_jitter(img: &Tensor, gain: [f64; 3], offset: [f64; 3]) -> Result<Tensor, DataError> {
    let (w, h) = image_size(img)?;
    let plane = w * h;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (gain[c] * *v + offset[c]).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `x -> x^g` on `[0, 1]`.
pub fn gamma(img: &Tensor, g: f64) -> Tensor {
    img.map(|x| x.clamp(0.0, 1.0).powf(g))
}

/// `(x - mean[c]) / std[c]`.
pub fn normalize(img: &Tensor, norm: &Normalization) -> Result<Tensor, DataError> {
    let (w, h) = image_size(img)?;
    let plane = w * h;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - norm.mean[c]) / norm.std[c];
    }
    Ok(out)
}

/// Applies the enabled transforms in fixed order (blur, graying,
/// brightness/contrast, color jitter, gamma), each with its own probability,
/// then always normalizes. Regions are returned unchanged.
pub fn augment(
    img: &Tensor,
    regions: &[LabeledBox],
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<LabeledBox>), DataError> {
    image_size(img)?;
    let mut x = img.clone();
    if cfg.motion_blur && rng.gen_bool(cfg.motion_blur_p) {
        let (lo, hi) = cfg.blur_length;
        let length = rng.gen_range(lo..=hi.max(lo));
        let dir = BlurDirection::ALL[rng.gen_range(0..4)];
        x = motion_blur(&x, length, dir)?;
    }
    if cfg.graying && rng.gen_bool(cfg.graying_p) {
        x = grayscale(&x)?;
    }
    if cfg.brightness_contrast && rng.gen_bool(cfg.brightness_contrast_p) {
        let b = sample(rng, cfg.brightness);
        let c = sample(rng, cfg.contrast).max(0.0);
        x = brightness_contrast(&x, b, c);
    }
    if cfg.color_jitter && rng.gen_bool(cfg.color_jitter_p) {
        let gain = [0; 3].map(|_| sample(rng, cfg.jitter_gain).max(0.0));
        let offset = [0; 3].map(|_| sample(rng, cfg.jitter_offset));
        x = color_jitter(&x, gain, offset)?;
    }
    if cfg.gamma && rng.gen_bool(cfg.gamma_p) {
        let (lo, hi) = cfg.gamma_range;
        let g = sample(rng, (lo.max(1e-3), hi.max(1e-3)));
        x = gamma(&x, g);
    }
    Ok((normalize(&x, &cfg.normalization)?, regions.to_vec()))
}
