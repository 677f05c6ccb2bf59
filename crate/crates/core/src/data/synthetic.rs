//! Synthetic capsule-endoscopy-like scenes with exact boxes.
//!
//! Background: pinkish base color modulated by a few low-frequency
//! sinusoids and a mild vignette. Bleed blobs are dark saturated red
//! ellipses, distractors pale yellowish ones; both are flat-colored with a
//! smooth edge falloff of compact support. A pixel belongs to a blob when its
//! blend weight exceeds 0.5, which happens exactly inside the nominal
//! ellipse; the recorded box is the tight pixel bound of that set.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::category::Category;
use crate::data::{AnnotationRecord, LabeledBox};
use crate::geometry::{BoxXyxy, CoordSystem};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Inclusive range of bleed blob counts.
    pub bleed_count: (usize, usize),
    /// Inclusive range of ellipse semi-axes in pixels.
    pub bleed_radius: (f64, f64),
    pub distractor_count: (usize, usize),
    pub distractor_radius: (f64, f64),
    /// Peak amplitude of the background texture.
    pub texture_amplitude: f64,
    /// Half-width of the edge falloff relative to the semi-axis.
    pub edge_softness: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            bleed_count: (1, 2),
            bleed_radius: (5.0, 11.0),
            distractor_count: (0, 2),
            distractor_radius: (3.0, 7.0),
            texture_amplitude: 0.05,
            edge_softness: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        let s = self.image_size as f64;
        if self.image_size < 8 {
            return Err(format!("image size {} is too small", self.image_size));
        }
        for (name, (lo, hi)) in [
            ("bleed_count", self.bleed_count),
            ("distractor_count", self.distractor_count),
        ] {
            if lo > hi {
                return Err(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        if !(0.0..1.0).contains(&self.edge_softness) {
            return Err(format!("edge softness {} must lie in [0, 1)", self.edge_softness));
        }
        for (name, (lo, hi)) in [
            ("bleed_radius", self.bleed_radius),
            ("distractor_radius", self.distractor_radius),
        ] {
            if !(lo >= 1.0 && hi >= lo) {
                return Err(format!("{name} range ({lo}, {hi}) is invalid"));
            }
            if 2.0 * hi * (1.0 + self.edge_softness) >= s {
                return Err(format!("{name} upper bound {hi} does not fit a {s}-pixel image"));
            }
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 0.3) {
            return Err(format!("texture amplitude {} outside [0, 0.3]", self.texture_amplitude));
        }
        Ok(())
    }
}

struct Blob {
    category: Category,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

impl Blob {
    /// Half-extent of the support (where the blend weight is non-zero).
    fn support(&self, softness: f64) -> (f64, f64) {
        (self.rx * (1.0 + softness), self.ry * (1.0 + softness))
    }

    fn alpha(&self, x: f64, y: f64, softness: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let r = (dx * dx + dy * dy).sqrt();
        if softness == 0.0 {
            return if r < 1.0 { 1.0 } else { 0.0 };
        }
        let t = ((r - (1.0 - softness)) / (2.0 * softness)).clamp(0.0, 1.0);
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn count(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn background(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.image_size;
    let base = [
        uniform(rng, (0.80, 0.90)),
        uniform(rng, (0.50, 0.60)),
        uniform(rng, (0.45, 0.55)),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = uniform(rng, (0.0, 2.0 * PI));
            let freq = uniform(rng, (0.5, 2.0)) * 2.0 * PI / s as f64;
            (freq * angle.cos(), freq * angle.sin(), uniform(rng, (0.0, 2.0 * PI)))
        })
        .collect();
    let channel_gain = [1.0, 0.8, 0.8];
    let mut img = vec![0.0; 3 * s * s];
    let half = s as f64 / 2.0;
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * px + fy * py + ph).sin())
                .sum::<f64>()
                / 3.0;
            let rr = ((px - half).powi(2) + (py - half).powi(2)) / (half * half);
            let vignette = 1.0 - 0.12 * rr.min(2.0);
            for c in 0..3 {
                let v = (base[c] + spec.texture_amplitude * channel_gain[c] * tex) * vignette;
                img[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Places a blob whose support does not touch earlier ones; gives up after a
/// bounded number of attempts.
fn place(
    spec: &SyntheticSceneSpec,
    rng: &mut ChaCha8Rng,
    placed: &[Blob],
    category: Category,
    radius: (f64, f64),
    color: [f64; 3],
) -> Option<Blob> {
    let s = spec.image_size as f64;
    for _ in 0..200 {
        let rx = uniform(rng, radius);
        let ry = uniform(rng, radius);
        let (sx, sy) = (rx * (1.0 + spec.edge_softness), ry * (1.0 + spec.edge_softness));
        let cx = uniform(rng, (sx, s - sx));
        let cy = uniform(rng, (sy, s - sy));
        let clear = placed.iter().all(|b| {
            let (bx, by) = b.support(spec.edge_softness);
            (cx - b.cx).abs() >= sx + bx + 1.0 || (cy - b.cy).abs() >= sy + by + 1.0
        });
        if clear {
            return Some(Blob {
                category,
                cx,
                cy,
                rx,
                ry,
                color,
            });
        }
    }
    None
}

/// Renders a scene with the requested blob counts (fewer if placement fails).
///
/// # Panics
/// If `spec` does not pass [`SyntheticSceneSpec::validate`].
pub fn generate_scene(
    spec: &SyntheticSceneSpec,
    image_id: &str,
    n_bleed: usize,
    n_distractors: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, AnnotationRecord) {
    if let Err(e) = spec.validate() {
        panic!("invalid scene spec: {e}");
    }
    let s = spec.image_size;
    let mut img = background(spec, rng);
    let mut blobs: Vec<Blob> = Vec::new();
    for _ in 0..n_bleed {
        let color = [
            uniform(rng, (0.45, 0.65)),
            uniform(rng, (0.02, 0.10)),
            uniform(rng, (0.03, 0.10)),
        ];
        if let Some(b) = place(spec, rng, &blobs, Category::Bleed, spec.bleed_radius, color) {
            blobs.push(b);
        }
    }
    for _ in 0..n_distractors {
        let color = [
            uniform(rng, (0.90, 0.98)),
            uniform(rng, (0.80, 0.92)),
            uniform(rng, (0.45, 0.65)),
        ];
        if let Some(b) = place(spec, rng, &blobs, Category::NonBleed, spec.distractor_radius, color) {
            blobs.push(b);
        }
    }
    let mut regions = Vec::with_capacity(blobs.len());
    for b in &blobs {
        let (sx, sy) = b.support(spec.edge_softness);
        let x0 = (b.cx - sx).floor().max(0.0) as usize;
        let x1 = ((b.cx + sx).ceil() as usize).min(s);
        let y0 = (b.cy - sy).floor().max(0.0) as usize;
        let y1 = ((b.cy + sy).ceil() as usize).min(s);
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                let a = b.alpha(x as f64 + 0.5, y as f64 + 0.5, spec.edge_softness);
                if a == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let p = &mut img[(c * s + y) * s + x];
                    *p = *p * (1.0 - a) + b.color[c] * a;
                }
                if a > 0.5 {
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx1 > bx0 && by1 > by0 {
            regions.push(LabeledBox {
                category: b.category,
                bbox: BoxXyxy {
                    x_min: bx0 as f64,
                    y_min: by0 as f64,
                    x_max: bx1 as f64,
                    y_max: by1 as f64,
                    coords: CoordSystem::Pixels,
                },
            });
        }
    }
    let tensor = Tensor::new(&[3, s, s], img).expect("square RGB image");
    let record = AnnotationRecord::from_regions(image_id, format!("{image_id}.ppm"), regions, (s, s))
        .expect("synthetic boxes lie inside the image");
    (tensor, record)
}

/// One scene with blob counts drawn from the spec's ranges.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (Tensor, AnnotationRecord) {
    let n_bleed = count(rng, spec.bleed_count);
    let n_distractors = count(rng, spec.distractor_count);
    generate_scene(spec, "synthetic", n_bleed, n_distractors, rng)
}

/// `n` scenes named `scene_00000...`, alternating bleeding (even index, at
/// least one bleed blob) and non-bleeding (odd index, none). Scene `i` uses
/// its own stream of `spec.seed`, so a corpus is a prefix of any larger one.
pub fn synthetic_corpus(spec: &SyntheticSceneSpec, n: usize) -> Vec<(Tensor, AnnotationRecord)> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let n_bleed = if i % 2 == 0 {
                count(&mut rng, (spec.bleed_count.0.max(1), spec.bleed_count.1.max(1)))
            } else {
                0
            };
            let n_distractors = count(&mut rng, spec.distractor_count);
            generate_scene(spec, &format!("scene_{i:05}"), n_bleed, n_distractors, &mut rng)
        })
        .collect()
}
