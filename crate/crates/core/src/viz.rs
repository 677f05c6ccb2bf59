//! Box overlays and gradient-weighted activation maps.

use crate::autodiff::Graph;
use crate::category::Category;
use crate::data::{image_size, LabeledBox};
use crate::error::{ConfigError, Result};
use crate::geometry::BoxXyxy;
use crate::model::{Detector, FrameDecision};
use crate::tensor::Tensor;
use crate::train::normalized_to_pixels;

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayStyle {
    pub bleed_color: [f64; 3],
    pub non_bleed_color: [f64; 3],
    /// Border width in pixels, drawn inward from the box edge.
    pub thickness: usize,
    /// Print the score above each box with a small bitmap font.
    pub show_scores: bool,
    /// Draw non-bleed regions too; by default only bleed regions are drawn.
    pub include_non_bleed: bool,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            bleed_color: [1.0, 0.0, 0.0],
            non_bleed_color: [0.0, 1.0, 0.0],
            thickness: 1,
            show_scores: false,
            include_non_bleed: false,
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if self.thickness == 0 {
            return Err(ConfigError::Invalid("overlay thickness must be at least 1".into()));
        }
        Ok(())
    }

    fn color(&self, c: Category) -> Option<[f64; 3]> {
        match c {
            Category::Bleed => Some(self.bleed_color),
            Category::NonBleed if self.include_non_bleed => Some(self.non_bleed_color),
            _ => None,
        }
    }
}

/// A box to draw: pixel coordinates of the image it is drawn on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayBox {
    pub category: Category,
    pub bbox: BoxXyxy,
    pub score: Option<f64>,
}

fn put(img: &mut [f64], w: usize, h: usize, x: usize, y: usize, color: [f64; 3]) {
    for (c, v) in color.iter().enumerate() {
        img[c * h * w + y * w + x] = *v;
    }
}

/// Pixel span `[lo, hi]` covered by the edge coordinates `[a, b)`, clamped to `0..n`.
fn span(a: f64, b: f64, n: usize) -> Option<(usize, usize)> {
    let lo = a.floor().max(0.0);
    let hi = (b.ceil() - 1.0).min(n as f64 - 1.0);
    (hi >= lo && n > 0).then_some((lo as usize, hi as usize))
}

/// 3x5 glyphs for digits and '.', one row per entry, high bit on the left.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        _ => return None,
    })
}

fn draw_text(img: &mut [f64], w: usize, h: usize, x0: usize, y0: usize, text: &str, color: [f64; 3]) {
    for (k, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits >> (2 - dx) & 1 == 1 {
                    let (x, y) = (x0 + 4 * k + dx, y0 + dy);
                    if x < w && y < h {
                        put(img, w, h, x, y, color);
                    }
                }
            }
        }
    }
}

/// Draws rectangle borders onto a `[3, H, W]` image. Boxes are clamped to the
/// image; only border pixels (and score labels, when enabled) change.
pub fn draw_boxes(image: &Tensor, boxes: &[OverlayBox], style: &OverlayStyle) -> Result<Tensor> {
    style.validate()?;
    let (w, h) = image_size(image)?;
    let mut out = image.clone();
    let img = out.data_mut();
    for b in boxes {
        let Some(color) = style.color(b.category) else { continue };
        let (Some((x0, x1)), Some((y0, y1))) =
            (span(b.bbox.x_min, b.bbox.x_max, w), span(b.bbox.y_min, b.bbox.y_max, h))
        else {
            continue;
        };
        let t = style.thickness;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let border = x < x0 + t || x + t > x1 || y < y0 + t || y + t > y1;
                if border {
                    put(img, w, h, x, y, color);
                }
            }
        }
        if style.show_scores {
            if let Some(s) = b.score {
                let ty = if y0 >= 6 { y0 - 6 } else { y1 + 2 };
                draw_text(img, w, h, x0, ty, &format!("{s:.2}"), color);
            }
        }
    }
    Ok(out)
}

/// Draws the regions of a frame decision; region boxes are normalized and are
/// scaled to the image.
pub fn render_overlay(image: &Tensor, decision: &FrameDecision, style: &OverlayStyle) -> Result<Tensor> {
    let (w, h) = image_size(image)?;
    let boxes: Vec<OverlayBox> = decision
        .regions
        .iter()
        .filter_map(|r| {
            let b = &r.bbox;
            normalized_to_pixels([b.cx, b.cy, b.w, b.h], w as f64, h as f64).map(|bbox| OverlayBox {
                category: r.category,
                bbox,
                score: Some(r.probability),
            })
        })
        .collect();
    draw_boxes(image, &boxes, style)
}

/// Grad-CAM combination step: `relu(sum_c mean(G_c) * A_c)`, min-max
/// normalized (a constant map becomes all zeros), nearest-neighbour upsampled
/// to `out_h x out_w`. `activations` and `gradients` are `[C, H, W]`.
pub fn grad_cam(activations: &Tensor, gradients: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = activations.shape();
    if shape.len() != 3 || gradients.shape() != shape {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "grad_cam",
            lhs: shape.to_vec(),
            rhs: gradients.shape().to_vec(),
        }
        .into());
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let (a, g) = (activations.data(), gradients.data());
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let grads = &g[ch * hw..(ch + 1) * hw];
        let weight = grads.iter().sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, v) in cam.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *o += weight * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let lo = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in &mut cam {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(cam[sy * w + x * w / out_w]);
        }
    }
    Ok(Tensor::new(&[out_h, out_w], out)?)
}

/// Activation map for the bleed category on backbone stage `stage` (the last
/// stage when `None`). The explained score is the largest bleed logit over
/// all queries. `input` is the preprocessed model input; the map has its
/// spatial size and values in [0, 1]. Model weights are not modified.
pub fn activation_map(model: &Detector, input: &Tensor, stage: Option<usize>) -> Result<Tensor> {
    let (w, h) = image_size(input)?;
    let mut g = Graph::new();
    let pass = model.forward(&mut g, input)?;
    let n_stages = pass.stages.len();
    let stage = stage.unwrap_or(n_stages - 1);
    if stage >= n_stages {
        return Err(ConfigError::Invalid(format!("stage {stage} out of range (model has {n_stages})")).into());
    }
    let logits = g.value(pass.logits);
    let bleed = Category::Bleed.index();
    let best = (0..logits.shape()[0])
        .max_by(|&a, &b| logits.row(a)[bleed].total_cmp(&logits.row(b)[bleed]))
        .expect("at least one query");
    let row = g.select_rows(pass.logits, &[best])?;
    let picked = g.gather(row, &[bleed])?;
    let score = g.sum(picked);
    let mut scratch = model.params().clone();
    g.backward(score, &mut scratch)?;
    let node = pass.stages[stage];
    let acts = g.value(node).clone();
    let grads = g.grad(node).cloned().unwrap_or_else(|| Tensor::zeros(acts.shape()));
    grad_cam(&acts, &grads, h, w)
}

/// Mean of `map` inside the union of `boxes` and outside it. Boxes are in
/// pixels of an image of size `image_size` and are rescaled to the map.
/// `None` for either side that has no pixels.
pub fn inside_outside_means(
    map: &Tensor,
    boxes: &[LabeledBox],
    image_size: (usize, usize),
) -> (Option<f64>, Option<f64>) {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let (sx, sy) = (mw as f64 / image_size.0 as f64, mh as f64 / image_size.1 as f64);
    let mut inside = vec![false; mh * mw];
    for b in boxes {
        let bb = &b.bbox;
        if let (Some((x0, x1)), Some((y0, y1))) = (
            span(bb.x_min * sx, bb.x_max * sx, mw),
            span(bb.y_min * sy, bb.y_max * sy, mh),
        ) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    inside[y * mw + x] = true;
                }
            }
        }
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, &is_in) in map.data().iter().zip(&inside) {
        if is_in {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    ((ni > 0).then(|| si / ni as f64), (no > 0).then(|| so / no as f64))
}

/// Maps a `[H, W]` heatmap in [0, 1] to RGB (blue → green → red) and blends it
/// over `image` with weight `alpha`.
pub fn heatmap_overlay(image: &Tensor, map: &Tensor, alpha: f64) -> Result<Tensor> {
    let (w, h) = image_size(image)?;
    if map.shape() != [h, w] {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "heatmap_overlay",
            lhs: vec![h, w],
            rhs: map.shape().to_vec(),
        }
        .into());
    }
    let mut out = image.clone();
    let d = out.data_mut();
    for (i, &v) in map.data().iter().enumerate() {
        let v = v.clamp(0.0, 1.0);
        let rgb = [
            (2.0 * v - 1.0).max(0.0),
            1.0 - (2.0 * v - 1.0).abs(),
            (1.0 - 2.0 * v).max(0.0),
        ];
        for (c, col) in rgb.iter().enumerate() {
            let p = &mut d[c * h * w + i];
            *p = (1.0 - alpha) * *p + alpha * col;
        }
    }
    Ok(out)
}
