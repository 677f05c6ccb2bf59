//! Matching cost and the weighted set-prediction loss.

use crate::autodiff::{Graph, NodeId};
use crate::category::Category;
use crate::error::{MatchError, Result, TensorError};
use crate::geometry::{giou, l1_distance, BoxCxCyWh};
use crate::matching::{hungarian, Assignment, CostMatrix};
use crate::model::PredictionSet;
use crate::tensor::Tensor;

/// Lower bound applied to predicted box coordinates before any geometry.
pub const MIN_BOX_EXTENT: f64 = 1e-6;

/// Weights shared by the matching cost and the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of queries matched to no target.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            background: 0.1,
        }
    }
}

impl LossWeights {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            class: self.class * c,
            l1: self.l1 * c,
            giou: self.giou * c,
            background: self.background,
        }
    }
}

/// A ground-truth region in normalized center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub category: Category,
    pub bbox: BoxCxCyWh,
}

fn clamp_box(b: [f64; 4]) -> BoxCxCyWh {
    BoxCxCyWh {
        cx: b[0],
        cy: b[1],
        w: b[2].max(MIN_BOX_EXTENT),
        h: b[3].max(MIN_BOX_EXTENT),
    }
}

/// `entry(q, t) = -w_class p_q(cat_t) + w_l1 |b_q - b_t|_1 - w_giou giou(b_q, b_t)`.
pub fn matching_cost(preds: &PredictionSet, targets: &[Target], w: &LossWeights) -> Result<CostMatrix> {
    let probs = preds.probabilities();
    let n = preds.n_queries();
    let mut values = Vec::with_capacity(n * targets.len());
    for (q, p) in probs.iter().enumerate() {
        let pb = clamp_box(preds.box_at(q));
        let pxy = pb.to_xyxy()?;
        for t in targets {
            let txy = t.bbox.to_xyxy()?;
            let cost = -w.class * p[t.category.index()] + w.l1 * l1_distance(&pb, &t.bbox) - w.giou * giou(&pxy, &txy)?;
            values.push(cost);
        }
    }
    Ok(CostMatrix::new(n, targets.len(), values)?)
}

/// Loss nodes; `total` is the one to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub class: NodeId,
    /// Mean L1 over matched pairs (zero without targets).
    pub l1: NodeId,
    /// Mean `1 - giou` over matched pairs (zero without targets).
    pub giou: NodeId,
    /// Predicted box coordinates that hit [`MIN_BOX_EXTENT`].
    pub clamped: usize,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            class: g.value(self.class).item(),
            l1: g.value(self.l1).item(),
            giou: g.value(self.giou).item(),
        }
    }
}

/// `w_class CE + w_l1 L1 + w_giou (1 - GIoU)`.
///
/// Cross-entropy is a weighted mean over all queries: matched queries are
/// scored against their target category with weight 1, unmatched ones against
/// background with `w.background`. Box terms average over matched pairs.
pub fn set_loss(
    g: &mut Graph,
    logits: NodeId,
    boxes: NodeId,
    targets: &[Target],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<LossTerms> {
    let n = g.value(logits).shape()[0];
    assignment.validate(n, targets.len())?;
    let matched = assignment.target_for_query(n);

    let labels: Vec<usize> = matched
        .iter()
        .map(|m| m.map_or(Category::Background, |t| targets[t].category).index())
        .collect();
    let weights: Vec<f64> = matched
        .iter()
        .map(|m| if m.is_some() { 1.0 } else { w.background })
        .collect();
    let weight_sum: f64 = weights.iter().sum();
    let log_probs = g.log_softmax(logits, 1)?;
    let picked = g.gather(log_probs, &labels)?;
    let class = if weight_sum > 0.0 {
        let wn = g.input(Tensor::vector(weights));
        let weighted = g.mul(picked, wn)?;
        let s = g.sum(weighted);
        g.scale(s, -1.0 / weight_sum)
    } else {
        g.input(Tensor::scalar(0.0))
    };

    let (l1, giou_term, clamped) = if targets.is_empty() {
        let z = g.input(Tensor::scalar(0.0));
        (z, z, 0)
    } else {
        box_losses(g, boxes, targets, assignment)?
    };

    let a = g.scale(class, w.class);
    let b = g.scale(l1, w.l1);
    let c = g.scale(giou_term, w.giou);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms {
        total,
        class,
        l1,
        giou: giou_term,
        clamped,
    })
}

fn box_losses(
    g: &mut Graph,
    boxes: NodeId,
    targets: &[Target],
    assignment: &Assignment,
) -> Result<(NodeId, NodeId, usize), TensorError> {
    let m = targets.len();
    let rows: Vec<usize> = assignment.query_for_target.clone();
    let selected = g.select_rows(boxes, &rows)?;
    let clamped = g.value(selected).data().iter().filter(|&&v| v < MIN_BOX_EXTENT).count();
    let pred = g.clamp_min(selected, MIN_BOX_EXTENT);
    let tdata: Vec<f64> = targets.iter().flat_map(|t| t.bbox.as_array()).collect();
    let tgt = g.input(Tensor::new(&[m, 4], tdata)?);

    let diff = g.sub(pred, tgt)?;
    let ad = g.abs(diff);
    let l1_sum = g.sum(ad);
    let l1 = g.scale(l1_sum, 1.0 / m as f64);

    let col = |g: &mut Graph, k: usize| g.slice_cols(pred, k, 1);
    let (cx, cy, bw, bh) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(bw, 0.5);
    let hh = g.scale(bh, 0.5);
    let x0 = g.sub(cx, hw)?;
    let x1 = g.add(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let y1 = g.add(cy, hh)?;
    let corners = |f: fn(&BoxCxCyWh) -> f64| Tensor::new(&[m, 1], targets.iter().map(|t| f(&t.bbox)).collect());
    let tx0 = g.input(corners(|b| b.cx - b.w / 2.0)?);
    let tx1 = g.input(corners(|b| b.cx + b.w / 2.0)?);
    let ty0 = g.input(corners(|b| b.cy - b.h / 2.0)?);
    let ty1 = g.input(corners(|b| b.cy + b.h / 2.0)?);
    let tarea = g.input(corners(|b| b.w * b.h)?);

    let ix0 = g.maximum(x0, tx0)?;
    let ix1 = g.minimum(x1, tx1)?;
    let iy0 = g.maximum(y0, ty0)?;
    let iy1 = g.minimum(y1, ty1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(bw, bh)?;
    let areas = g.add(parea, tarea)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div(inter, union)?;

    let ex0 = g.minimum(x0, tx0)?;
    let ex1 = g.maximum(x1, tx1)?;
    let ey0 = g.minimum(y0, ty0)?;
    let ey1 = g.maximum(y1, ty1)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let enclosing = g.mul(ew, eh)?;
    let slack = g.sub(enclosing, union)?;
    let penalty = g.div(slack, enclosing)?;
    let giou_v = g.sub(iou, penalty)?;
    let giou_sum = g.sum(giou_v);
    let mean_giou = g.scale(giou_sum, -1.0 / m as f64);
    let giou_loss = g.add_scalar(mean_giou, 1.0);
    Ok((l1, giou_loss, clamped))
}

/// Matching (gradient-free) followed by the differentiable set loss.
pub fn criterion(
    g: &mut Graph,
    logits: NodeId,
    boxes: NodeId,
    targets: &[Target],
    w: &LossWeights,
) -> Result<(LossTerms, Assignment)> {
    let preds = PredictionSet {
        logits: g.value(logits).clone(),
        boxes: g.value(boxes).clone(),
    };
    if targets.len() > preds.n_queries() {
        return Err(MatchError::TooManyTargets {
            targets: targets.len(),
            queries: preds.n_queries(),
        }
        .into());
    }
    let cost = matching_cost(&preds, targets, w)?;
    let assignment = hungarian(&cost)?;
    let terms = set_loss(g, logits, boxes, targets, &assignment, w)?;
    Ok((terms, assignment))
}
