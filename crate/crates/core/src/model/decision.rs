use crate::category::{Category, FrameLabel};
use crate::geometry::BoxCxCyWh;
use crate::model::PredictionSet;

/// A detected region: one query whose most likely category is an object class.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub query: usize,
    pub category: Category,
    pub probability: f64,
    pub bbox: BoxCxCyWh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDecision {
    pub frame_label: FrameLabel,
    pub regions: Vec<Region>,
}

impl FrameDecision {
    pub fn bleed_regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(|r| r.category == Category::Bleed)
    }
}

/// Argmax over the three probabilities. Ties prefer background, then non-bleed.
pub fn object_argmax(p: &[f64; 3]) -> Category {
    let order = [Category::Background, Category::NonBleed, Category::Bleed];
    let mut best = order[0];
    for &c in &order[1..] {
        if p[c.index()] > p[best.index()] {
            best = c;
        }
    }
    best
}

/// Emits a region for every query whose argmax category is bleed or non-bleed
/// with probability strictly above `threshold`; the frame is bleeding iff at
/// least one bleed region is emitted.
pub fn classify_frame(preds: &PredictionSet, threshold: f64) -> FrameDecision {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    let mut regions = Vec::new();
    for (q, p) in preds.probabilities().iter().enumerate() {
        let category = object_argmax(p);
        if category == Category::Background || p[category.index()] <= threshold {
            continue;
        }
        let [cx, cy, w, h] = preds.box_at(q);
        regions.push(Region {
            query: q,
            category,
            probability: p[category.index()],
            bbox: BoxCxCyWh { cx, cy, w, h },
        });
    }
    let frame_label = if regions.iter().any(|r| r.category == Category::Bleed) {
        FrameLabel::Bleeding
    } else {
        FrameLabel::NonBleeding
    };
    FrameDecision { frame_label, regions }
}
