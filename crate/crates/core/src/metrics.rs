//! Frame classification metrics and COCO-style detection metrics.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::category::{Category, FrameLabel};
use crate::data::LabeledBox;
use crate::error::{DataError, Error, Result};
use crate::geometry::{iou, BoxXyxy, CoordSystem};

/// IoU ladder 0.50, 0.55, ..., 0.95, written out so every value is the
/// nearest double to its decimal.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Frame confusion counts with bleeding as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn from_labels(preds: &[FrameLabel], gts: &[FrameLabel]) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::Other(format!(
                "{} predictions for {} ground-truth frames",
                preds.len(),
                gts.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut c = Self::default();
        for (p, g) in preds.iter().zip(gts) {
            match (p, g) {
                (FrameLabel::Bleeding, FrameLabel::Bleeding) => c.tp += 1,
                (FrameLabel::Bleeding, FrameLabel::NonBleeding) => c.fp += 1,
                (FrameLabel::NonBleeding, FrameLabel::NonBleeding) => c.tn += 1,
                (FrameLabel::NonBleeding, FrameLabel::Bleeding) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// `(accuracy, recall, f1)`; zero denominators give 0.
pub fn classification_metrics(preds: &[FrameLabel], gts: &[FrameLabel]) -> Result<(f64, f64, f64)> {
    let c = ConfusionCounts::from_labels(preds, gts)?;
    Ok((c.accuracy(), c.recall(), c.f1()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub category: Category,
    pub score: f64,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResults {
    pub image_id: String,
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<LabeledBox>,
}

/// Detections and ground truth for a set of images, in a fixed image order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionResultSet {
    pub images: Vec<ImageResults>,
}

/// Cumulative precision/recall after each detection in score order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// 101-point interpolated area: mean over recall levels `0.00..=1.00` of
    /// the best precision at recall at least that level.
    pub fn average_precision(&self) -> f64 {
        let mut envelope = self.precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut sum = 0.0;
        let mut idx = 0;
        for step in 0..=100 {
            let level = step as f64 / 100.0;
            while idx < self.recall.len() && self.recall[idx] < level {
                idx += 1;
            }
            if idx < envelope.len() {
                sum += envelope[idx];
            }
        }
        sum / 101.0
    }
}

struct Matched {
    /// TP flag per detection in global score order.
    tp: Vec<bool>,
    n_gt: usize,
    n_matched: usize,
}

impl DetectionResultSet {
    pub fn n_ground_truth(&self, category: Category) -> usize {
        self.images
            .iter()
            .map(|im| im.ground_truth.iter().filter(|g| g.category == category).count())
            .sum()
    }

    /// Object categories with at least one ground-truth region.
    pub fn categories_present(&self) -> Vec<Category> {
        Category::OBJECTS
            .into_iter()
            .filter(|&c| self.n_ground_truth(c) > 0)
            .collect()
    }

    /// Greedy matching in descending score order (ties: earlier image, then
    /// input order). Each detection takes the unmatched same-category GT of
    /// highest IoU, if that IoU reaches `iou_thr`.
    fn match_category(&self, category: Category, iou_thr: f64) -> Matched {
        let mut order: Vec<(usize, usize, f64)> = Vec::new();
        for (i, im) in self.images.iter().enumerate() {
            for (j, d) in im.detections.iter().enumerate() {
                if d.category == category {
                    order.push((i, j, d.score));
                }
            }
        }
        order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut used: Vec<Vec<bool>> = self
            .images
            .iter()
            .map(|im| vec![false; im.ground_truth.len()])
            .collect();
        let mut tp = Vec::with_capacity(order.len());
        let mut n_matched = 0;
        for &(i, j, _) in &order {
            let det = &self.images[i].detections[j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in self.images[i].ground_truth.iter().enumerate() {
                if g.category != category || used[i][k] {
                    continue;
                }
                let ov = iou(&det.bbox, &g.bbox).unwrap_or(0.0);
                if ov >= iou_thr && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((k, ov));
                }
            }
            if let Some((k, _)) = best {
                used[i][k] = true;
                n_matched += 1;
            }
            tp.push(best.is_some());
        }
        Matched {
            tp,
            n_gt: self.n_ground_truth(category),
            n_matched,
        }
    }

    pub fn pr_curve(&self, category: Category, iou_thr: f64) -> PrCurve {
        let m = self.match_category(category, iou_thr);
        let mut curve = PrCurve::default();
        let mut tps = 0usize;
        for (k, &hit) in m.tp.iter().enumerate() {
            tps += usize::from(hit);
            curve.precision.push(tps as f64 / (k + 1) as f64);
            curve.recall.push(ratio(tps, m.n_gt));
        }
        curve
    }
}

/// Average precision of one category at one IoU threshold. Zero when the
/// category has no ground truth.
pub fn ap_at_iou(results: &DetectionResultSet, category: Category, iou_thr: f64) -> f64 {
    if results.n_ground_truth(category) == 0 {
        return 0.0;
    }
    results.pr_curve(category, iou_thr).average_precision()
}

/// COCO AP@50 averaged over categories present in the ground truth.
pub fn ap50(results: &DetectionResultSet) -> f64 {
    mean(results.categories_present().iter().map(|&c| ap_at_iou(results, c, 0.5)))
}

/// Mean AP over categories present in the ground truth and [`IOU_THRESHOLDS`].
pub fn map_coco(results: &DetectionResultSet) -> f64 {
    let cats = results.categories_present();
    mean(
        cats.iter()
            .flat_map(|&c| IOU_THRESHOLDS.iter().map(move |&t| ap_at_iou(results, c, t))),
    )
}

/// Matched-GT fraction averaged over [`IOU_THRESHOLDS`] and categories present.
pub fn recall_over_thresholds(results: &DetectionResultSet) -> f64 {
    let cats = results.categories_present();
    mean(cats.iter().flat_map(|&c| {
        IOU_THRESHOLDS.iter().map(move |&t| {
            let m = results.match_category(c, t);
            ratio(m.n_matched, m.n_gt)
        })
    }))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// The six reported quantities plus bleed-only AP@50.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub map: f64,
    pub recall_50_95: f64,
    pub ap50_bleed: f64,
}

impl MetricsReport {
    pub fn compute(frame_preds: &[FrameLabel], frame_gts: &[FrameLabel], results: &DetectionResultSet) -> Result<Self> {
        let (accuracy, recall, f1) = classification_metrics(frame_preds, frame_gts)?;
        Ok(Self {
            accuracy,
            recall,
            f1,
            ap50: ap50(results),
            map: map_coco(results),
            recall_50_95: recall_over_thresholds(results),
            ap50_bleed: ap_at_iou(results, Category::Bleed, 0.5),
        })
    }

    /// `key=value` lines in the fixed report order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("recall", self.recall),
            ("f1", self.f1),
            ("ap50", self.ap50),
            ("map", self.map),
            ("recall_0.5_0.95", self.recall_50_95),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_key_values())
    }
}

fn parse_box(fields: &[&str], line: usize) -> std::result::Result<BoxXyxy, DataError> {
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(fields) {
        *slot = f.parse().map_err(|_| DataError::Manifest {
            line,
            msg: format!("invalid number {f:?}"),
        })?;
    }
    BoxXyxy::new(v[0], v[1], v[2], v[3], CoordSystem::Pixels).map_err(|_| DataError::DegenerateBox {
        x_min: v[0],
        y_min: v[1],
        x_max: v[2],
        y_max: v[3],
    })
}

fn parse_category(s: &str, line: usize) -> std::result::Result<Category, DataError> {
    match s.parse::<Category>() {
        Ok(c) if c != Category::Background => Ok(c),
        _ => Err(DataError::Manifest {
            line,
            msg: format!("unknown category {s:?}"),
        }),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split_whitespace().collect()))
}

/// Parses `image_id category x_min y_min x_max y_max` lines.
pub fn parse_ground_truth(text: &str) -> std::result::Result<Vec<(String, LabeledBox)>, DataError> {
    let mut out = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 6 {
            return Err(DataError::Manifest {
                line,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let category = parse_category(f[1], line)?;
        out.push((
            f[0].to_string(),
            LabeledBox {
                category,
                bbox: parse_box(&f[2..], line)?,
            },
        ));
    }
    Ok(out)
}

/// Parses `image_id category score x_min y_min x_max y_max` lines.
pub fn parse_results(text: &str) -> std::result::Result<Vec<(String, ScoredBox)>, DataError> {
    let mut out = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 7 {
            return Err(DataError::Manifest {
                line,
                msg: format!("expected 7 fields, found {}", f.len()),
            });
        }
        let category = parse_category(f[1], line)?;
        let score: f64 = f[2].parse().map_err(|_| DataError::Manifest {
            line,
            msg: format!("invalid score {:?}", f[2]),
        })?;
        if !(score > 0.0 && score <= 1.0) {
            return Err(DataError::Manifest {
                line,
                msg: format!("score {score} outside (0, 1]"),
            });
        }
        out.push((
            f[0].to_string(),
            ScoredBox {
                category,
                score,
                bbox: parse_box(&f[3..], line)?,
            },
        ));
    }
    Ok(out)
}

pub fn write_results(results: &DetectionResultSet) -> String {
    let mut s = String::new();
    for im in &results.images {
        for d in &im.detections {
            let b = &d.bbox;
            let _ = writeln!(
                s,
                "{} {} {:.9} {:.4} {:.4} {:.4} {:.4}",
                im.image_id, d.category, d.score, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
    }
    s
}

pub fn write_ground_truth(results: &DetectionResultSet) -> String {
    let mut s = String::new();
    for im in &results.images {
        for g in &im.ground_truth {
            let b = &g.bbox;
            let _ = writeln!(
                s,
                "{} {} {:.4} {:.4} {:.4} {:.4}",
                im.image_id, g.category, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
    }
    s
}

impl DetectionResultSet {
    /// Groups parsed lines by image id; images appear in first-seen order,
    /// ground truth first.
    pub fn from_lines(ground_truth: Vec<(String, LabeledBox)>, detections: Vec<(String, ScoredBox)>) -> Self {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut images: Vec<ImageResults> = Vec::new();
        let mut slot = |id: String, images: &mut Vec<ImageResults>| {
            *index.entry(id.clone()).or_insert_with(|| {
                images.push(ImageResults {
                    image_id: id,
                    ..ImageResults::default()
                });
                images.len() - 1
            })
        };
        for (id, g) in ground_truth {
            let i = slot(id, &mut images);
            images[i].ground_truth.push(g);
        }
        for (id, d) in detections {
            let i = slot(id, &mut images);
            images[i].detections.push(d);
        }
        Self { images }
    }

    /// Frame labels implied by the boxes: predicted bleeding iff a bleed
    /// detection scores above `threshold`, true bleeding iff a bleed GT exists.
    pub fn frame_labels(&self, threshold: f64) -> (Vec<FrameLabel>, Vec<FrameLabel>) {
        let label = |b: bool| {
            if b {
                FrameLabel::Bleeding
            } else {
                FrameLabel::NonBleeding
            }
        };
        self.images
            .iter()
            .map(|im| {
                (
                    label(
                        im.detections
                            .iter()
                            .any(|d| d.category == Category::Bleed && d.score > threshold),
                    ),
                    label(im.ground_truth.iter().any(|g| g.category == Category::Bleed)),
                )
            })
            .unzip()
    }
}
