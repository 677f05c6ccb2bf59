//! Optimizer, epoch loop, validation and checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, MAGIC, VERSION,
};
pub use config::{apply_setting, parse_config, write_config, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};

use crate::autodiff::Graph;
use crate::category::{Category, FrameLabel};
use crate::data::{augment, image_size, normalize, resize_bilinear, AnnotationRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoxCxCyWh, BoxXyxy};
use crate::loss::{criterion, Target};
use crate::metrics::{DetectionResultSet, ImageResults, MetricsReport, ScoredBox};
use crate::model::{classify_frame, Detector, PredictionSet};
use crate::tensor::Tensor;

/// An image already resized to the model input, with its annotation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub record: AnnotationRecord,
    pub targets: Vec<Target>,
}

impl Sample {
    /// Resizes `image` to `input_size` square if needed. Boxes stay in the
    /// record's original pixel frame; targets are normalized so they are
    /// unaffected by the resize.
    pub fn new(image: Tensor, record: AnnotationRecord, input_size: usize) -> Result<Self> {
        let (w, h) = image_size(&image)?;
        let image = if (w, h) == (input_size, input_size) {
            image
        } else {
            resize_bilinear(&image, input_size, input_size)?
        };
        let targets = record.targets();
        Ok(Self { image, record, targets })
    }
}

pub fn prepare_samples(pairs: Vec<(Tensor, AnnotationRecord)>, input_size: usize) -> Result<Vec<Sample>> {
    pairs
        .into_iter()
        .map(|(img, rec)| Sample::new(img, rec, input_size))
        .collect()
}

/// Per-epoch training means.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Predicted boxes whose width or height hit the minimum-extent clamp.
    pub clamped: usize,
    pub images: usize,
    pub steps: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stats: EpochStats,
    pub report: Option<MetricsReport>,
}

impl EpochRecord {
    /// Space-separated `key=value` pairs; validation fields appear only on
    /// epochs that ran validation.
    pub fn to_log_line(&self) -> String {
        let s = &self.stats;
        let mut line = format!(
            "epoch={} loss={:.9} loss_class={:.9} loss_l1={:.9} loss_giou={:.9} clamped={} steps={}",
            self.epoch, s.loss, s.class, s.l1, s.giou, s.clamped, s.steps
        );
        if let Some(r) = &self.report {
            let _ = write!(
                line,
                " accuracy={:.6} recall={:.6} f1={:.6} ap50={:.6} map={:.6} recall_0.5_0.95={:.6} ap50_bleed={:.6}",
                r.accuracy, r.recall, r.f1, r.ap50, r.map, r.recall_50_95, r.ap50_bleed
            );
        }
        line
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Augmentation randomness depends only on (seed, epoch, sample), so the
/// result is the same whether augmentation runs inline or ahead of time.
fn augment_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(sample as u64);
    rng
}

fn training_input(sample: &Sample, cfg: &TrainConfig, epoch: usize, index: usize) -> Result<Tensor> {
    let mut rng = augment_rng(cfg.augmentation.seed, epoch, index);
    let (img, _) = augment(&sample.image, &sample.record.regions, &cfg.augmentation, &mut rng)?;
    Ok(img)
}

struct Step<'a> {
    model: &'a mut Detector,
    state: &'a mut OptimizerState,
    cfg: &'a TrainConfig,
    stats: EpochStats,
    in_batch: usize,
    batch_len: usize,
}

impl Step<'_> {
    fn image(&mut self, sample: &Sample, input: &Tensor, batch_len: usize) -> Result<()> {
        if self.in_batch == 0 {
            self.model.params_mut().zero_grad();
            self.batch_len = batch_len;
        }
        let mut g = Graph::new();
        let pass = self.model.forward(&mut g, input)?;
        let (terms, _) = criterion(&mut g, pass.logits, pass.boxes, &sample.targets, &self.cfg.loss)?;
        let v = terms.values(&g);
        if !v.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                image_id: sample.record.image_id.clone(),
            });
        }
        let scaled = g.scale(terms.total, 1.0 / self.batch_len as f64);
        g.backward(scaled, self.model.params_mut())?;
        let s = &mut self.stats;
        s.loss += v.total;
        s.class += v.class;
        s.l1 += v.l1;
        s.giou += v.giou;
        s.clamped += terms.clamped;
        s.images += 1;
        self.in_batch += 1;
        if self.in_batch == self.batch_len {
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(self.model.params_mut(), max);
            }
            adamw_step(self.model.params_mut(), self.state, &self.cfg.adamw())?;
            self.stats.steps += 1;
            self.in_batch = 0;
        }
        Ok(())
    }
}

/// One seeded, shuffled pass over `samples` with an optimizer step every
/// `batch_size` images (the final batch may be shorter).
pub fn train_epoch(
    model: &mut Detector,
    state: &mut OptimizerState,
    samples: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = epoch_order(samples.len(), cfg.seed, epoch);
    let bs = cfg.batch_size.max(1);
    let batch_len = |pos: usize| bs.min(order.len() - pos / bs * bs);
    let mut step = Step {
        model,
        state,
        cfg,
        stats: EpochStats::default(),
        in_batch: 0,
        batch_len: 0,
    };
    if cfg.prefetch == 0 {
        for (pos, &i) in order.iter().enumerate() {
            let input = training_input(&samples[i], cfg, epoch, i)?;
            step.image(&samples[i], &input, batch_len(pos))?;
        }
    } else {
        thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Tensor>>(cfg.prefetch);
            let order_ref = &order;
            scope.spawn(move || {
                for &i in order_ref {
                    if tx.send(training_input(&samples[i], cfg, epoch, i)).is_err() {
                        break;
                    }
                }
            });
            for (pos, &i) in order.iter().enumerate() {
                let input = rx.recv().expect("producer sends one item per sample")?;
                step.image(&samples[i], &input, batch_len(pos))?;
            }
            Ok(())
        })?;
    }
    let mut s = step.stats;
    let n = s.images as f64;
    s.loss /= n;
    s.class /= n;
    s.l1 /= n;
    s.giou /= n;
    Ok(s)
}

/// Model input for evaluation: the stored image, normalized only.
pub fn eval_input(sample: &Sample, cfg: &TrainConfig) -> Result<Tensor> {
    Ok(normalize(&sample.image, &cfg.augmentation.normalization)?)
}

/// One scored box per query, labelled with the more likely object category;
/// boxes are clipped to the image and expressed in pixels of `image_size`.
pub fn query_detections(preds: &PredictionSet, image_size: (usize, usize)) -> Vec<ScoredBox> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::with_capacity(preds.n_queries());
    for (q, p) in preds.probabilities().iter().enumerate() {
        let (category, score) = if p[Category::Bleed.index()] >= p[Category::NonBleed.index()] {
            (Category::Bleed, p[Category::Bleed.index()])
        } else {
            (Category::NonBleed, p[Category::NonBleed.index()])
        };
        if let Some(bbox) = normalized_to_pixels(preds.box_at(q), w, h) {
            out.push(ScoredBox { category, score, bbox });
        }
    }
    out
}

/// Converts a normalized `(cx, cy, w, h)` to a clipped pixel box, or `None`
/// if clipping leaves nothing.
pub fn normalized_to_pixels(b: [f64; 4], width: f64, height: f64) -> Option<BoxXyxy> {
    let [cx, cy, bw, bh] = b;
    let c = BoxCxCyWh { cx, cy, w: bw, h: bh };
    let x0 = (c.cx - c.w / 2.0).clamp(0.0, 1.0) * width;
    let x1 = (c.cx + c.w / 2.0).clamp(0.0, 1.0) * width;
    let y0 = (c.cy - c.h / 2.0).clamp(0.0, 1.0) * height;
    let y1 = (c.cy + c.h / 2.0).clamp(0.0, 1.0) * height;
    BoxXyxy::pixels(x0, y0, x1, y1).ok()
}

/// Predictions and frame decision for one sample.
pub fn predict_sample(model: &Detector, sample: &Sample, cfg: &TrainConfig) -> Result<(PredictionSet, FrameLabel)> {
    let preds = model.predict(&eval_input(sample, cfg)?)?;
    let label = classify_frame(&preds, cfg.threshold).frame_label;
    Ok((preds, label))
}

/// Validation pass: frame decisions from [`classify_frame`], detection
/// metrics from every query's scored box. Parameters are not touched.
pub fn evaluate(
    model: &Detector,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(MetricsReport, DetectionResultSet)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut frame_preds = Vec::with_capacity(samples.len());
    let mut frame_gts = Vec::with_capacity(samples.len());
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let (preds, label) = predict_sample(model, s, cfg)?;
        frame_preds.push(label);
        frame_gts.push(s.record.frame_label);
        images.push(ImageResults {
            image_id: s.record.image_id.clone(),
            detections: query_detections(&preds, s.record.image_size),
            ground_truth: s.record.regions.clone(),
        });
    }
    let results = DetectionResultSet { images };
    let report = MetricsReport::compute(&frame_preds, &frame_gts, &results)?;
    Ok((report, results))
}

/// Runs `cfg.epochs` epochs, validating every `cfg.eval_every` epochs and
/// after the last one. `on_epoch` sees each record as soon as it exists.
pub fn fit(
    model: &mut Detector,
    state: &mut OptimizerState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Detector, &OptimizerState) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(model, state, train, cfg, epoch)?;
        let validate_now = !val.is_empty() && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs);
        let report = if validate_now {
            Some(evaluate(model, val, cfg)?.0)
        } else {
            None
        };
        let rec = EpochRecord { epoch, stats, report };
        on_epoch(&rec, model, state)?;
        history.push(rec);
    }
    Ok(history)
}
