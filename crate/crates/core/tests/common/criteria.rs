//! Acceptance checks shared by the integration tests and the acceptance
//! binary. Each returns a one-line summary on success.

use std::path::Path;
use std::time::{Duration, Instant};

use bleedscope::autodiff::{Graph, ParamGroup, ParamStore};
use bleedscope::category::{Category, FrameLabel};
use bleedscope::data::{
    parse_voc_xml, parse_yolo_txt, stratified_split, synthetic_corpus, write_voc_xml, write_yolo_txt, AnnotationRecord,
    LabeledBox, SyntheticSceneSpec,
};
use bleedscope::geometry::{giou, iou, BoxXyxy};
use bleedscope::loss::{matching_cost, set_loss, LossWeights, Target};
use bleedscope::matching::{hungarian, Assignment, CostMatrix};
use bleedscope::metrics::{ap_at_iou, DetectionResultSet, ImageResults, ScoredBox};
use bleedscope::model::{classify_frame, Detector, ModelConfig, PredictionSet};
use bleedscope::train::{
    adamw_step, decode_checkpoint, encode_checkpoint, fit, prepare_samples, train_epoch, AdamWConfig, EpochRecord,
    OptimizerState, Sample, TrainConfig,
};
use bleedscope::viz::{activation_map, inside_outside_means};
use bleedscope::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_model, check_op, primitive_cases, rng, ModelCheck};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

pub fn gradient_fidelity() -> Outcome {
    let mut worst_op = (0.0f64, "");
    let mut names = std::collections::BTreeSet::new();
    for seed in 0..GRAD_SEEDS {
        for (name, inputs, op) in primitive_cases(seed) {
            let e = check_op(&inputs, seed, op.as_ref());
            names.insert(name);
            if e > worst_op.0 {
                worst_op = (e, name);
            }
        }
    }
    ensure!(
        worst_op.0 < GRAD_TOL,
        "primitive {} relative error {:.3e}",
        worst_op.1,
        worst_op.0
    );
    let mut total = ModelCheck::default();
    for seed in 0..GRAD_SEEDS {
        let c = check_model(seed);
        ensure!(c.worst < GRAD_TOL, "model seed {seed}: relative error {:.3e}", c.worst);
        total.worst = total.worst.max(c.worst);
        total.checked += c.checked;
        total.kinks += c.kinks;
    }
    ensure!(
        total.kinks * 100 <= total.checked,
        "{} of {} coordinates straddle kinks",
        total.kinks,
        total.checked
    );
    Ok(format!(
        "{} primitives worst {:.2e}; model {} coords worst {:.2e} ({} kink crossings skipped)",
        names.len(),
        worst_op.0,
        total.checked,
        total.worst,
        total.kinks
    ))
}

/// Minimum over all injective target → query maps, summed in target order.
pub fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, t: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if t == cost.n_targets() {
            *best = best.min(acc);
            return;
        }
        for q in 0..cost.n_queries() {
            if !used[q] {
                used[q] = true;
                go(cost, t + 1, used, acc + cost.at(q, t), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.n_queries()], 0.0, &mut best);
    if cost.n_targets() == 0 {
        0.0
    } else {
        best
    }
}

pub fn assignment_cost(cost: &CostMatrix, a: &Assignment) -> f64 {
    a.query_for_target
        .iter()
        .enumerate()
        .fold(0.0, |acc, (t, &q)| acc + cost.at(q, t))
}

pub fn random_cost(r: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
    let integer = r.gen_bool(0.5);
    let values = (0..n * m)
        .map(|_| {
            if integer {
                r.gen_range(-5..=5) as f64
            } else {
                r.gen_range(-10.0..10.0)
            }
        })
        .collect();
    CostMatrix::new(n, m, values).unwrap()
}

pub fn hungarian_optimality(trials: usize) -> Outcome {
    let mut r = rng(2);
    for trial in 0..trials {
        let n = r.gen_range(1..=7);
        let m = r.gen_range(0..=n);
        let cost = random_cost(&mut r, n, m);
        let a = hungarian(&cost).map_err(|e| e.to_string())?;
        a.validate(n, m).map_err(|e| e.to_string())?;
        let got = assignment_cost(&cost, &a);
        let want = brute_force_min(&cost);
        ensure!(
            got == want,
            "trial {trial} ({n}x{m}): hungarian {got} vs brute force {want}"
        );
        ensure!(
            (a.total_cost - want).abs() <= 1e-9,
            "trial {trial}: reported total {} vs {want}",
            a.total_cost
        );
    }
    Ok(format!("{trials} random matrices up to 7x7 equal brute force"))
}

pub fn random_box(r: &mut ChaCha8Rng) -> BoxXyxy {
    let x0 = r.gen_range(-5.0..5.0);
    let y0 = r.gen_range(-5.0..5.0);
    BoxXyxy::pixels(x0, y0, x0 + r.gen_range(0.01..6.0), y0 + r.gen_range(0.01..6.0)).unwrap()
}

pub fn geometry_oracle(pairs: usize) -> Outcome {
    let a = BoxXyxy::pixels(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BoxXyxy::pixels(1.0, 1.0, 3.0, 3.0).unwrap();
    let i = iou(&a, &b).map_err(|e| e.to_string())?;
    let g = giou(&a, &b).map_err(|e| e.to_string())?;
    // Intersection 1, union 4 + 4 - 1 = 7, enclosure 9: giou = 1/7 - 2/9.
    ensure!((i - 1.0 / 7.0).abs() <= 1e-9, "iou {i}");
    ensure!((g + 5.0 / 63.0).abs() <= 1e-9, "giou {g}");
    let mut r = rng(3);
    for k in 0..pairs {
        let (p, q) = (random_box(&mut r), random_box(&mut r));
        let (i, g) = (iou(&p, &q).unwrap(), giou(&p, &q).unwrap());
        ensure!(g <= i, "pair {k}: giou {g} > iou {i} for {p:?} {q:?}");
        ensure!(
            (-1.0..=1.0).contains(&g) && (0.0..=1.0).contains(&i),
            "pair {k} out of range"
        );
    }
    Ok(format!("fixtures 1/7 and -5/63 hold; giou <= iou on {pairs} pairs"))
}

fn px(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXyxy {
    BoxXyxy::pixels(x0, y0, x1, y1).unwrap()
}

fn det(score: f64, bbox: BoxXyxy) -> ScoredBox {
    ScoredBox {
        category: Category::Bleed,
        score,
        bbox,
    }
}

fn gt(bbox: BoxXyxy) -> LabeledBox {
    LabeledBox {
        category: Category::Bleed,
        bbox,
    }
}

/// Two bleed regions; detections at scores 0.9 (hit), 0.8 (miss), 0.7 (hit).
pub fn ap_fixture() -> (DetectionResultSet, f64) {
    let results = DetectionResultSet {
        images: vec![ImageResults {
            image_id: "f".into(),
            detections: vec![
                det(0.9, px(0.0, 0.0, 10.0, 10.0)),
                det(0.8, px(50.0, 50.0, 60.0, 60.0)),
                det(0.7, px(20.0, 20.0, 30.0, 30.0)),
            ],
            ground_truth: vec![gt(px(0.0, 0.0, 10.0, 10.0)), gt(px(20.0, 20.0, 30.0, 30.0))],
        }],
    };
    // Sweep: (P, R) = (1, 1/2), (1/2, 1/2), (2/3, 1). The interpolated
    // precision is 1 at the 51 recall levels 0..=0.50 and 2/3 at the 50
    // levels 0.51..=1.00.
    let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    (results, expected)
}

pub fn random_results(r: &mut ChaCha8Rng) -> DetectionResultSet {
    let images = (0..r.gen_range(1..=4))
        .map(|i| {
            let ground_truth = (0..r.gen_range(0..=3)).map(|_| gt(random_box(r))).collect();
            let detections = (0..r.gen_range(0..=6))
                .map(|_| ScoredBox {
                    category: if r.gen_bool(0.8) {
                        Category::Bleed
                    } else {
                        Category::NonBleed
                    },
                    score: r.gen_range(0.0..1.0),
                    bbox: random_box(r),
                })
                .collect();
            ImageResults {
                image_id: format!("img{i}"),
                detections,
                ground_truth,
            }
        })
        .collect();
    DetectionResultSet { images }
}

pub fn metric_oracle(trials: usize) -> Outcome {
    let (fixture, expected) = ap_fixture();
    let ap = ap_at_iou(&fixture, Category::Bleed, 0.5);
    ensure!((ap - expected).abs() <= 1e-6, "fixture AP {ap} vs {expected}");
    let thresholds: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
    let mut r = rng(4);
    for trial in 0..trials {
        let res = random_results(&mut r);
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| ap_at_iou(&res, Category::Bleed, t))
            .collect();
        for w in aps.windows(2) {
            ensure!(w[1] <= w[0], "trial {trial}: AP rises with threshold: {aps:?}");
        }
    }
    Ok(format!("fixture AP {ap:.6}; monotone over {trials} fuzzed sets"))
}

fn random_preds(r: &mut ChaCha8Rng, n: usize) -> PredictionSet {
    PredictionSet {
        logits: Tensor::new(&[n, 3], (0..n * 3).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap(),
        boxes: Tensor::new(&[n, 4], (0..n * 4).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap(),
    }
}

fn loss_with(preds: &PredictionSet, targets: &[Target], a: &Assignment, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let l = g.input(preds.logits.clone());
    let b = g.input(preds.boxes.clone());
    let terms = set_loss(&mut g, l, b, targets, a, w).unwrap();
    g.value(terms.total).item()
}

fn pairs(a: &Assignment) -> Vec<(usize, usize)> {
    let mut p: Vec<_> = a.pairs().collect();
    p.sort_unstable();
    p
}

pub fn loss_invariants(trials: usize) -> Outcome {
    let w = LossWeights::default();
    let mut r = rng(5);
    for trial in 0..trials {
        let n = r.gen_range(1..=8);
        let targets = super::random_targets(&mut r, n);
        let preds = random_preds(&mut r, n);
        let a = hungarian(&matching_cost(&preds, &targets, &w).unwrap()).unwrap();
        let base = loss_with(&preds, &targets, &a, &w);

        // Relabel queries and targets, carrying the assignment along.
        let mut qperm: Vec<usize> = (0..n).collect();
        qperm.shuffle(&mut r);
        let mut tperm: Vec<usize> = (0..targets.len()).collect();
        tperm.shuffle(&mut r);
        let rows: Vec<Vec<f64>> = qperm.iter().map(|&q| preds.logits.row(q).to_vec()).collect();
        let brows: Vec<Vec<f64>> = qperm.iter().map(|&q| preds.boxes.row(q).to_vec()).collect();
        let permuted = PredictionSet {
            logits: Tensor::matrix(&rows).unwrap(),
            boxes: Tensor::matrix(&brows).unwrap(),
        };
        let new_pos = |q: usize| qperm.iter().position(|&x| x == q).unwrap();
        let ptargets: Vec<Target> = tperm.iter().map(|&t| targets[t]).collect();
        let pa = Assignment {
            query_for_target: tperm.iter().map(|&t| new_pos(a.query_for_target[t])).collect(),
            total_cost: a.total_cost,
        };
        let moved = loss_with(&permuted, &ptargets, &pa, &w);
        ensure!(
            (moved - base).abs() <= 1e-12,
            "trial {trial}: permuted loss {moved} vs {base}"
        );

        let c = r.gen_range(0.1..10.0);
        let scaled = hungarian(&matching_cost(&preds, &targets, &w.scaled(c)).unwrap()).unwrap();
        ensure!(
            pairs(&scaled) == pairs(&a),
            "trial {trial}: scaling weights by {c} changed the matching"
        );

        let k = r.gen_range(-50.0..50.0);
        let cost = matching_cost(&preds, &targets, &w).unwrap();
        let shifted = hungarian(&cost.map(|v| v + k)).unwrap();
        ensure!(
            pairs(&shifted) == pairs(&a),
            "trial {trial}: shifting costs by {k} changed the matching"
        );
    }
    Ok(format!(
        "{trials} trials: permutation within 1e-12, matching fixed under scaling and shifts"
    ))
}

/// Logit rows `[bleed, non-bleed, background]` for which the softmax is
/// exact: `0` against two entries `ln(0.5)` gives `1 / (1 + 0.5 + 0.5)`.
pub fn half_probability_row(winner: Category) -> [f64; 3] {
    let low = 0.5f64.ln();
    let mut row = [low; 3];
    row[winner.index()] = 0.0;
    row
}

/// Independent statement of the decision rule.
pub fn oracle_frame_label(probs: &[[f64; 3]], threshold: f64) -> FrameLabel {
    let bleeding = probs.iter().any(|p| {
        let (b, nb, bg) = (p[0], p[1], p[2]);
        b > nb && b > bg && b > threshold
    });
    if bleeding {
        FrameLabel::Bleeding
    } else {
        FrameLabel::NonBleeding
    }
}

pub fn decision_rule() -> Outcome {
    // Exactly one half: never enough.
    for winner in [Category::Bleed, Category::NonBleed, Category::Background] {
        let preds = PredictionSet {
            logits: Tensor::matrix(&[half_probability_row(winner).to_vec()]).unwrap(),
            boxes: Tensor::matrix(&[vec![0.5, 0.5, 0.2, 0.2]]).unwrap(),
        };
        let p = preds.probabilities()[0][winner.index()];
        ensure!(p == 0.5, "construction gave {p}, not exactly 0.5");
        let d = classify_frame(&preds, 0.5);
        ensure!(d.regions.is_empty(), "{winner:?} at exactly 0.5 emitted a region");
        ensure!(
            d.frame_label == FrameLabel::NonBleeding,
            "{winner:?} at exactly 0.5 flagged bleeding"
        );
    }

    // Every combination of up to three queries over a grid of rows.
    let levels = [-2.0, -0.5, 0.0, 0.5, 2.0];
    let mut rows = Vec::new();
    for &a in &levels {
        for &b in &levels {
            for &c in &levels {
                rows.push([a, b, c]);
            }
        }
    }
    rows.extend(Category::OBJECTS.iter().map(|&c| half_probability_row(c)));
    rows.push([1.0, 1.0, -5.0]);
    let mut checked = 0;
    let mut bleeding = 0;
    for n in 1..=3usize {
        let mut idx = vec![0usize; n];
        loop {
            let logits: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].to_vec()).collect();
            let preds = PredictionSet {
                logits: Tensor::matrix(&logits).unwrap(),
                boxes: Tensor::new(&[n, 4], [0.5, 0.5, 0.2, 0.2].repeat(n)).unwrap(),
            };
            let probs = preds.probabilities();
            for threshold in [0.3, 0.5, 0.7] {
                let d = classify_frame(&preds, threshold);
                let want = oracle_frame_label(&probs, threshold);
                ensure!(
                    d.frame_label == want,
                    "rows {logits:?} at {threshold}: {:?} vs {want:?}",
                    d.frame_label
                );
                for reg in &d.regions {
                    ensure!(
                        reg.probability > threshold,
                        "region at {} <= {threshold}",
                        reg.probability
                    );
                    ensure!(reg.category != Category::Background, "background region emitted");
                }
                checked += 1;
                bleeding += (want == FrameLabel::Bleeding) as usize;
            }
            // Odometer over `rows^n`.
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < rows.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    Ok(format!(
        "{checked} frames ({bleeding} bleeding); exactly 0.5 is rejected"
    ))
}

pub fn random_record(r: &mut ChaCha8Rng, i: usize) -> AnnotationRecord {
    let (w, h) = (r.gen_range(32..=640usize), r.gen_range(32..=640usize));
    let regions = (0..r.gen_range(0..=4))
        .map(|_| {
            let bw = r.gen_range(2.0..w as f64 / 2.0);
            let bh = r.gen_range(2.0..h as f64 / 2.0);
            let x0 = r.gen_range(0.0..w as f64 - bw);
            let y0 = r.gen_range(0.0..h as f64 - bh);
            LabeledBox {
                category: if r.gen_bool(0.5) {
                    Category::Bleed
                } else {
                    Category::NonBleed
                },
                bbox: px(x0, y0, x0 + bw, y0 + bh),
            }
        })
        .collect();
    AnnotationRecord::from_regions(format!("frame{i}"), format!("images/frame{i}.png"), regions, (w, h)).unwrap()
}

fn boxes_close(a: &[LabeledBox], b: &[LabeledBox], tol: f64, scale: (f64, f64)) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| {
            p.category == q.category
                && [
                    (p.bbox.x_min - q.bbox.x_min) / scale.0,
                    (p.bbox.x_max - q.bbox.x_max) / scale.0,
                    (p.bbox.y_min - q.bbox.y_min) / scale.1,
                    (p.bbox.y_max - q.bbox.y_max) / scale.1,
                ]
                .iter()
                .all(|d| d.abs() <= tol)
        })
}

pub fn format_round_trips(records: usize) -> Outcome {
    let mut r = rng(8);
    for i in 0..records {
        let rec = random_record(&mut r, i);
        let size = (rec.image_size.0 as f64, rec.image_size.1 as f64);

        let voc = parse_voc_xml(&write_voc_xml(&rec)).map_err(|e| e.to_string())?;
        ensure!(voc.image_size == rec.image_size, "record {i}: size changed");
        ensure!(voc.frame_label == rec.frame_label, "record {i}: frame label changed");
        ensure!(
            boxes_close(&voc.regions, &rec.regions, 1.0, (1.0, 1.0)),
            "record {i}: VOC moved a box by > 1 px"
        );

        let yolo = parse_yolo_txt(&write_yolo_txt(&rec), rec.image_size).map_err(|e| e.to_string())?;
        ensure!(
            boxes_close(&yolo, &rec.regions, 1e-6, size),
            "record {i}: YOLO moved a box by > 1e-6"
        );

        // VOC -> internal -> YOLO -> internal -> VOC.
        let via = parse_yolo_txt(&write_yolo_txt(&voc), voc.image_size).map_err(|e| e.to_string())?;
        let back = AnnotationRecord::from_regions(voc.image_id.clone(), voc.image_path.clone(), via, voc.image_size)
            .map_err(|e| e.to_string())?;
        let again = parse_voc_xml(&write_voc_xml(&back)).map_err(|e| e.to_string())?;
        ensure!(again == voc, "record {i}: VOC -> YOLO -> VOC is not the identity");
    }

    let mut model = Detector::new(ModelConfig::tiny(), 11).unwrap();
    let mut state = OptimizerState::new(model.params());
    let spec = SyntheticSceneSpec::default();
    let samples = prepare_samples(synthetic_corpus(&spec, 3), model.config().input_size).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train_epoch(&mut model, &mut state, &samples, &cfg, 1).map_err(|e| e.to_string())?;
    let (m2, s2) = decode_checkpoint(&encode_checkpoint(&model, &state)).map_err(|e| e.to_string())?;
    ensure!(m2.config() == model.config(), "checkpoint changed the model config");
    ensure!(s2.step == state.step && s2.step > 0, "optimizer step not preserved");
    let bits = |ts: &[Tensor]| -> Vec<u64> { ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let params = |s: &ParamStore| -> Vec<Tensor> { s.iter().map(|p| p.value.clone()).collect() };
    ensure!(
        bits(&params(m2.params())) == bits(&params(model.params())),
        "parameters not bit-exact"
    );
    ensure!(
        bits(&s2.m) == bits(&state.m) && bits(&s2.v) == bits(&state.v),
        "moments not bit-exact"
    );
    let names = |s: &ParamStore| -> Vec<(String, ParamGroup)> { s.iter().map(|p| (p.name.clone(), p.group)).collect() };
    ensure!(names(m2.params()) == names(model.params()), "parameter table changed");
    let x = &samples[0].image;
    let (p1, p2) = (model.predict(x).unwrap(), m2.predict(x).unwrap());
    ensure!(
        bits(&[p1.logits, p1.boxes]) == bits(&[p2.logits, p2.boxes]),
        "reloaded forward differs"
    );
    Ok(format!(
        "{records} records within 1 px / 1e-6; checkpoint bit-exact over {} scalars",
        model.params().num_scalars()
    ))
}

pub fn balanced_records(per_label: usize) -> Vec<AnnotationRecord> {
    (0..2 * per_label)
        .map(|i| {
            let regions = if i % 2 == 0 {
                vec![gt(px(1.0, 1.0, 5.0, 5.0))]
            } else {
                vec![]
            };
            AnnotationRecord::from_regions(format!("r{i}"), format!("r{i}.ppm"), regions, (8, 8)).unwrap()
        })
        .collect()
}

pub fn split_conformance() -> Outcome {
    let records = balanced_records(1309);
    let count = |rs: &[AnnotationRecord], l: FrameLabel| rs.iter().filter(|r| r.frame_label == l).count();
    let (train, val) = stratified_split(&records, 0.8, 42).map_err(|e| e.to_string())?;
    for l in [FrameLabel::Bleeding, FrameLabel::NonBleeding] {
        ensure!(count(&train, l) == 1047, "{l:?}: {} train", count(&train, l));
        ensure!(count(&val, l) == 262, "{l:?}: {} val", count(&val, l));
    }
    let mut ids: Vec<&str> = train.iter().chain(&val).map(|r| r.image_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ensure!(ids.len() == records.len(), "split is not a partition");
    let (t2, v2) = stratified_split(&records, 0.8, 42).map_err(|e| e.to_string())?;
    ensure!(t2 == train && v2 == val, "same seed gave a different split");
    let (t3, _) = stratified_split(&records, 0.8, 43).map_err(|e| e.to_string())?;
    ensure!(t3 != train, "different seeds gave the same split");
    Ok("1309+1309 -> 1047/262 per label, reproducible".into())
}

/// The synthetic end-to-end configuration.
pub struct EndToEnd {
    pub scenes: usize,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for EndToEnd {
    fn default() -> Self {
        Self {
            scenes: 2000,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

pub struct TrainedRun {
    pub model: Detector,
    pub log: Vec<String>,
    pub history: Vec<EpochRecord>,
    pub val: Vec<Sample>,
    pub elapsed: Duration,
}

pub fn synthetic_split(scenes: usize, input_size: usize) -> (Vec<Sample>, Vec<Sample>) {
    let corpus = synthetic_corpus(&SyntheticSceneSpec::default(), scenes);
    let records: Vec<AnnotationRecord> = corpus.iter().map(|(_, r)| r.clone()).collect();
    let (train_recs, _) = stratified_split(&records, 0.8, 0).unwrap();
    let in_train: std::collections::HashSet<&str> = train_recs.iter().map(|r| r.image_id.as_str()).collect();
    let (train, val): (Vec<_>, Vec<_>) = corpus
        .into_iter()
        .partition(|(_, r)| in_train.contains(r.image_id.as_str()));
    (
        prepare_samples(train, input_size).unwrap(),
        prepare_samples(val, input_size).unwrap(),
    )
}

pub fn train_run(setup: &EndToEnd, checkpoint: Option<&Path>) -> Result<TrainedRun, String> {
    let (train, val) = synthetic_split(setup.scenes, setup.model.input_size);
    let t0 = Instant::now();
    let mut model = Detector::new(setup.model.clone(), setup.train.seed).map_err(|e| e.to_string())?;
    let mut state = OptimizerState::new(model.params());
    let mut log = Vec::new();
    let history = fit(&mut model, &mut state, &train, &val, &setup.train, |rec, _, _| {
        let line = rec.to_log_line();
        eprintln!("  {line}");
        log.push(line);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    if let Some(path) = checkpoint {
        bleedscope::train::save_checkpoint(path, &model, &state).map_err(|e| e.to_string())?;
    }
    Ok(TrainedRun {
        model,
        log,
        history,
        val,
        elapsed,
    })
}

pub const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);

pub fn end_to_end(first: &TrainedRun, second: &TrainedRun) -> Outcome {
    let report = first
        .history
        .last()
        .and_then(|h| h.report)
        .ok_or("no validation report")?;
    ensure!(
        first.log == second.log,
        "seeded runs diverged at epoch {}",
        first
            .log
            .iter()
            .zip(&second.log)
            .position(|(a, b)| a != b)
            .map_or(0, |p| p + 1)
    );
    ensure!(
        report.accuracy >= 0.90,
        "validation accuracy {:.4} < 0.90",
        report.accuracy
    );
    ensure!(report.ap50_bleed >= 0.50, "bleed AP@50 {:.4} < 0.50", report.ap50_bleed);
    ensure!(
        first.elapsed < E2E_BUDGET,
        "training took {:.1} min",
        first.elapsed.as_secs_f64() / 60.0
    );
    Ok(format!(
        "{} epochs in {:.1} min: accuracy {:.4}, bleed AP@50 {:.4}, AP@50 {:.4}, mAP {:.4}; logs identical",
        first.history.len(),
        first.elapsed.as_secs_f64() / 60.0,
        report.accuracy,
        report.ap50_bleed,
        report.ap50,
        report.map
    ))
}

pub fn explanation_sanity(model: &Detector, val: &[Sample], cfg: &TrainConfig) -> Outcome {
    let scenes: Vec<&Sample> = val
        .iter()
        .filter(|s| s.record.frame_label == FrameLabel::Bleeding)
        .take(20)
        .collect();
    ensure!(scenes.len() == 20, "only {} bleeding validation scenes", scenes.len());
    let mut wins = 0;
    for s in &scenes {
        let input = bleedscope::train::eval_input(s, cfg).map_err(|e| e.to_string())?;
        let map = activation_map(model, &input, None).map_err(|e| e.to_string())?;
        let bleed: Vec<LabeledBox> = s
            .record
            .regions
            .iter()
            .filter(|r| r.category == Category::Bleed)
            .copied()
            .collect();
        if let (Some(inside), Some(outside)) = inside_outside_means(&map, &bleed, s.record.image_size) {
            wins += (inside > outside) as usize;
        }
    }
    ensure!(wins >= 15, "inside mean exceeds outside on only {wins} of 20 scenes");
    Ok(format!("inside > outside on {wins} of 20 scenes"))
}

/// Update magnitudes of a backbone and a head parameter fed the same gradient.
pub fn group_rate_ratio() -> f64 {
    let mut store = ParamStore::new();
    store.add("b", ParamGroup::Backbone, Tensor::vector(vec![0.3, -0.7]));
    store.add("h", ParamGroup::Head, Tensor::vector(vec![0.3, -0.7]));
    store.zero_grad();
    for p in store.iter_mut() {
        p.grad = Some(Tensor::vector(vec![0.25, -1.5]));
    }
    let before: Vec<Vec<f64>> = store.iter().map(|p| p.value.data().to_vec()).collect();
    let mut state = OptimizerState::new(&store);
    let cfg = AdamWConfig {
        lr_backbone: 1e-6,
        lr_transformer: 1e-5,
        lr_head: 5e-5,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    adamw_step(&mut store, &mut state, &cfg).unwrap();
    let delta = |i: usize| -> f64 {
        let p = store.iter().nth(i).unwrap();
        (p.value.data()[0] - before[i][0]).abs()
    };
    delta(1) / delta(0)
}
