//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod criteria;

use bleedscope::autodiff::{Graph, NodeId, ParamStore};
use bleedscope::category::Category;
use bleedscope::geometry::BoxCxCyWh;
use bleedscope::loss::{criterion, LossWeights, Target};
use bleedscope::model::{Detector, ModelConfig};
use bleedscope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator, so gradients that are zero up to
/// rounding compare on an absolute scale instead of dividing by ~0. One ulp
/// of a loss near 10 divided by the step is ~2e-10, far below `1e-4 * floor`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` whose magnitude and pairwise gaps avoid
/// `margin`-neighbourhoods of `kinks` (so a central difference never
/// straddles a non-differentiable point).
pub fn smooth_tensor(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    smooth_tensor(rng, shape, &[], 0.0)
}

/// Builds `sum(w * f(inputs))` for fixed random weights `w` so every output
/// element contributes a distinct cotangent.
fn weighted_scalar(g: &mut Graph, out: NodeId, weights: &Tensor) -> NodeId {
    let w = g.input(weights.clone());
    let flat_out = g.reshape(out, &[1, weights.numel()]).unwrap();
    let flat_w = g.reshape(w, &[1, weights.numel()]).unwrap();
    let prod = g.mul(flat_out, flat_w).unwrap();
    g.sum(prod)
}

/// Gradient check of a graph function of plain inputs. Returns the largest
/// element-wise relative error between backward and central differences.
pub fn check_op(inputs: &[Tensor], seed: u64, f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let forward = |vals: &[Tensor], weights: Option<&Tensor>| -> (Graph, NodeId, Vec<NodeId>, Tensor) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.input(v.clone())).collect();
        let out = f(&mut g, &ids);
        let out_val = g.value(out).clone();
        let w = match weights {
            Some(w) => w.clone(),
            None => random_tensor(&mut rng(seed ^ 0xABCD), out_val.shape()),
        };
        let s = weighted_scalar(&mut g, out, &w);
        (g, s, ids, w)
    };
    let (mut g, s, ids, w) = forward(inputs, None);
    g.backward(s, &mut ParamStore::new()).unwrap();
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, v)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[e] += delta;
                let (g, s, _, _) = forward(&vals, Some(&w));
                g.value(s).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], numeric));
        }
    }
    worst
}

pub fn tiny_gradcheck_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Random targets for the tiny detector: 1..=min(3, queries) boxes.
pub fn random_targets(rng: &mut ChaCha8Rng, n_queries: usize) -> Vec<Target> {
    let m = rng.gen_range(1..=n_queries.min(3));
    (0..m)
        .map(|_| Target {
            category: if rng.gen_bool(0.5) {
                Category::Bleed
            } else {
                Category::NonBleed
            },
            bbox: BoxCxCyWh {
                cx: rng.gen_range(0.25..0.75),
                cy: rng.gen_range(0.25..0.75),
                w: rng.gen_range(0.1..0.4),
                h: rng.gen_range(0.1..0.4),
            },
        })
        .collect()
}

fn model_loss(model: &Detector, image: &Tensor, targets: &[Target], w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, image).unwrap();
    let (terms, _) = criterion(&mut g, pass.logits, pass.boxes, targets, w).unwrap();
    g.value(terms.total).item()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ModelCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates where the two one-sided differences disagree, i.e. the
    /// step crossed a ReLU kink or a matching change; these are reported,
    /// not compared.
    pub kinks: usize,
}

/// Gradient check of image → detector → matching → set loss for every
/// parameter scalar and every pixel.
pub fn check_model(seed: u64) -> ModelCheck {
    let mut r = rng(seed);
    let mut model = Detector::new(tiny_gradcheck_config(), seed).unwrap();
    let size = model.config().input_size;
    let image = random_tensor(&mut r, &[3, size, size]);
    let targets = random_targets(&mut r, model.config().n_queries);
    let w = LossWeights::default();

    // Forward through the public stages so the image node is ours.
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let (features, _) = model.extract_features(&mut g, x).unwrap();
    let seq = model.add_positional_encoding(&mut g, features).unwrap();
    let memory = model.encode(&mut g, seq).unwrap();
    let decoded = model.decode(&mut g, memory).unwrap();
    let (logits, boxes) = model.predict_heads(&mut g, decoded).unwrap();
    let (terms, _) = criterion(&mut g, logits, boxes, &targets, &w).unwrap();
    model.params_mut().zero_grad();
    g.backward(terms.total, model.params_mut()).unwrap();
    let image_grad = g.grad(x).cloned().unwrap();
    let param_grads: Vec<Tensor> = model.params().iter().map(|p| p.grad.clone().unwrap()).collect();

    let mut out = ModelCheck::default();
    let mut record = |analytic: f64, eval: &mut dyn FnMut(f64) -> f64| {
        let full = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let half = (eval(FD_STEP / 2.0) - eval(-FD_STEP / 2.0)) / FD_STEP;
        // At a smooth point both central differences agree to O(h^2) plus
        // rounding; a kink inside the step separates them.
        if (full - half).abs() > (1e-6 * full.abs()).max(1e-9) {
            out.kinks += 1;
            return;
        }
        out.checked += 1;
        out.worst = out.worst.max(rel_err(analytic, full));
    };
    for e in 0..image.numel() {
        let mut eval = |delta: f64| {
            let mut img = image.clone();
            img.data_mut()[e] += delta;
            model_loss(&model, &img, &targets, &w)
        };
        record(image_grad.data()[e], &mut eval);
    }
    for (p, grads) in param_grads.iter().enumerate() {
        let original = model.params().iter().nth(p).unwrap().value.clone();
        for e in 0..original.numel() {
            let mut perturbed = model.clone();
            let mut eval = |delta: f64| {
                let v = &mut perturbed.params_mut().iter_mut().nth(p).unwrap().value;
                v.data_mut()[e] = original.data()[e] + delta;
                model_loss(&perturbed, &image, &targets, &w)
            };
            record(grads.data()[e], &mut eval);
        }
    }
    out
}

/// Every primitive of the graph engine as `(name, inputs, op)` for one seed.
pub type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>);

pub fn primitive_cases(seed: u64) -> Vec<OpCase> {
    use bleedscope::autodiff::{Binary, Unary};
    let mut r = rng(seed);
    let m = 0.01;
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape);
    let mut cases: Vec<OpCase> = vec![
        (
            "matmul",
            vec![t(&[3, 4]), t(&[4, 5])],
            Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        ),
        (
            "transpose",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.transpose(x[0]).unwrap()),
        ),
        (
            "reshape",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.reshape(x[0], &[2, 6]).unwrap()),
        ),
        (
            "sigmoid",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.unary(Unary::Sigmoid, x[0])),
        ),
        ("exp", vec![t(&[3, 4])], Box::new(|g, x| g.unary(Unary::Exp, x[0]))),
        (
            "add",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(|g, x| g.binary(Binary::Add, x[0], x[1]).unwrap()),
        ),
        (
            "sub",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(|g, x| g.binary(Binary::Sub, x[0], x[1]).unwrap()),
        ),
        (
            "mul",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(|g, x| g.binary(Binary::Mul, x[0], x[1]).unwrap()),
        ),
        ("scale", vec![t(&[3, 4])], Box::new(|g, x| g.scale(x[0], -1.7))),
        ("add_scalar", vec![t(&[3, 4])], Box::new(|g, x| g.add_scalar(x[0], 0.3))),
        (
            "add_row",
            vec![t(&[3, 4]), t(&[4])],
            Box::new(|g, x| g.add_row(x[0], x[1]).unwrap()),
        ),
        (
            "conv2d_s1_p1",
            vec![t(&[2, 6, 6]), t(&[3, 2, 3, 3])],
            Box::new(|g, x| g.conv2d(x[0], x[1], 1, 1).unwrap()),
        ),
        (
            "conv2d_s2_p0",
            vec![t(&[2, 7, 7]), t(&[3, 2, 3, 3])],
            Box::new(|g, x| g.conv2d(x[0], x[1], 2, 0).unwrap()),
        ),
        (
            "layer_norm",
            vec![t(&[3, 5]), t(&[5]), t(&[5])],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap()),
        ),
        (
            "channel_norm",
            vec![t(&[4, 3, 3]), t(&[4]), t(&[4])],
            Box::new(|g, x| g.channel_norm(x[0], x[1], x[2], 1e-5).unwrap()),
        ),
        (
            "softmax_rows",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.softmax(x[0], 1).unwrap()),
        ),
        (
            "softmax_cols",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.softmax(x[0], 0).unwrap()),
        ),
        (
            "log_softmax_rows",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.log_softmax(x[0], 1).unwrap()),
        ),
        (
            "log_softmax_cols",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.log_softmax(x[0], 0).unwrap()),
        ),
        (
            "slice_cols",
            vec![t(&[3, 6])],
            Box::new(|g, x| g.slice_cols(x[0], 2, 3).unwrap()),
        ),
        (
            "concat_cols",
            vec![t(&[3, 2]), t(&[3, 4])],
            Box::new(|g, x| g.concat_cols(&[x[0], x[1], x[0]]).unwrap()),
        ),
        (
            "select_rows",
            vec![t(&[4, 3])],
            Box::new(|g, x| g.select_rows(x[0], &[2, 0, 2]).unwrap()),
        ),
        (
            "gather",
            vec![t(&[3, 4])],
            Box::new(|g, x| g.gather(x[0], &[1, 3, 1]).unwrap()),
        ),
        ("sum", vec![t(&[3, 4])], Box::new(|g, x| g.sum(x[0]))),
        ("mean", vec![t(&[3, 4])], Box::new(|g, x| g.mean(x[0]))),
        (
            "linear",
            vec![t(&[3, 4]), t(&[4, 2]), t(&[2])],
            Box::new(|g, x| g.linear(x[0], x[1], x[2]).unwrap()),
        ),
    ];
    // Non-smooth and partial-domain primitives get inputs kept away from
    // their kinks / poles.
    let mut r = rng(seed ^ 0x5151);
    let away0 = |r: &mut ChaCha8Rng| smooth_tensor(r, &[3, 4], &[0.0], m);
    cases.push(("relu", vec![away0(&mut r)], Box::new(|g, x| g.unary(Unary::Relu, x[0]))));
    cases.push(("abs", vec![away0(&mut r)], Box::new(|g, x| g.unary(Unary::Abs, x[0]))));
    let positive = random_tensor(&mut r, &[3, 4]).map(|v| 0.2 + v.abs());
    cases.push((
        "log",
        vec![positive.clone()],
        Box::new(|g, x| g.unary(Unary::Log, x[0])),
    ));
    let num = random_tensor(&mut r, &[3, 4]);
    let den = away0(&mut r).map(|v| v.signum() * (0.3 + v.abs()));
    cases.push((
        "div",
        vec![num, den],
        Box::new(|g, x| g.binary(Binary::Div, x[0], x[1]).unwrap()),
    ));
    let a = random_tensor(&mut r, &[3, 4]);
    let gap = away0(&mut r);
    let b = Tensor::new(&[3, 4], a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).unwrap();
    cases.push((
        "min",
        vec![a.clone(), b.clone()],
        Box::new(|g, x| g.binary(Binary::Min, x[0], x[1]).unwrap()),
    ));
    cases.push((
        "max",
        vec![a, b],
        Box::new(|g, x| g.binary(Binary::Max, x[0], x[1]).unwrap()),
    ));
    let c = smooth_tensor(&mut r, &[3, 4], &[0.1], m);
    cases.push(("clamp_min", vec![c], Box::new(|g, x| g.clamp_min(x[0], 0.1))));
    cases
}
