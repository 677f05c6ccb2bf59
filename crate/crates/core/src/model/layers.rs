//! Parameterized building blocks shared by the backbone, transformer and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::error::TensorError;
use crate::tensor::Tensor;

pub(crate) type Result<T> = std::result::Result<T, TensorError>;

pub(crate) const NORM_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weight `[fan_in, fan_out]`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, uniform(rng, &[fan_in, fan_out], bound));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Affine-normalization parameters (gain initialized to 1, bias to 0).
#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[width], 1.0));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn layer(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, NORM_EPS)
    }

    pub fn channel(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.channel_norm(x, gain, bias, NORM_EPS)
    }
}

/// Bias-free convolution (a normalization always follows).
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub kernel: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernel = store.add(
            format!("{name}.kernel"),
            ParamGroup::Backbone,
            uniform(rng, &[c_out, c_in, k, k], bound),
        );
        Self { kernel, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        g.conv2d(x, k, self.stride, self.pad)
    }
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    // Box-Muller.
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        data.push(std * r * (2.0 * std::f64::consts::PI * u2).cos());
        if data.len() < n {
            data.push(std * r * (2.0 * std::f64::consts::PI * u2).sin());
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}
