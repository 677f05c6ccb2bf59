//! The detector: backbone, positional encoding, encoder-decoder over object
//! queries, and prediction heads.

mod backbone;
mod decision;
mod layers;
mod transformer;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::category::Category;
use crate::error::{ConfigError, TensorError};
use crate::tensor::Tensor;

use backbone::Backbone;
use layers::{normal_init, Linear};
use transformer::{Decoder, Encoder};

pub use decision::{classify_frame, object_argmax, FrameDecision, Region};

type Result<T> = std::result::Result<T, TensorError>;

/// Overall stride of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub n_categories: usize,
    pub backbone_channels: Vec<usize>,
    pub input_size: usize,
    /// Hidden width of the transformer feed-forward sublayers.
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 8,
            n_categories: Category::COUNT,
            backbone_channels: vec![8, 16, 32],
            input_size: 64,
            ffn_dim: 64,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            n_queries: 4,
            n_categories: Category::COUNT,
            backbone_channels: vec![4, 4, 8],
            input_size: 16,
            ffn_dim: 16,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n_categories != Category::COUNT {
            return fail("n_categories must be 3");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if !self.d_model.is_multiple_of(4) {
            return fail("d_model must be divisible by 4 for the 2-D positional encoding");
        }
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return fail("backbone_channels must list three positive stage widths");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(BACKBONE_STRIDE) {
            return fail("input_size must be a positive multiple of 8");
        }
        if self.n_queries == 0 || self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_dim == 0 {
            return fail("n_queries, layer counts and ffn_dim must be positive");
        }
        Ok(())
    }

    /// Side length of the backbone output grid.
    pub fn feature_size(&self) -> usize {
        self.input_size / BACKBONE_STRIDE
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d_model={} n_heads={} enc_layers={} dec_layers={} n_queries={} backbone={:?} input={} ffn={}",
            self.d_model,
            self.n_heads,
            self.enc_layers,
            self.dec_layers,
            self.n_queries,
            self.backbone_channels,
            self.input_size,
            self.ffn_dim
        )
    }
}

/// Raw per-query outputs: `logits: [n_queries, 3]` and sigmoid boxes
/// `[n_queries, 4]` in normalized `(cx, cy, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub logits: Tensor,
    pub boxes: Tensor,
}

impl PredictionSet {
    pub fn n_queries(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self) -> Vec<[f64; 3]> {
        (0..self.n_queries())
            .map(|q| {
                let row = self.logits.row(q);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            })
            .collect()
    }

    pub fn box_at(&self, q: usize) -> [f64; 4] {
        let r = self.boxes.row(q);
        [r[0], r[1], r[2], r[3]]
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Output of each backbone stage, `[C_s, H_s, W_s]`.
    pub stages: Vec<NodeId>,
    pub features: NodeId,
    pub memory: NodeId,
    pub decoded: NodeId,
    pub logits: NodeId,
    pub boxes: NodeId,
}

impl ForwardPass {
    pub fn predictions(&self, g: &Graph) -> PredictionSet {
        PredictionSet {
            logits: g.value(self.logits).clone(),
            boxes: g.value(self.boxes).clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Heads {
    class: Linear,
    box_mlp: [Linear; 3],
}

/// 2-D sinusoidal encoding for an `h x w` grid as `[h*w, d]`.
///
/// The first `d/2` channels encode the row, the rest the column; within each
/// half, even channels are `sin(pos / T^(2i/n))` and odd ones the matching cos.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    const TEMPERATURE: f64 = 10_000.0;
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for i in 0..half {
                    let freq = TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64);
                    let v = pos / freq;
                    row[offset + i] = if i % 2 == 0 { v.sin() } else { v.cos() };
                }
            }
        }
    }
    Tensor::from_parts(vec![h * w, d], data)
}

/// The full set-prediction model. Owns its parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    encoder: Encoder,
    decoder: Decoder,
    queries: ParamId,
    heads: Heads,
}

impl Detector {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let backbone = Backbone::new(&mut store, &mut rng, &cfg.backbone_channels, d);
        let encoder = Encoder::new(&mut store, &mut rng, cfg.enc_layers, d, cfg.n_heads, cfg.ffn_dim);
        let decoder = Decoder::new(&mut store, &mut rng, cfg.dec_layers, d, cfg.n_heads, cfg.ffn_dim);
        let queries = store.add(
            "queries",
            ParamGroup::Transformer,
            normal_init(&mut rng, &[cfg.n_queries, d], 1.0),
        );
        let heads = Heads {
            class: Linear::new(&mut store, &mut rng, "head.class", ParamGroup::Head, d, Category::COUNT),
            box_mlp: [
                Linear::new(&mut store, &mut rng, "head.box.0", ParamGroup::Head, d, d),
                Linear::new(&mut store, &mut rng, "head.box.1", ParamGroup::Head, d, d),
                Linear::new(&mut store, &mut rng, "head.box.2", ParamGroup::Head, d, 4),
            ],
        };
        Ok(Self {
            cfg,
            store,
            backbone,
            encoder,
            decoder,
            queries,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Backbone: `[3, S, S]` image to `[d_model, S/8, S/8]` features.
    /// Also returns every stage output for activation maps.
    pub fn extract_features(&self, g: &mut Graph, image: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let s = self.cfg.input_size;
        let shape = g.value(image).shape();
        if shape != [3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "extract_features",
                lhs: shape.to_vec(),
                rhs: vec![3, s, s],
            });
        }
        let out = self.backbone.forward(g, &self.store, image)?;
        Ok((out.projected, out.stages))
    }

    /// Flattens `[d, h, w]` features row-major into `[h*w, d]` and adds the
    /// fixed positional encoding.
    pub fn add_positional_encoding(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let seq = self.flatten(g, features)?;
        let &[_, h, w] = g.value(features).shape() else {
            unreachable!()
        };
        let pe = g.input(positional_encoding(h, w, self.cfg.d_model));
        g.add(seq, pe)
    }

    /// Flattens without adding the encoding.
    pub fn flatten(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let shape = g.value(features).shape().to_vec();
        let &[d, h, w] = &shape[..] else {
            return Err(TensorError::Rank {
                op: "flatten",
                expected: 3,
                shape,
            });
        };
        if d != self.cfg.d_model {
            return Err(TensorError::LengthMismatch {
                op: "add_positional_encoding",
                expected: self.cfg.d_model,
                got: d,
            });
        }
        let flat = g.reshape(features, &[d, h * w])?;
        g.transpose(flat)
    }

    pub fn encode(&self, g: &mut Graph, seq: NodeId) -> Result<NodeId> {
        self.encoder.forward(g, &self.store, seq)
    }

    /// Decodes the learned object queries against `memory: [L, d]`.
    pub fn decode(&self, g: &mut Graph, memory: NodeId) -> Result<NodeId> {
        let width = g.value(memory).shape().get(1).copied().unwrap_or(0);
        if width != self.cfg.d_model {
            return Err(TensorError::LengthMismatch {
                op: "decode",
                expected: self.cfg.d_model,
                got: width,
            });
        }
        let q = g.param(&self.store, self.queries);
        self.decoder.forward(g, &self.store, q, memory)
    }

    /// Category logits `[n, 3]` and sigmoid boxes `[n, 4]`.
    pub fn predict_heads(&self, g: &mut Graph, embeddings: NodeId) -> Result<(NodeId, NodeId)> {
        let logits = self.heads.class.forward(g, &self.store, embeddings)?;
        let mut h = self.heads.box_mlp[0].forward(g, &self.store, embeddings)?;
        h = g.relu(h);
        h = self.heads.box_mlp[1].forward(g, &self.store, h)?;
        h = g.relu(h);
        let raw = self.heads.box_mlp[2].forward(g, &self.store, h)?;
        Ok((logits, g.sigmoid(raw)))
    }

    /// Builds the whole differentiable graph from pixels to predictions.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardPass> {
        let x = g.input(image.clone());
        let (features, stages) = self.extract_features(g, x)?;
        let seq = self.add_positional_encoding(g, features)?;
        let memory = self.encode(g, seq)?;
        let decoded = self.decode(g, memory)?;
        let (logits, boxes) = self.predict_heads(g, decoded)?;
        Ok(ForwardPass {
            stages,
            features,
            memory,
            decoded,
            logits,
            boxes,
        })
    }

    /// Inference-only forward.
    pub fn predict(&self, image: &Tensor) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, image)?;
        Ok(pass.predictions(&g))
    }
}
