//! Pre-norm transformer encoder and decoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamStore};
use crate::model::layers::{Linear, Norm, Result};

const GROUP: ParamGroup = ParamGroup::Transformer;

#[derive(Clone, Debug)]
pub(crate) struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), GROUP, d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), GROUP, d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), GROUP, d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), GROUP, d, d),
            heads,
        }
    }

    /// Scaled dot-product attention of `query: [Lq, d]` over `context: [Lk, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: NodeId, context: NodeId) -> Result<NodeId> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let d = g.value(q).shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, 1)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat_cols(&outs)?;
        self.out.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), GROUP, d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), GROUP, hidden, d),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: MultiHeadAttention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderLayer {
                    norm_attn: Norm::new(store, &format!("{name}.norm_attn"), GROUP, d),
                    attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
                    norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), GROUP, d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
                }
            })
            .collect();
        let final_norm = Norm::new(store, "encoder.norm", GROUP, d);
        Self { layers, final_norm }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: NodeId) -> Result<NodeId> {
        let mut x = seq;
        for layer in &self.layers {
            let h = layer.norm_attn.layer(g, store, x)?;
            let a = layer.attn.forward(g, store, h, h)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.layer(g, store, x)?;
            let f = layer.ffn.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        self.final_norm.layer(g, store, x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: MultiHeadAttention,
    norm_cross: Norm,
    cross_attn: MultiHeadAttention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    layers: Vec<DecoderLayer>,
    final_norm: Norm,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayer {
                    norm_self: Norm::new(store, &format!("{name}.norm_self"), GROUP, d),
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads),
                    norm_cross: Norm::new(store, &format!("{name}.norm_cross"), GROUP, d),
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
                    norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), GROUP, d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
                }
            })
            .collect();
        let final_norm = Norm::new(store, "decoder.norm", GROUP, d);
        Self { layers, final_norm }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: NodeId, memory: NodeId) -> Result<NodeId> {
        let mut t = queries;
        for layer in &self.layers {
            let h = layer.norm_self.layer(g, store, t)?;
            let a = layer.self_attn.forward(g, store, h, h)?;
            t = g.add(t, a)?;
            let h = layer.norm_cross.layer(g, store, t)?;
            let c = layer.cross_attn.forward(g, store, h, memory)?;
            t = g.add(t, c)?;
            let h = layer.norm_ffn.layer(g, store, t)?;
            let f = layer.ffn.forward(g, store, h)?;
            t = g.add(t, f)?;
        }
        self.final_norm.layer(g, store, t)
    }
}
