//! Residual convolutional feature extractor with an overall stride of 8.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamStore};
use crate::model::layers::{Conv, Norm, Result};

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), c_in, c_out, k, stride, k / 2),
            norm: Norm::new(store, &format!("{name}.norm"), ParamGroup::Backbone, c_out),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(g, store, x)?;
        self.norm.channel(g, store, y)
    }
}

/// `relu(x + norm(conv(relu(norm(conv(x))))))`.
#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvNorm,
    second: ConvNorm,
}

impl ResidualBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let y = self.first.forward(g, store, x)?;
        let y = g.relu(y);
        let y = self.second.forward(g, store, y)?;
        let sum = g.add(x, y)?;
        Ok(g.relu(sum))
    }
}

/// Stride-2 stem, one residual block per stage with stride-2 transitions
/// between stages, and a 1x1 projection to the transformer width.
#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    stem: ConvNorm,
    transitions: Vec<ConvNorm>,
    stages: Vec<ResidualBlock>,
    project: Conv,
}

/// Backbone outputs: every stage's feature map plus the projected map.
pub(crate) struct BackboneOutput {
    pub stages: Vec<NodeId>,
    pub projected: NodeId,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: &[usize], d_model: usize) -> Self {
        let stem = ConvNorm::new(store, rng, "backbone.stem", 3, channels[0], 3, 2);
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (s, &c) in channels.iter().enumerate() {
            if s > 0 {
                transitions.push(ConvNorm::new(
                    store,
                    rng,
                    &format!("backbone.down{s}"),
                    channels[s - 1],
                    c,
                    3,
                    2,
                ));
            }
            stages.push(ResidualBlock {
                first: ConvNorm::new(store, rng, &format!("backbone.stage{s}.a"), c, c, 3, 1),
                second: ConvNorm::new(store, rng, &format!("backbone.stage{s}.b"), c, c, 3, 1),
            });
        }
        let last = *channels.last().unwrap();
        let project = Conv::new(store, rng, "backbone.project", last, d_model, 1, 1, 0);
        Self {
            stem,
            transitions,
            stages,
            project,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: NodeId) -> Result<BackboneOutput> {
        let x = self.stem.forward(g, store, image)?;
        let mut x = g.relu(x);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, block) in self.stages.iter().enumerate() {
            if s > 0 {
                let y = self.transitions[s - 1].forward(g, store, x)?;
                x = g.relu(y);
            }
            x = block.forward(g, store, x)?;
            stages.push(x);
        }
        let projected = self.project.forward(g, store, x)?;
        Ok(BackboneOutput { stages, projected })
    }
}
