//! Toy video U-Net: four down blocks, a mid block and four up blocks, each
//! pairing spatial layers with temporal layers, plus seeded weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::ops::{Domain, OpKind, ParamInit};
use crate::tensor::Shape5;
use crate::weights::WeightBundle;

/// Temporal layer of the final up block; its output is what step rehash
/// caches and reuses.
pub const FINAL_UP_PROBE: &str = "up_blocks.3.temporal.0";
/// Temporal layer of the mid block, used for similarity comparisons.
pub const MID_PROBE: &str = "mid_block.temporal.0";

pub const NORM_EPS: f64 = 1e-5;
const INIT_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Channels of the latent the network denoises.
    pub latent_channels: usize,
    pub norm_groups: usize,
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    /// Evaluate conditional and unconditional halves as one doubled batch.
    pub cfg_doubling: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4, 4],
            latent_channels: 8,
            norm_groups: 4,
            batch: 1,
            frames: 8,
            height: 32,
            width: 32,
            steps: 25,
            cfg_doubling: false,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::InvalidConfig(msg));
        if self.channel_multipliers.len() != 4 {
            return bad(format!("channel_multipliers needs 4 entries, got {}", self.channel_multipliers.len()));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("latent_channels", self.latent_channels),
            ("norm_groups", self.norm_groups),
            ("batch", self.batch),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be ≥ 1".into());
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("height and width must be multiples of 8, got {}×{}", self.height, self.width));
        }
        for c in self.widths().into_iter().chain([self.latent_channels]) {
            if c % self.norm_groups != 0 {
                return bad(format!("norm_groups {} does not divide channel width {c}", self.norm_groups));
            }
        }
        Ok(())
    }

    /// Channel width of each down block.
    pub fn widths(&self) -> [usize; 4] {
        let m = &self.channel_multipliers;
        [0, 1, 2, 3].map(|i| self.base_channels * m.get(i).copied().unwrap_or(1))
    }

    /// Batch the network actually sees.
    pub fn effective_batch(&self) -> usize {
        if self.cfg_doubling {
            2 * self.batch
        } else {
            self.batch
        }
    }

    pub fn latent_shape(&self) -> Shape5 {
        Shape5 { b: self.batch, t: self.frames, c: self.latent_channels, h: self.height, w: self.width }
    }

    pub fn input_shape(&self) -> Shape5 {
        self.latent_shape().with_b(self.effective_batch())
    }
}

struct Net {
    b: GraphBuilder,
    groups: usize,
}

impl Net {
    fn norm_act_conv(&mut self, p: &str, suffix: &str, x: NodeId, out: usize) -> NodeId {
        let n = self.b.add(format!("{p}.norm{suffix}"), OpKind::GroupNorm { groups: self.groups, eps: NORM_EPS }, Domain::Spatial, &[x]);
        let a = self.b.add(format!("{p}.act{suffix}"), OpKind::Silu, Domain::Spatial, &[n]);
        self.b.add(format!("{p}.conv{suffix}"), OpKind::Conv2d { out_channels: out }, Domain::Spatial, &[a])
    }

    fn resnet(&mut self, p: &str, x: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let p = format!("{p}.resnet");
        let h = self.norm_act_conv(&p, "1", x, out_c);
        let h = self.b.add(format!("{p}.step"), OpKind::StepBias, Domain::Spatial, &[h]);
        let h = self.norm_act_conv(&p, "2", h, out_c);
        let skip = if in_c == out_c {
            x
        } else {
            self.b.add(format!("{p}.skip"), OpKind::Linear { out_channels: out_c }, Domain::Spatial, &[x])
        };
        self.b.add(p, OpKind::Add, Domain::Boundary, &[skip, h])
    }

    /// Pre-norm residual layer: `x + op(norm(x))`.
    fn residual(&mut self, p: String, x: NodeId, domain: Domain, op_name: &str, op: OpKind) -> NodeId {
        let n = self.b.add(format!("{p}.norm"), OpKind::LayerNorm { eps: NORM_EPS }, domain, &[x]);
        let o = self.b.add(format!("{p}.{op_name}"), op, domain, &[n]);
        self.b.add(p, OpKind::Add, Domain::Boundary, &[x, o])
    }

    fn temporal_conv(&mut self, p: String, x: NodeId, c: usize) -> NodeId {
        self.residual(p, x, Domain::Temporal, "conv", OpKind::TemporalConv { out_channels: c })
    }

    /// ResBlock, temporal conv, spatial attention, temporal attention.
    fn block(&mut self, p: &str, x: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let h = self.resnet(p, x, in_c, out_c);
        let h = self.temporal_conv(format!("{p}.temporal.0"), h, out_c);
        let h = self.residual(format!("{p}.attention"), h, Domain::Spatial, "attn", OpKind::SpatialAttention);
        self.residual(format!("{p}.temporal.1"), h, Domain::Temporal, "attn", OpKind::TemporalAttention)
    }
}

/// Builds the toy U-Net graph for `cfg.input_shape()`. Up block `i` reads
/// the concatenation of down block `3 − i`'s output and the previous
/// up block's (or the mid block's) output.
pub fn build_graph(cfg: &UNetConfig) -> Result<Graph, GraphError> {
    cfg.validate()?;
    let widths = cfg.widths();
    let mut net = Net { b: GraphBuilder::new(), groups: cfg.norm_groups };
    let x = net.b.add("input", OpKind::Input { shape: cfg.input_shape() }, Domain::Boundary, &[]);
    let mut h = net.b.add("conv_in", OpKind::Conv2d { out_channels: widths[0] }, Domain::Spatial, &[x]);

    let mut skips = Vec::new();
    let mut c = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        let p = format!("down_blocks.{i}");
        h = net.block(&p, h, c, w);
        skips.push((h, w));
        c = w;
        if i < 3 {
            h = net.b.add(format!("{p}.downsample"), OpKind::Downsample2x, Domain::Spatial, &[h]);
        }
    }

    h = net.resnet("mid_block", h, c, c);
    h = net.temporal_conv(MID_PROBE.to_string(), h, c);

    for i in 0..4 {
        let p = format!("up_blocks.{i}");
        let (skip, skip_c) = skips[3 - i];
        let cat = net.b.add(format!("{p}.concat"), OpKind::Concat, Domain::Boundary, &[skip, h]);
        h = net.block(&p, cat, skip_c + c, skip_c);
        c = skip_c;
        if i < 3 {
            h = net.b.add(format!("{p}.upsample"), OpKind::Upsample2x, Domain::Spatial, &[h]);
        }
    }

    h = net.norm_act_conv("conv_out", "", h, cfg.latent_channels);
    net.b.finish(vec![h]).map_err(|e| match e {
        GraphError::ShapeInference { node, source } => GraphError::InvalidConfig(format!("node {node}: {source}")),
        other => other,
    })
}

/// Seeded weights for `graph`: weights and biases uniform in
/// `[-0.2, 0.2] / sqrt(fan_in)`, norm scales 1 and shifts 0. Parameters are
/// drawn in node order then parameter order from one ChaCha8 stream.
pub fn init_weights(graph: &Graph, seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = WeightBundle::new();
    for node in graph.nodes() {
        let Some(key) = &node.param_ref else { continue };
        let input = graph.shape(node.inputs[0]);
        for spec in node.kind.param_specs(input) {
            let n = spec.numel();
            let data = match spec.init {
                ParamInit::Ones => vec![1.0; n],
                ParamInit::Zeros => vec![0.0; n],
                ParamInit::Uniform => {
                    let bound = INIT_SCALE / (spec.fan_in.unwrap_or(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect()
                }
            };
            bundle
                .insert(format!("{key}.{}", spec.name), spec.shape.clone(), data)
                .expect("spec sizes are consistent");
        }
    }
    bundle
}

pub fn build_toy_unet(cfg: &UNetConfig) -> Result<(Graph, WeightBundle), GraphError> {
    let graph = build_graph(cfg)?;
    let weights = init_weights(&graph, cfg.seed);
    Ok((graph, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn down_path_widths() {
        let cfg = UNetConfig::default();
        let g = build_graph(&cfg).unwrap();
        let widths: Vec<usize> = (0..4)
            .map(|i| g.shape(g.find_label(&format!("down_blocks.{i}.temporal.1")).unwrap()).c)
            .collect();
        assert_eq!(widths, vec![8, 16, 32, 32]);
        let res: Vec<usize> =
            (0..4).map(|i| g.shape(g.find_label(&format!("down_blocks.{i}.resnet")).unwrap()).h).collect();
        assert_eq!(res, vec![32, 16, 8, 4]);
    }

    #[test]
    fn up_blocks_concatenate_skips() {
        let g = build_graph(&UNetConfig::default()).unwrap();
        let widths: Vec<usize> =
            (0..4).map(|i| g.shape(g.find_label(&format!("up_blocks.{i}.concat")).unwrap()).c).collect();
        assert_eq!(widths, vec![64, 64, 48, 24]);
        let out = g.outputs()[0];
        assert_eq!(g.shape(out), UNetConfig::default().input_shape());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = UNetConfig::default();
        let (g1, w1) = build_toy_unet(&cfg).unwrap();
        let (g2, w2) = build_toy_unet(&cfg).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(w1.to_bytes(), w2.to_bytes());
        let other = init_weights(&g1, cfg.seed + 1);
        assert_ne!(other.to_bytes(), w1.to_bytes());
    }

    #[test]
    fn cfg_doubling_doubles_input_batch() {
        let cfg = UNetConfig { cfg_doubling: true, batch: 1, ..UNetConfig::default() };
        let g = build_graph(&cfg).unwrap();
        assert_eq!(g.shape(g.input_node().unwrap()).b, 2);
    }

    #[test]
    fn every_spatial_layer_is_followed_by_a_temporal_layer() {
        let g = build_graph(&UNetConfig::default()).unwrap();
        let layers: Vec<&str> = g
            .nodes()
            .iter()
            .filter(|n| n.kind == OpKind::Add)
            .map(|n| n.label.as_str())
            .collect();
        let mut spatial_layers = 0;
        for (i, label) in layers.iter().enumerate() {
            if label.ends_with(".resnet") || label.ends_with(".attention") {
                spatial_layers += 1;
                let next = layers.get(i + 1).expect("spatial layer is not last");
                assert!(next.contains(".temporal."), "{label} is followed by {next}");
            }
        }
        // four down blocks, one mid resnet, four up blocks
        assert_eq!(spatial_layers, 4 * 2 + 1 + 4 * 2);
    }

    #[test]
    fn probes_exist() {
        let g = build_graph(&UNetConfig::default()).unwrap();
        assert!(g.find_label(FINAL_UP_PROBE).is_ok());
        assert!(g.find_label(MID_PROBE).is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            UNetConfig { channel_multipliers: vec![1, 2], ..UNetConfig::default() },
            UNetConfig { height: 12, ..UNetConfig::default() },
            UNetConfig { frames: 0, ..UNetConfig::default() },
            UNetConfig { norm_groups: 3, ..UNetConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(build_graph(&cfg), Err(GraphError::InvalidConfig(_))), "{cfg:?}");
        }
    }
}
