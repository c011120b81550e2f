//! Operator kinds and the static facts the planner needs about each one:
//! domain, receptive field, arity, parameter layout, scratch footprint and
//! output shape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::tensor::Shape5;

/// Width of the sinusoidal step embedding fed to [`OpKind::StepBias`].
pub const STEP_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    /// Graph input placeholder with a declared shape.
    Input { shape: Shape5 },
    /// 3×3 convolution, stride 1, zero padding 1, applied per frame.
    Conv2d { out_channels: usize },
    /// Kernel 3 along frames, zero padding 1, spatial extent 1.
    TemporalConv { out_channels: usize },
    GroupNorm { groups: usize, eps: f64 },
    /// Normalises the channel vector at every (b, t, h, w) position.
    LayerNorm { eps: f64 },
    Silu,
    /// Channel mixing at every position (a 1×1 convolution).
    Linear { out_channels: usize },
    /// Adds a per-channel bias projected from the sinusoidal step embedding.
    StepBias,
    /// Single-head dense attention over the h·w tokens of each frame.
    SpatialAttention,
    /// Single-head dense attention over the frames of each pixel.
    TemporalAttention,
    /// 2×2 average pooling.
    Downsample2x,
    /// Nearest-neighbour 2× upsampling.
    Upsample2x,
    Add,
    /// Channel-axis concatenation of two or more inputs.
    Concat,
    /// Channel range `[offset, offset + len)`.
    Split { offset: usize, len: usize },
}

/// Where an operator kind extracts its features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Spatial,
    Temporal,
    Boundary,
}

/// The domain a kind declares. Position-wise kinds act identically in both
/// layer families and take the tag of the layer they are placed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindDomain {
    Spatial,
    Temporal,
    Boundary,
    Pointwise,
}

impl KindDomain {
    pub fn admits(self, domain: Domain) -> bool {
        match self {
            KindDomain::Spatial => domain == Domain::Spatial,
            KindDomain::Temporal => domain == Domain::Temporal,
            KindDomain::Boundary => domain == Domain::Boundary,
            KindDomain::Pointwise => domain != Domain::Boundary,
        }
    }
}

/// Axes the slicer can cut along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Merged batch×frames axis.
    Bt,
    H,
    W,
}

/// How many input elements along an axis one output element reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptiveField {
    Local(usize),
    /// The whole extent of the axis (within one batch entry for `Bt`).
    Full,
}

impl ReceptiveField {
    pub const POINT: ReceptiveField = ReceptiveField::Local(1);

    /// Receptive field of `self` followed by `next`. Stride-agnostic: exact
    /// for stride-1 chains and an over-estimate across resampling, which
    /// keeps the `== 1` legality test sound.
    pub fn then(self, next: ReceptiveField) -> ReceptiveField {
        match (self, next) {
            (ReceptiveField::Local(a), ReceptiveField::Local(b)) => ReceptiveField::Local(a + b - 1),
            _ => ReceptiveField::Full,
        }
    }

    pub fn is_point(self) -> bool {
        self == ReceptiveField::POINT
    }
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReceptiveField::Local(n) => write!(f, "{n}"),
            ReceptiveField::Full => f.write_str("full"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Number of inputs feeding one output, used by weight init. `None` for
    /// normalisation affine terms, which start at 1 / 0.
    pub fan_in: Option<usize>,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    Uniform,
    Ones,
    Zeros,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn uniform(name: &'static str, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec { name, shape, fan_in: Some(fan_in), init: ParamInit::Uniform }
    }

    fn ones(name: &'static str, n: usize) -> Self {
        ParamSpec { name, shape: vec![n], fan_in: None, init: ParamInit::Ones }
    }

    fn zeros(name: &'static str, n: usize) -> Self {
        ParamSpec { name, shape: vec![n], fan_in: None, init: ParamInit::Zeros }
    }
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::TemporalConv { .. } => "temporal_conv",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Silu => "silu",
            OpKind::Linear { .. } => "linear",
            OpKind::StepBias => "step_bias",
            OpKind::SpatialAttention => "spatial_attention",
            OpKind::TemporalAttention => "temporal_attention",
            OpKind::Downsample2x => "downsample2x",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Split { .. } => "split",
        }
    }

    pub fn domain(&self) -> KindDomain {
        match self {
            OpKind::Conv2d { .. }
            | OpKind::GroupNorm { .. }
            | OpKind::SpatialAttention
            | OpKind::Downsample2x
            | OpKind::Upsample2x => KindDomain::Spatial,
            OpKind::TemporalConv { .. } | OpKind::TemporalAttention => KindDomain::Temporal,
            OpKind::LayerNorm { .. } | OpKind::Silu | OpKind::Linear { .. } | OpKind::StepBias => {
                KindDomain::Pointwise
            }
            OpKind::Input { .. } | OpKind::Add | OpKind::Concat | OpKind::Split { .. } => {
                KindDomain::Boundary
            }
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            OpKind::Input { .. } => Arity::Exactly(0),
            OpKind::Add => Arity::Exactly(2),
            OpKind::Concat => Arity::AtLeast(2),
            _ => Arity::Exactly(1),
        }
    }

    /// Whether the output may overwrite the (first) input buffer.
    pub fn in_place_capable(&self) -> bool {
        matches!(self, OpKind::Silu | OpKind::Add | OpKind::StepBias)
    }

    pub fn receptive_field(&self, axis: Axis) -> ReceptiveField {
        use ReceptiveField::{Full, Local};
        match (self, axis) {
            (OpKind::Conv2d { .. }, Axis::H | Axis::W) => Local(3),
            (OpKind::Conv2d { .. }, Axis::Bt) => Local(1),
            (OpKind::TemporalConv { .. }, Axis::Bt) => Local(3),
            (OpKind::TemporalConv { .. }, _) => Local(1),
            (OpKind::GroupNorm { .. } | OpKind::SpatialAttention, Axis::Bt) => Local(1),
            (OpKind::GroupNorm { .. } | OpKind::SpatialAttention, _) => Full,
            (OpKind::TemporalAttention, Axis::Bt) => Full,
            (OpKind::TemporalAttention, _) => Local(1),
            (OpKind::Downsample2x, Axis::H | Axis::W) => Local(2),
            (OpKind::Downsample2x, Axis::Bt) => Local(1),
            _ => Local(1),
        }
    }

    /// Output shape for the given input shapes.
    pub fn infer_shape(&self, inputs: &[Shape5]) -> Result<Shape5, KernelError> {
        if !self.arity().accepts(inputs.len()) {
            return Err(KernelError::ShapeMismatch(format!(
                "{} takes {:?} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        let out = match self {
            OpKind::Input { shape } => *shape,
            OpKind::Conv2d { out_channels }
            | OpKind::TemporalConv { out_channels }
            | OpKind::Linear { out_channels } => {
                if *out_channels == 0 {
                    return Err(KernelError::InvalidParam("zero output channels".into()));
                }
                inputs[0].with_c(*out_channels)
            }
            OpKind::GroupNorm { groups, eps } => {
                let c = inputs[0].c;
                if *groups == 0 || c % groups != 0 {
                    return Err(KernelError::InvalidParam(format!(
                        "{groups} groups do not divide {c} channels"
                    )));
                }
                check_eps(*eps)?;
                inputs[0]
            }
            OpKind::LayerNorm { eps } => {
                check_eps(*eps)?;
                inputs[0]
            }
            OpKind::Silu | OpKind::StepBias | OpKind::SpatialAttention | OpKind::TemporalAttention => {
                inputs[0]
            }
            OpKind::Downsample2x => {
                let s = inputs[0];
                if s.h % 2 != 0 || s.w % 2 != 0 {
                    return Err(KernelError::ShapeMismatch(format!("downsample needs even h, w; got {s}")));
                }
                s.with_hw(s.h / 2, s.w / 2)
            }
            OpKind::Upsample2x => {
                let s = inputs[0];
                s.with_hw(s.h * 2, s.w * 2)
            }
            OpKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(KernelError::ShapeMismatch(format!("add {} + {}", inputs[0], inputs[1])));
                }
                inputs[0]
            }
            OpKind::Concat => {
                let first = inputs[0];
                let mut c = 0;
                for s in inputs {
                    if s.with_c(1) != first.with_c(1) {
                        return Err(KernelError::ShapeMismatch(format!("concat {s} with {first}")));
                    }
                    c += s.c;
                }
                first.with_c(c)
            }
            OpKind::Split { offset, len } => {
                let s = inputs[0];
                if *len == 0 || offset + len > s.c {
                    return Err(KernelError::InvalidParam(format!(
                        "split [{offset}, {}) outside {} channels",
                        offset + len,
                        s.c
                    )));
                }
                s.with_c(*len)
            }
        };
        out.validate()?;
        Ok(out)
    }

    /// Parameter tensors this kind expects, given its first input's shape.
    pub fn param_specs(&self, input: Shape5) -> Vec<ParamSpec> {
        let c = input.c;
        match self {
            OpKind::Conv2d { out_channels: o } => vec![
                ParamSpec::uniform("weight", vec![*o, c, 3, 3], c * 9),
                ParamSpec::uniform("bias", vec![*o], c * 9),
            ],
            OpKind::TemporalConv { out_channels: o } => vec![
                ParamSpec::uniform("weight", vec![*o, c, 3], c * 3),
                ParamSpec::uniform("bias", vec![*o], c * 3),
            ],
            OpKind::Linear { out_channels: o } => vec![
                ParamSpec::uniform("weight", vec![*o, c], c),
                ParamSpec::uniform("bias", vec![*o], c),
            ],
            OpKind::GroupNorm { .. } | OpKind::LayerNorm { .. } => {
                vec![ParamSpec::ones("gamma", c), ParamSpec::zeros("beta", c)]
            }
            OpKind::StepBias => vec![
                ParamSpec::uniform("weight", vec![c, STEP_EMBED_DIM], STEP_EMBED_DIM),
                ParamSpec::uniform("bias", vec![c], STEP_EMBED_DIM),
            ],
            OpKind::SpatialAttention | OpKind::TemporalAttention => vec![
                ParamSpec::uniform("wq", vec![c, c], c),
                ParamSpec::uniform("wk", vec![c, c], c),
                ParamSpec::uniform("wv", vec![c, c], c),
                ParamSpec::uniform("wo", vec![c, c], c),
                ParamSpec::uniform("bo", vec![c], c),
            ],
            _ => Vec::new(),
        }
    }

    /// Working memory (elements) the kernel holds besides its output:
    /// attention keeps q, k, v and the full score matrix.
    pub fn scratch_elems(&self, input: Shape5) -> usize {
        match self {
            OpKind::SpatialAttention => {
                let n = input.plane();
                input.bt() * (n * n + 3 * n * input.c)
            }
            OpKind::TemporalAttention => {
                let pixels = input.b * input.plane();
                pixels * (input.t * input.t + 3 * input.t * input.c)
            }
            _ => 0,
        }
    }
}

fn check_eps(eps: f64) -> Result<(), KernelError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(KernelError::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_adds_extents() {
        let conv = OpKind::Conv2d { out_channels: 4 }.receptive_field(Axis::H);
        assert_eq!(conv.then(conv), ReceptiveField::Local(5));
        assert_eq!(conv.then(ReceptiveField::Full), ReceptiveField::Full);
        assert!(ReceptiveField::POINT.then(ReceptiveField::POINT).is_point());
    }

    #[test]
    fn per_sample_and_per_pixel_kinds() {
        let per_sample = [
            OpKind::Conv2d { out_channels: 2 },
            OpKind::GroupNorm { groups: 1, eps: 1e-5 },
            OpKind::LayerNorm { eps: 1e-5 },
            OpKind::SpatialAttention,
            OpKind::Linear { out_channels: 2 },
            OpKind::Silu,
        ];
        for k in &per_sample {
            assert!(k.receptive_field(Axis::Bt).is_point(), "{}", k.name());
        }
        for k in [OpKind::TemporalConv { out_channels: 2 }, OpKind::TemporalAttention] {
            assert!(k.receptive_field(Axis::H).is_point());
            assert!(k.receptive_field(Axis::W).is_point());
            assert!(!k.receptive_field(Axis::Bt).is_point());
        }
    }

    #[test]
    fn group_norm_requires_divisible_channels() {
        let s = Shape5::new(1, 1, 6, 2, 2).unwrap();
        assert!(OpKind::GroupNorm { groups: 4, eps: 1e-5 }.infer_shape(&[s]).is_err());
        assert!(OpKind::GroupNorm { groups: 3, eps: 1e-5 }.infer_shape(&[s]).is_ok());
    }

    #[test]
    fn resampling_shapes() {
        let s = Shape5::new(1, 2, 3, 8, 6).unwrap();
        assert_eq!(OpKind::Downsample2x.infer_shape(&[s]).unwrap(), s.with_hw(4, 3));
        assert_eq!(OpKind::Upsample2x.infer_shape(&[s]).unwrap(), s.with_hw(16, 12));
        assert!(OpKind::Downsample2x.infer_shape(&[s.with_hw(3, 4)]).is_err());
    }

    #[test]
    fn concat_sums_channels() {
        let a = Shape5::new(1, 2, 3, 4, 4).unwrap();
        let b = a.with_c(5);
        assert_eq!(OpKind::Concat.infer_shape(&[a, b]).unwrap().c, 8);
        assert!(OpKind::Concat.infer_shape(&[a, a.with_hw(2, 2)]).is_err());
        assert!(OpKind::Concat.infer_shape(&[a]).is_err());
    }
}
