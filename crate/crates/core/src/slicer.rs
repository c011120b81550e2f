//! Feature slicing: contiguous runs of the merged batch×frames axis for
//! spatial layers, and a tile grid over (h, w) for temporal layers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, SliceError};
use crate::graph::{Graph, NodeId};
use crate::ops::Axis;
use crate::tensor::{Scalar, Shape5, Tensor};

/// Per-axis slice sizes of a temporal tile grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileExtents {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SlicePlan {
    /// `k` requested slices along batch×frames; `extents` are the actual
    /// slice lengths, all `⌈bt/k⌉` except a shorter last one.
    SpatialBt { k: usize, extents: Vec<usize> },
    /// `k_h × k_w` tiles over the spatial grid; frames stay whole.
    TemporalHw { k_h: usize, k_w: usize, extents: TileExtents },
}

/// Axis-aligned box within a parent feature map. Channels are never cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub bt: Range<usize>,
    pub h: Range<usize>,
    pub w: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubFeature<T> {
    pub parent_shape: Shape5,
    pub region: Region,
    pub data: Tensor<T>,
}

/// Splits `extent` into pieces of `⌈extent/k⌉` with the remainder last.
/// When the ceiling leaves nothing for trailing pieces (e.g. 10 into 6) the
/// empty pieces are dropped, so fewer than `k` pieces can come back.
fn ceil_split(extent: usize, k: usize) -> Result<Vec<usize>, SliceError> {
    if k == 0 || k > extent {
        return Err(SliceError::BadSliceCount { count: k, extent });
    }
    let n = extent.div_ceil(k);
    let mut out = Vec::with_capacity(k);
    let mut left = extent;
    while left > 0 {
        let take = n.min(left);
        out.push(take);
        left -= take;
    }
    Ok(out)
}

pub fn plan_spatial(bt: usize, k: usize) -> Result<SlicePlan, SliceError> {
    Ok(SlicePlan::SpatialBt { k, extents: ceil_split(bt, k)? })
}

pub fn plan_temporal(h: usize, w: usize, k_h: usize, k_w: usize) -> Result<SlicePlan, SliceError> {
    Ok(SlicePlan::TemporalHw {
        k_h,
        k_w,
        extents: TileExtents { rows: ceil_split(h, k_h)?, cols: ceil_split(w, k_w)? },
    })
}

/// How `(k_h, k_w)` is derived from the spatial extent when not given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPreset {
    /// `min(dim, 16)` per axis.
    #[default]
    Capped,
    /// `max(dim, 16)` clamped to the extent, which always yields one-pixel
    /// tiles.
    PerPixel,
}

impl TemporalPreset {
    pub fn config(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            TemporalPreset::Capped => (h.min(16), w.min(16)),
            TemporalPreset::PerPixel => (h.max(16).min(h), w.max(16).min(w)),
        }
    }
}

pub fn default_temporal_config(h: usize, w: usize) -> (usize, usize) {
    TemporalPreset::Capped.config(h, w)
}

impl SlicePlan {
    pub fn axes(&self) -> &'static [Axis] {
        match self {
            SlicePlan::SpatialBt { .. } => &[Axis::Bt],
            SlicePlan::TemporalHw { .. } => &[Axis::H, Axis::W],
        }
    }

    pub fn slice_count(&self) -> usize {
        match self {
            SlicePlan::SpatialBt { extents, .. } => extents.len(),
            SlicePlan::TemporalHw { extents, .. } => extents.rows.len() * extents.cols.len(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.slice_count() == 1
    }

    pub fn check_fits(&self, shape: Shape5) -> Result<(), SliceError> {
        let ok = match self {
            SlicePlan::SpatialBt { extents, .. } => extents.iter().sum::<usize>() == shape.bt(),
            SlicePlan::TemporalHw { extents, .. } => {
                extents.rows.iter().sum::<usize>() == shape.h && extents.cols.iter().sum::<usize>() == shape.w
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SliceError::PlanShapeMismatch(format!("{} does not fit {shape}", self.describe())))
        }
    }

    /// Slice regions in execution order (row-major over tiles).
    pub fn regions(&self, shape: Shape5) -> Result<Vec<Region>, SliceError> {
        self.check_fits(shape)?;
        let runs = |sizes: &[usize]| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    start += n;
                    start - n..start
                })
                .collect::<Vec<_>>()
        };
        Ok(match self {
            SlicePlan::SpatialBt { extents, .. } => runs(extents)
                .into_iter()
                .map(|bt| Region { bt, h: 0..shape.h, w: 0..shape.w })
                .collect(),
            SlicePlan::TemporalHw { extents, .. } => {
                let cols = runs(&extents.cols);
                runs(&extents.rows)
                    .into_iter()
                    .flat_map(|h| cols.iter().map(move |w| Region { bt: 0..shape.bt(), h: h.clone(), w: w.clone() }))
                    .collect()
            }
        })
    }

    pub fn describe(&self) -> String {
        match self {
            SlicePlan::SpatialBt { k, extents } => format!("spatial k={k} {extents:?}"),
            SlicePlan::TemporalHw { k_h, k_w, .. } => format!("temporal {k_h}×{k_w}"),
        }
    }
}

impl Region {
    pub fn full(shape: Shape5) -> Self {
        Region { bt: 0..shape.bt(), h: 0..shape.h, w: 0..shape.w }
    }

    pub fn volume(&self) -> usize {
        self.bt.len() * self.h.len() * self.w.len()
    }

    fn within(&self, shape: Shape5) -> bool {
        self.volume() > 0 && self.bt.end <= shape.bt() && self.h.end <= shape.h && self.w.end <= shape.w
    }

    fn overlaps(&self, other: &Region) -> bool {
        let hit = |a: &Range<usize>, b: &Range<usize>| a.start < b.end && b.start < a.end;
        hit(&self.bt, &other.bt) && hit(&self.h, &other.h) && hit(&self.w, &other.w)
    }

    /// Shape of this region's data when cut out of a `parent`-shaped map
    /// with `c` channels. A whole bt range keeps the parent's (b, t) split;
    /// a partial one becomes a single batch entry of `len` frames, which is
    /// only meaningful to per-frame operators.
    pub fn shape_in(&self, parent: Shape5, c: usize) -> Shape5 {
        let (b, t) = if self.bt.len() == parent.bt() { (parent.b, parent.t) } else { (1, self.bt.len()) };
        Shape5 { b, t, c, h: self.h.len(), w: self.w.len() }
    }

    /// Same region expressed in an output map whose spatial grid may differ
    /// from the input's by resampling. Only whole-grid regions may change
    /// grid size.
    pub fn map_to(&self, from: Shape5, to: Shape5) -> Region {
        if from.h == to.h && from.w == to.w {
            self.clone()
        } else {
            Region { bt: self.bt.clone(), h: 0..to.h, w: 0..to.w }
        }
    }
}

/// Copies `region` of `x` into `out`, reshaping `out` to the region.
pub fn copy_region_into<T: Scalar>(x: &Tensor<T>, region: &Region, out: &mut Tensor<T>) {
    let s = x.shape();
    out.reshape_for_write(region.shape_in(s, s.c));
    let (rows, cols) = (region.h.len(), region.w.len());
    let src = x.data();
    let dst = out.data_mut();
    if rows == s.h && cols == s.w {
        let fl = s.frame_len();
        dst.copy_from_slice(&src[region.bt.start * fl..region.bt.end * fl]);
        return;
    }
    let mut at = 0;
    for plane in region.bt.start * s.c..region.bt.end * s.c {
        for y in region.h.clone() {
            let from = (plane * s.h + y) * s.w + region.w.start;
            dst[at..at + cols].copy_from_slice(&src[from..from + cols]);
            at += cols;
        }
    }
}

/// Writes `part` into `region` of `dst`.
pub fn write_region<T: Scalar>(dst: &mut Tensor<T>, region: &Region, part: &Tensor<T>) {
    let s = dst.shape();
    let (rows, cols) = (region.h.len(), region.w.len());
    let src = part.data();
    let out = dst.data_mut();
    if rows == s.h && cols == s.w {
        let fl = s.frame_len();
        out[region.bt.start * fl..region.bt.end * fl].copy_from_slice(src);
        return;
    }
    let mut at = 0;
    for plane in region.bt.start * s.c..region.bt.end * s.c {
        for y in region.h.clone() {
            let to = (plane * s.h + y) * s.w + region.w.start;
            out[to..to + cols].copy_from_slice(&src[at..at + cols]);
            at += cols;
        }
    }
}

pub fn slice<T: Scalar>(x: &Tensor<T>, plan: &SlicePlan) -> Result<Vec<SubFeature<T>>, SliceError> {
    let shape = x.shape();
    plan.regions(shape)?
        .into_iter()
        .map(|region| {
            let mut data = Tensor::empty_with_capacity(0);
            copy_region_into(x, &region, &mut data);
            Ok(SubFeature { parent_shape: shape, region, data })
        })
        .collect()
}

pub fn unslice<T: Scalar>(parts: &[SubFeature<T>]) -> Result<Tensor<T>, SliceError> {
    let first = parts.first().ok_or(SliceError::IncompleteCover)?;
    let parent = first.parent_shape;
    for (i, p) in parts.iter().enumerate() {
        if p.parent_shape != parent || !p.region.within(parent) {
            return Err(SliceError::PlanShapeMismatch(format!("part {i} lies outside {parent}")));
        }
        if p.data.shape() != p.region.shape_in(parent, parent.c) {
            return Err(SliceError::PlanShapeMismatch(format!(
                "part {i} holds {} for a region of shape {}",
                p.data.shape(),
                p.region.shape_in(parent, parent.c)
            )));
        }
        if parts[..i].iter().any(|q| q.region.overlaps(&p.region)) {
            return Err(SliceError::OverlappingRegions);
        }
    }
    // disjoint boxes inside the parent cover it iff their volumes add up
    if parts.iter().map(|p| p.region.volume()).sum::<usize>() != Region::full(parent).volume() {
        return Err(SliceError::IncompleteCover);
    }
    let mut out = Tensor::zeros(parent);
    for p in parts {
        write_region(&mut out, &p.region, &p.data);
    }
    Ok(out)
}

/// Whether running `segment` slice by slice under `plan` reproduces the
/// unsliced result: the segment must read a single element along every
/// axis the plan cuts.
pub fn validate_lossless(graph: &Graph, segment: &[NodeId], plan: &SlicePlan) -> Result<bool, GraphError> {
    for &axis in plan.axes() {
        if !graph.receptive_field(segment, axis)?.is_point() {
            return Ok(false);
        }
    }
    Ok(true)
}
