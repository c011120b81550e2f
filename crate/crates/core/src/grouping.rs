//! Operator grouping: greedy maximal chains of same-domain operators that
//! can run slice by slice, and the static peak-memory model.

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, SliceError};
use crate::graph::{Graph, NodeId};
use crate::ops::{Arity, Domain};
use crate::slicer::{plan_spatial, plan_temporal, validate_lossless, Region, SlicePlan, TemporalPreset};
use crate::tensor::Shape5;

/// Where the temporal tile grid comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSlicing {
    Preset(TemporalPreset),
    /// Fixed `(k_h, k_w)`, clamped per group to the group's grid.
    Fixed { k_h: usize, k_w: usize },
}

impl Default for TemporalSlicing {
    fn default() -> Self {
        TemporalSlicing::Preset(TemporalPreset::Capped)
    }
}

impl TemporalSlicing {
    pub fn resolve(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            TemporalSlicing::Preset(p) => p.config(h, w),
            TemporalSlicing::Fixed { k_h, k_w } => (k_h.min(h), k_w.min(w)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Requested slice count along batch×frames, clamped per group to bt.
    pub spatial_k: usize,
    pub temporal: TemporalSlicing,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig { spatial_k: 8, temporal: TemporalSlicing::default() }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<(), SliceError> {
        if self.spatial_k == 0 {
            return Err(SliceError::BadSliceCount { count: 0, extent: 0 });
        }
        if let TemporalSlicing::Fixed { k_h, k_w } = self.temporal {
            if k_h == 0 || k_w == 0 {
                return Err(SliceError::BadSliceCount { count: 0, extent: 0 });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorGroup {
    pub nodes: Vec<NodeId>,
    pub domain: Domain,
    pub plan: SlicePlan,
    pub label: String,
}

impl OperatorGroup {
    pub fn first(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn last(&self) -> NodeId {
        *self.nodes.last().expect("groups are non-empty")
    }

    /// The value the group reads.
    pub fn input(&self, graph: &Graph) -> NodeId {
        graph.node(self.first()).inputs[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecItem {
    Group(usize),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedGraph {
    pub groups: Vec<OperatorGroup>,
    /// Nodes executed whole: boundary kinds, the input, and anything that
    /// could not join a chain.
    pub ungrouped: Vec<NodeId>,
    /// Groups and ungrouped nodes in a topologically valid order.
    pub order: Vec<ExecItem>,
}

/// Plan for a chain whose input has shape `input`.
fn plan_for(domain: Domain, input: Shape5, cfg: &GroupingConfig) -> Result<SlicePlan, SliceError> {
    match domain {
        Domain::Temporal => {
            let (k_h, k_w) = cfg.temporal.resolve(input.h, input.w);
            plan_temporal(input.h, input.w, k_h, k_w)
        }
        _ => plan_spatial(input.bt(), cfg.spatial_k.min(input.bt())),
    }
}

fn groupable(graph: &Graph, id: NodeId) -> bool {
    let node = graph.node(id);
    node.domain != Domain::Boundary && node.kind.arity() == Arity::Exactly(1)
}

/// Partitions `graph` into operator groups and ungrouped nodes.
///
/// A chain grows while the next node in topological order has the same
/// domain, reads only the chain's last node, is that node's sole consumer,
/// and the extended chain is still lossless under the chain's plan.
pub fn group_operators(graph: &Graph, cfg: &GroupingConfig) -> Result<GroupedGraph, GraphError> {
    cfg.validate().map_err(|e| GraphError::InvalidConfig(e.to_string()))?;
    let mut groups = Vec::new();
    let mut ungrouped = Vec::new();
    let mut order = Vec::new();
    let mut chain: Vec<NodeId> = Vec::new();
    let mut chain_plan: Option<SlicePlan> = None;

    let flush = |chain: &mut Vec<NodeId>, plan: &mut Option<SlicePlan>, groups: &mut Vec<OperatorGroup>, order: &mut Vec<ExecItem>| {
        if chain.is_empty() {
            return;
        }
        let nodes = std::mem::take(chain);
        let label = if nodes.len() == 1 {
            graph.node(nodes[0]).label.clone()
        } else {
            format!("{}..{}", graph.node(nodes[0]).label, graph.node(*nodes.last().unwrap()).label)
        };
        order.push(ExecItem::Group(groups.len()));
        groups.push(OperatorGroup {
            domain: graph.node(nodes[0]).domain,
            plan: plan.take().expect("a chain always has a plan"),
            nodes,
            label,
        });
    };

    for &id in graph.topo_order() {
        if !groupable(graph, id) {
            flush(&mut chain, &mut chain_plan, &mut groups, &mut order);
            ungrouped.push(id);
            order.push(ExecItem::Node(id));
            continue;
        }
        let node = graph.node(id);
        if let (Some(&last), Some(plan)) = (chain.last(), &chain_plan) {
            let extends = node.inputs[0] == last
                && graph.position(id) == graph.position(last) + 1
                && node.domain == graph.node(last).domain
                && graph.consumers(last) == [id]
                && !graph.outputs().contains(&last)
                && {
                    chain.push(id);
                    let ok = validate_lossless(graph, &chain, plan)?;
                    chain.pop();
                    ok
                };
            if extends {
                chain.push(id);
                continue;
            }
        }
        flush(&mut chain, &mut chain_plan, &mut groups, &mut order);
        let input = graph.shape(node.inputs[0]);
        let plan = plan_for(node.domain, input, cfg).map_err(|e| GraphError::InvalidConfig(e.to_string()))?;
        if validate_lossless(graph, &[id], &plan)? {
            chain.push(id);
            chain_plan = Some(plan);
        } else {
            ungrouped.push(id);
            order.push(ExecItem::Node(id));
        }
    }
    flush(&mut chain, &mut chain_plan, &mut groups, &mut order);

    for g in &groups {
        assert!(validate_lossless(graph, &g.nodes, &g.plan)?, "grouping produced an illegal group {}", g.label);
    }
    Ok(GroupedGraph { groups, ungrouped, order })
}

impl GroupedGraph {
    /// Every node exactly once, as groups then ungrouped.
    pub fn covered_nodes(&self) -> Vec<NodeId> {
        let mut all: Vec<NodeId> = self.groups.iter().flat_map(|g| g.nodes.iter().copied()).collect();
        all.extend(&self.ungrouped);
        all
    }

    pub fn report(&self, graph: &Graph, elem_bytes: usize) -> serde_json::Value {
        let groups: Vec<_> = self
            .groups
            .iter()
            .map(|g| {
                serde_json::json!({
                    "label": g.label,
                    "node_count": g.nodes.len(),
                    "nodes": g.nodes,
                    "domain": g.domain,
                    "plan": g.plan,
                    "slice_count": g.plan.slice_count(),
                    "static_peak_bytes": group_transient_bytes(graph, g, elem_bytes),
                })
            })
            .collect();
        let ungrouped: Vec<_> = self
            .ungrouped
            .iter()
            .map(|&id| serde_json::json!({"id": id, "label": graph.node(id).label}))
            .collect();
        serde_json::json!({"groups": groups, "ungrouped": ungrouped})
    }
}

/// Shape of `node`'s output for the largest slice of a group reading
/// `group_input`-shaped data. Plans put the largest slice first.
pub(crate) fn slice_shape(graph: &Graph, group: &OperatorGroup, node: NodeId) -> Shape5 {
    let in_shape = graph.shape(group.input(graph));
    let region = group.plan.regions(in_shape).expect("plan fits its group")[0].clone();
    let full = graph.shape(node);
    region.map_to(in_shape, full).shape_in(full, full.c)
}

fn slice_input_shape(graph: &Graph, group: &OperatorGroup) -> Shape5 {
    let in_shape = graph.shape(group.input(graph));
    let region: Region = group.plan.regions(in_shape).expect("plan fits its group")[0].clone();
    region.shape_in(in_shape, in_shape.c)
}

/// Bytes a group holds on top of its full input and output while one slice
/// passes through a stage: that stage's slice-sized input and output and
/// its scratch. The maximum over stages is the group's static contribution.
pub fn group_transient_bytes(graph: &Graph, group: &OperatorGroup, elem_bytes: usize) -> usize {
    let mut prev = slice_input_shape(graph, group);
    let mut worst = 0;
    for &id in &group.nodes {
        let out = slice_shape(graph, group, id);
        let scratch = graph.node(id).kind.scratch_elems(prev);
        worst = worst.max(prev.numel() + out.numel() + scratch);
        prev = out;
    }
    worst * elem_bytes
}

/// Number of execution items that read each value, plus one for graph
/// outputs, which stay live to the end.
pub(crate) fn use_counts(graph: &Graph, items: &[ExecItem], groups: &[OperatorGroup]) -> Vec<usize> {
    let mut uses = vec![0usize; graph.len()];
    for item in items {
        let mut reads: Vec<NodeId> = match *item {
            ExecItem::Node(id) => graph.node(id).inputs.clone(),
            ExecItem::Group(g) => vec![groups[g].input(graph)],
        };
        reads.sort_unstable();
        reads.dedup();
        for r in reads {
            uses[r] += 1;
        }
    }
    for &o in graph.outputs() {
        uses[o] += 1;
    }
    uses
}

/// Reference execution order: every node whole, in topological order.
pub fn reference_order(graph: &Graph) -> Vec<ExecItem> {
    graph.topo_order().iter().map(|&id| ExecItem::Node(id)).collect()
}

/// Static peak of live tensor bytes.
///
/// Walks the execution order allocating each output, charging a node's
/// scratch while it runs, and freeing values after their last reader. A
/// group allocates its full output up front; inside it only one slice is
/// in flight and only a stage's own input, output and scratch are live.
pub fn estimate_peak_memory(graph: &Graph, grouped: Option<&GroupedGraph>, elem_bytes: usize) -> usize {
    let (items, groups): (Vec<ExecItem>, &[OperatorGroup]) = match grouped {
        Some(g) => (g.order.clone(), &g.groups),
        None => (reference_order(graph), &[]),
    };
    let mut uses = use_counts(graph, &items, groups);
    let bytes = |id: NodeId| graph.shape(id).numel() * elem_bytes;
    let mut current = 0usize;
    let mut peak = 0usize;
    let mut release = |reads: Vec<NodeId>, current: &mut usize| {
        let mut reads = reads;
        reads.sort_unstable();
        reads.dedup();
        for r in reads {
            uses[r] -= 1;
            if uses[r] == 0 {
                *current -= bytes(r);
            }
        }
    };
    for item in items {
        match item {
            ExecItem::Node(id) => {
                let node = graph.node(id);
                current += bytes(id);
                let scratch = node.inputs.first().map_or(0, |&i| node.kind.scratch_elems(graph.shape(i)));
                peak = peak.max(current + scratch * elem_bytes);
                release(node.inputs.clone(), &mut current);
            }
            ExecItem::Group(g) => {
                let group = &groups[g];
                current += bytes(group.last());
                peak = peak.max(current + group_transient_bytes(graph, group, elem_bytes));
                release(vec![group.input(graph)], &mut current);
            }
        }
    }
    peak
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::ops::OpKind;

    fn shape() -> Shape5 {
        Shape5::new(1, 4, 4, 4, 4).unwrap()
    }

    fn cfg(k: usize) -> GroupingConfig {
        GroupingConfig { spatial_k: k, temporal: TemporalSlicing::default() }
    }

    #[test]
    fn resblock_chain_is_one_group() {
        let mut b = GraphBuilder::new();
        let mut prev = b.add("x", OpKind::Input { shape: shape() }, Domain::Boundary, &[]);
        let kinds = [
            OpKind::GroupNorm { groups: 2, eps: 1e-5 },
            OpKind::Silu,
            OpKind::Conv2d { out_channels: 4 },
            OpKind::Silu,
            OpKind::Conv2d { out_channels: 4 },
        ];
        for (i, k) in kinds.into_iter().enumerate() {
            prev = b.add(format!("n{i}"), k, Domain::Spatial, &[prev]);
        }
        let g = b.finish(vec![prev]).unwrap();
        let gg = group_operators(&g, &cfg(2)).unwrap();
        assert_eq!(gg.groups.len(), 1);
        assert_eq!(gg.groups[0].nodes.len(), 5);
        assert_eq!(gg.ungrouped, vec![0]);
    }

    #[test]
    fn domain_change_cuts_groups() {
        let mut b = GraphBuilder::new();
        let x = b.add("x", OpKind::Input { shape: shape() }, Domain::Boundary, &[]);
        let c = b.add("conv", OpKind::Conv2d { out_channels: 4 }, Domain::Spatial, &[x]);
        let t = b.add("tconv", OpKind::TemporalConv { out_channels: 4 }, Domain::Temporal, &[c]);
        let g = b.finish(vec![t]).unwrap();
        let gg = group_operators(&g, &cfg(2)).unwrap();
        assert_eq!(gg.groups.len(), 2);
        assert_eq!(gg.groups[0].domain, Domain::Spatial);
        assert_eq!(gg.groups[1].domain, Domain::Temporal);
    }

    #[test]
    fn junction_add_stays_ungrouped() {
        let mut b = GraphBuilder::new();
        let x = b.add("x", OpKind::Input { shape: shape() }, Domain::Boundary, &[]);
        let p = b.add("p", OpKind::Silu, Domain::Spatial, &[x]);
        let q = b.add("q", OpKind::Silu, Domain::Spatial, &[x]);
        let a = b.add("add", OpKind::Add, Domain::Boundary, &[p, q]);
        let g = b.finish(vec![a]).unwrap();
        let gg = group_operators(&g, &cfg(2)).unwrap();
        assert!(gg.ungrouped.contains(&a));
        let mut all = gg.covered_nodes();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn multi_consumer_node_ends_its_chain() {
        let mut b = GraphBuilder::new();
        let x = b.add("x", OpKind::Input { shape: shape() }, Domain::Boundary, &[]);
        let p = b.add("p", OpKind::Silu, Domain::Spatial, &[x]);
        let q = b.add("q", OpKind::Silu, Domain::Spatial, &[p]);
        let a = b.add("add", OpKind::Add, Domain::Boundary, &[p, q]);
        let g = b.finish(vec![a]).unwrap();
        let gg = group_operators(&g, &cfg(2)).unwrap();
        assert_eq!(gg.groups.iter().map(|g| g.nodes.clone()).collect::<Vec<_>>(), vec![vec![p], vec![q]]);
    }

    fn silu_chain(m: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let mut prev = b.add("x", OpKind::Input { shape: shape() }, Domain::Boundary, &[]);
        for i in 0..m {
            prev = b.add(format!("s{i}"), OpKind::Silu, Domain::Spatial, &[prev]);
        }
        b.finish(vec![prev]).unwrap()
    }

    #[test]
    fn static_model_hand_traces() {
        let s = shape().numel() * 4;
        assert_eq!(estimate_peak_memory(&silu_chain(1), None, 4), 2 * s);
        assert_eq!(estimate_peak_memory(&silu_chain(5), None, 4), 2 * s);
        let g = silu_chain(5);
        let gg = group_operators(&g, &cfg(4)).unwrap();
        assert_eq!(gg.groups.len(), 1);
        assert_eq!(estimate_peak_memory(&g, Some(&gg), 4), s + s + 2 * s / 4);
    }

    #[test]
    fn spatial_k_is_clamped_to_bt() {
        let g = silu_chain(2);
        let gg = group_operators(&g, &cfg(100)).unwrap();
        assert_eq!(gg.groups[0].plan, plan_spatial(4, 4).unwrap());
        assert!(group_operators(&g, &cfg(0)).is_err());
    }
}
