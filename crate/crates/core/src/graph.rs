//! Operator DAG with domain tags, shape inference and the structural
//! queries the grouping pass relies on.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::ops::{Axis, Domain, OpKind, ReceptiveField};
use crate::tensor::Shape5;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: NodeId,
    pub label: String,
    pub kind: OpKind,
    pub domain: Domain,
    pub inputs: Vec<NodeId>,
    /// Weight-bundle key prefix; `None` for parameter-free kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_ref: Option<String>,
}

/// A validated, immutable operator graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<OpNode>,
    outputs: Vec<NodeId>,
    topo: Vec<NodeId>,
    position: Vec<usize>,
    consumers: Vec<Vec<NodeId>>,
    shapes: Vec<Shape5>,
    labels: HashMap<String, NodeId>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<OpNode>,
    outputs: Vec<NodeId>,
    /// Derived `[producer, consumer]` pairs; checked against `inputs` on load.
    #[serde(default)]
    edges: Option<Vec<[NodeId; 2]>>,
}

impl Graph {
    pub fn new(nodes: Vec<OpNode>, outputs: Vec<NodeId>) -> Result<Self, GraphError> {
        let n = nodes.len();
        let mut labels = HashMap::new();
        for (pos, node) in nodes.iter().enumerate() {
            if node.id != pos {
                return Err(GraphError::BadNodeId { position: pos, found: node.id });
            }
            for &i in &node.inputs {
                if i >= n {
                    return Err(GraphError::DanglingInput { node: node.id, input: i });
                }
            }
            if !node.kind.arity().accepts(node.inputs.len()) {
                return Err(GraphError::InvalidNode {
                    node: node.id,
                    reason: format!("{} cannot take {} inputs", node.kind.name(), node.inputs.len()),
                });
            }
            if !node.kind.domain().admits(node.domain) {
                return Err(GraphError::InvalidNode {
                    node: node.id,
                    reason: format!("{} cannot be tagged {:?}", node.kind.name(), node.domain),
                });
            }
            if labels.insert(node.label.clone(), node.id).is_some() {
                return Err(GraphError::DuplicateLabel(node.label.clone()));
            }
        }
        if outputs.is_empty() {
            return Err(GraphError::Malformed("graph has no outputs".into()));
        }
        for &o in &outputs {
            if o >= n {
                return Err(GraphError::DanglingInput { node: o, input: o });
            }
        }

        let mut consumers = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        for node in &nodes {
            for &i in &node.inputs {
                consumers[i].push(node.id);
                indegree[node.id] += 1;
            }
        }
        // Kahn's algorithm, always taking the smallest ready id, so the order
        // is deterministic and matches construction order for built graphs.
        let mut ready: BTreeSet<NodeId> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(id) = ready.pop_first() {
            topo.push(id);
            for &c in &consumers[id] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(stuck));
        }

        let mut reachable = vec![false; n];
        let mut stack = outputs.clone();
        while let Some(id) = stack.pop() {
            if !std::mem::replace(&mut reachable[id], true) {
                stack.extend(&nodes[id].inputs);
            }
        }
        if let Some(dead) = reachable.iter().position(|r| !r) {
            return Err(GraphError::Unreachable(dead));
        }

        let mut position = vec![0; n];
        for (p, &id) in topo.iter().enumerate() {
            position[id] = p;
        }
        let mut shapes = vec![Shape5 { b: 1, t: 1, c: 1, h: 1, w: 1 }; n];
        for &id in &topo {
            let node = &nodes[id];
            let ins: Vec<Shape5> = node.inputs.iter().map(|&i| shapes[i]).collect();
            shapes[id] = node
                .kind
                .infer_shape(&ins)
                .map_err(|source| GraphError::ShapeInference { node: id, source })?;
        }
        Ok(Graph { nodes, outputs, topo, position, consumers, shapes, labels })
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    /// Index of `id` in the topological order.
    pub fn position(&self, id: NodeId) -> usize {
        self.position[id]
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id]
    }

    pub fn shape(&self, id: NodeId) -> Shape5 {
        self.shapes[id]
    }

    pub fn find_label(&self, label: &str) -> Result<NodeId, GraphError> {
        self.labels.get(label).copied().ok_or_else(|| GraphError::UnknownLabel(label.to_string()))
    }

    /// The single `Input` node.
    pub fn input_node(&self) -> Result<NodeId, GraphError> {
        let mut inputs = self.nodes.iter().filter(|n| matches!(n.kind, OpKind::Input { .. }));
        match (inputs.next(), inputs.next()) {
            (Some(n), None) => Ok(n.id),
            _ => Err(GraphError::Malformed("expected exactly one input node".into())),
        }
    }

    /// Nodes that do real work, i.e. everything except the input placeholder.
    pub fn compute_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.kind, OpKind::Input { .. })).count()
    }

    /// Checks that `segment` is a chain: non-empty, strictly increasing in
    /// topological order, and each node consumes its predecessor.
    pub fn check_chain(&self, segment: &[NodeId]) -> Result<(), GraphError> {
        if segment.is_empty() {
            return Err(GraphError::NotAChain("empty segment".into()));
        }
        if let Some(&bad) = segment.iter().find(|&&id| id >= self.len()) {
            return Err(GraphError::NotAChain(format!("node {bad} does not exist")));
        }
        for pair in segment.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if self.position[b] <= self.position[a] || !self.nodes[b].inputs.contains(&a) {
                return Err(GraphError::NotAChain(format!("node {b} does not follow node {a}")));
            }
        }
        Ok(())
    }

    /// Composed receptive field of a chain along one axis.
    pub fn receptive_field(&self, segment: &[NodeId], axis: Axis) -> Result<ReceptiveField, GraphError> {
        self.check_chain(segment)?;
        Ok(segment
            .iter()
            .fold(ReceptiveField::POINT, |rf, &id| rf.then(self.nodes[id].kind.receptive_field(axis))))
    }

    /// Same graph with the input placeholder re-declared at `shape`.
    pub fn rebind_input(&self, shape: Shape5) -> Result<Graph, GraphError> {
        let input = self.input_node()?;
        let mut nodes = self.nodes.clone();
        nodes[input].kind = OpKind::Input { shape };
        Graph::new(nodes, self.outputs.clone())
    }

    /// The sub-graph computing the outputs from `cut`'s value: every node
    /// strictly downstream of `cut`, fed by a new input placeholder in its
    /// place. Fails if any of those nodes also reads a value produced
    /// upstream of the cut, since that value would not be available.
    ///
    /// Returns the sub-graph and, for each of its nodes, the id of the
    /// corresponding node here.
    pub fn tail_from(&self, cut: NodeId) -> Result<(Graph, Vec<NodeId>), GraphError> {
        let mut downstream = vec![false; self.len()];
        downstream[cut] = true;
        for &id in &self.topo[self.position[cut] + 1..] {
            downstream[id] = self.nodes[id].inputs.iter().any(|&i| downstream[i]);
        }
        let tail: Vec<NodeId> = self.topo.iter().copied().filter(|&id| downstream[id] && id != cut).collect();
        for &o in &self.outputs {
            if !downstream[o] {
                return Err(GraphError::NotAChain(format!("output {o} does not depend on node {cut}")));
            }
        }
        let mut remap = HashMap::new();
        remap.insert(cut, 0);
        let mut origin = vec![cut];
        let mut nodes = vec![OpNode {
            id: 0,
            label: format!("{}.cached", self.nodes[cut].label),
            kind: OpKind::Input { shape: self.shapes[cut] },
            domain: Domain::Boundary,
            inputs: Vec::new(),
            param_ref: None,
        }];
        for &id in &tail {
            let src = &self.nodes[id];
            let inputs = src
                .inputs
                .iter()
                .map(|i| {
                    remap.get(i).copied().ok_or_else(|| {
                        GraphError::NotAChain(format!(
                            "{} reads {} which is upstream of the cut",
                            src.label, self.nodes[*i].label
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let new_id = nodes.len();
            remap.insert(id, new_id);
            origin.push(id);
            nodes.push(OpNode { id: new_id, inputs, ..src.clone() });
        }
        let outputs = self.outputs.iter().map(|o| remap[o]).collect();
        Ok((Graph::new(nodes, outputs)?, origin))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&i| [i, n.id]))
            .collect();
        serde_json::to_value(GraphDoc { nodes: self.nodes.clone(), outputs: self.outputs.clone(), edges: Some(edges) })
            .expect("graph documents always serialise")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Graph, GraphError> {
        let doc: GraphDoc = serde_json::from_value(value.clone()).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let graph = Graph::new(doc.nodes, doc.outputs)?;
        if let Some(edges) = doc.edges {
            let mut listed: Vec<[NodeId; 2]> = edges;
            let mut actual: Vec<[NodeId; 2]> =
                graph.nodes.iter().flat_map(|n| n.inputs.iter().map(move |&i| [i, n.id])).collect();
            listed.sort_unstable();
            actual.sort_unstable();
            if listed != actual {
                return Err(GraphError::Malformed("edge list disagrees with node inputs".into()));
            }
        }
        Ok(graph)
    }
}

/// Incremental builder that assigns dense ids and derives labels.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<OpNode>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node. Kinds with parameters use the label as weight key.
    pub fn add(&mut self, label: impl Into<String>, kind: OpKind, domain: Domain, inputs: &[NodeId]) -> NodeId {
        let label = label.into();
        let id = self.nodes.len();
        let has_params = matches!(
            kind,
            OpKind::Conv2d { .. }
                | OpKind::TemporalConv { .. }
                | OpKind::GroupNorm { .. }
                | OpKind::LayerNorm { .. }
                | OpKind::Linear { .. }
                | OpKind::StepBias
                | OpKind::SpatialAttention
                | OpKind::TemporalAttention
        );
        let param_ref = has_params.then(|| label.clone());
        self.nodes.push(OpNode { id, label, kind, domain, inputs: inputs.to_vec(), param_ref });
        id
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> Result<Graph, GraphError> {
        Graph::new(self.nodes, outputs)
    }
}
