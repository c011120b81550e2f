//! Graph execution in four modes with a byte-accurate memory ledger.
//!
//! * `Reference` runs every node whole, freeing values after their last
//!   reader.
//! * `SlicedLoop` runs each operator group slice by slice through a pool of
//!   per-stage buffers.
//! * `Pipelined` runs the same groups with stages working concurrently on
//!   different slices, reusing the same pool.
//! * `NaiveClip` runs the reference independently on frame chunks.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ExecError, WeightError};
use crate::graph::{Graph, NodeId};
use crate::grouping::{
    group_operators, reference_order, slice_shape, use_counts, ExecItem, GroupedGraph, GroupingConfig, OperatorGroup,
};
use crate::kernels::{apply_kernel_into, StepCtx};
use crate::slicer::{copy_region_into, write_region, Region};
use crate::tensor::{Scalar, Shape5, Tensor};
use crate::weights::WeightBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecMode {
    Reference,
    SlicedLoop,
    Pipelined,
    /// Independent runs on consecutive windows of `chunk` frames.
    NaiveClip { chunk: usize },
}

impl ExecMode {
    pub fn name(&self) -> &'static str {
        match self {
            ExecMode::Reference => "reference",
            ExecMode::SlicedLoop => "slicedloop",
            ExecMode::Pipelined => "pipelined",
            ExecMode::NaiveClip { .. } => "naiveclip",
        }
    }

    pub fn is_grouped(&self) -> bool {
        matches!(self, ExecMode::SlicedLoop | ExecMode::Pipelined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub mode: ExecMode,
    pub grouping: GroupingConfig,
}

impl ExecConfig {
    pub fn new(mode: ExecMode) -> Self {
        ExecConfig { mode, grouping: GroupingConfig::default() }
    }
}

/// One stage working on one slice, with start/finish sequence numbers
/// drawn from a single counter across all threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageEvent {
    pub group: usize,
    pub stage: usize,
    pub slice: usize,
    pub start: u64,
    pub finish: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_ms: f64,
    pub phases: BTreeMap<String, f64>,
}

impl Timing {
    fn add(&mut self, phase: &str, since: Instant) {
        *self.phases.entry(phase.to_string()).or_default() += since.elapsed().as_secs_f64() * 1e3;
    }
}

#[derive(Debug, Clone)]
pub struct ExecOutput<T> {
    pub output: Tensor<T>,
    pub ledger: crate::memory::MemoryLedger,
    pub timing: Timing,
    /// Values of the requested capture nodes, in request order.
    pub captured: Vec<(NodeId, Tensor<T>)>,
    /// Node evaluations performed, counting each node once per run however
    /// many slices it was split into. The input placeholder is not counted.
    pub node_evals: usize,
    /// Scheduler ticks used by pipelined groups.
    pub pipeline_ticks: usize,
    pub stage_events: Vec<StageEvent>,
}

type NodeParams<T> = Vec<Vec<T>>;

/// A graph with its parameters bound and cast to `T`.
#[derive(Debug, Clone)]
pub struct Engine<T> {
    graph: Graph,
    params: Arc<Vec<NodeParams<T>>>,
}

/// Per-stage buffer of a group's pool plus the kernel workspace of the
/// stage that writes it.
struct Slot<T> {
    buf: Tensor<T>,
    scratch: Vec<T>,
}

/// Fixed set of `stages + 1` slice-sized buffers for one group. Slot 0
/// holds the current slice copy, slot `j` the output of stage `j − 1`.
/// A slot is charged to the ledger the first time it is used and stays
/// reserved until the group finishes.
struct BufferPool<T> {
    slots: Vec<Mutex<Slot<T>>>,
    bytes: Vec<usize>,
    reserved: Vec<bool>,
    label: String,
}

impl<T: Scalar> BufferPool<T> {
    fn new(graph: &Graph, group: &OperatorGroup) -> Self {
        let elem = std::mem::size_of::<T>();
        let in_shape = graph.shape(group.input(graph));
        let first: Region = group.plan.regions(in_shape).expect("plan fits its group")[0].clone();
        let mut prev = first.shape_in(in_shape, in_shape.c);
        let mut bytes = vec![prev.numel() * elem];
        for &id in &group.nodes {
            let out = slice_shape(graph, group, id);
            let scratch = graph.node(id).kind.scratch_elems(prev);
            bytes.push((out.numel() + scratch) * elem);
            prev = out;
        }
        let slots = bytes
            .iter()
            .map(|_| Mutex::new(Slot { buf: Tensor::empty_with_capacity(0), scratch: Vec::new() }))
            .collect();
        BufferPool { slots, reserved: vec![false; bytes.len()], bytes, label: group.label.clone() }
    }

    fn reserve(&mut self, slot: usize, ledger: &mut crate::memory::MemoryLedger) {
        if !self.reserved[slot] {
            self.reserved[slot] = true;
            ledger.alloc(self.bytes[slot], &format!("{}.slot{slot}", self.label));
        }
    }

    fn release(self, ledger: &mut crate::memory::MemoryLedger) {
        for (slot, (&r, &b)) in self.reserved.iter().zip(&self.bytes).enumerate() {
            if r {
                ledger.free(b, &format!("{}.slot{slot}", self.label));
            }
        }
    }
}

/// Values computed so far plus liveness bookkeeping.
struct Values<T> {
    values: Vec<Option<Tensor<T>>>,
    uses: Vec<usize>,
}

impl<T: Scalar> Values<T> {
    fn get(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("value is live when read")
    }

    fn release(&mut self, graph: &Graph, reads: &[NodeId], ledger: &mut crate::memory::MemoryLedger) {
        let mut reads = reads.to_vec();
        reads.sort_unstable();
        reads.dedup();
        for r in reads {
            self.uses[r] -= 1;
            if self.uses[r] == 0 {
                let v = self.values[r].take().expect("released value was live");
                ledger.free(v.nbytes(), &graph.node(r).label);
            }
        }
    }
}

impl<T: Scalar> Engine<T> {
    pub fn new(graph: Graph, weights: &WeightBundle) -> Result<Self, ExecError> {
        let mut params = Vec::with_capacity(graph.len());
        for node in graph.nodes() {
            let Some(key) = &node.param_ref else {
                params.push(Vec::new());
                continue;
            };
            let input = graph.shape(node.inputs[0]);
            let mut bound = Vec::new();
            for spec in node.kind.param_specs(input) {
                let name = format!("{key}.{}", spec.name);
                let entry = weights.get(&name)?;
                if entry.shape != spec.shape {
                    return Err(WeightError::WrongSize { name, got: entry.data.len(), expected: spec.numel() }.into());
                }
                bound.push(entry.data.iter().map(|&v| T::cast_f32(v)).collect());
            }
            params.push(bound);
        }
        Ok(Engine { graph, params: Arc::new(params) })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Same parameters on a graph with identical nodes but a different
    /// input shape.
    pub fn rebind(&self, shape: Shape5) -> Result<Engine<T>, ExecError> {
        Ok(Engine { graph: self.graph.rebind_input(shape)?, params: Arc::clone(&self.params) })
    }

    /// Engine for everything strictly downstream of `cut`, taking `cut`'s
    /// value as its input.
    pub fn tail(&self, cut: NodeId) -> Result<Engine<T>, ExecError> {
        let (graph, origin) = self.graph.tail_from(cut)?;
        let params = origin.iter().map(|&o| self.params[o].clone()).collect();
        Ok(Engine { graph, params: Arc::new(params) })
    }

    pub fn group(&self, cfg: &GroupingConfig) -> Result<GroupedGraph, ExecError> {
        Ok(group_operators(&self.graph, cfg)?)
    }

    pub fn execute(
        &self,
        cfg: &ExecConfig,
        input: &Tensor<T>,
        ctx: StepCtx,
        capture: &[NodeId],
    ) -> Result<ExecOutput<T>, ExecError> {
        let start = Instant::now();
        let mut out = match cfg.mode {
            ExecMode::NaiveClip { chunk } => {
                if !capture.is_empty() {
                    return Err(ExecError::InvalidMode("naive clip runs cannot capture values".into()));
                }
                self.execute_clips(chunk, input, ctx)?
            }
            mode => {
                let grouped = if mode.is_grouped() { Some(self.group(&cfg.grouping)?) } else { None };
                self.execute_items(grouped.as_ref(), mode == ExecMode::Pipelined, input, ctx, capture)?
            }
        };
        out.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
        if !out.output.is_finite() {
            return Err(ExecError::NonFinite(format!("{} run", cfg.mode.name())));
        }
        Ok(out)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<NodeId, ExecError> {
        let id = self.graph.input_node()?;
        let expected = self.graph.shape(id);
        if input.shape() != expected {
            return Err(ExecError::InputShape { got: input.shape().to_string(), expected: expected.to_string() });
        }
        if self.graph.outputs().len() != 1 {
            return Err(ExecError::InvalidMode("graphs must have exactly one output".into()));
        }
        Ok(id)
    }

    fn execute_items(
        &self,
        grouped: Option<&GroupedGraph>,
        pipelined: bool,
        input: &Tensor<T>,
        ctx: StepCtx,
        capture: &[NodeId],
    ) -> Result<ExecOutput<T>, ExecError> {
        let graph = &self.graph;
        let input_id = self.check_input(input)?;
        let (items, groups): (Vec<ExecItem>, &[OperatorGroup]) = match grouped {
            Some(g) => (g.order.clone(), &g.groups),
            None => (reference_order(graph), &[]),
        };
        if let Some(g) = grouped {
            for &c in capture {
                if !is_materialised(g, c) {
                    return Err(ExecError::InvalidMode(format!(
                        "{} is inside a group and never materialised",
                        graph.node(c).label
                    )));
                }
            }
        }
        let mut vals = Values { values: vec![None; graph.len()], uses: use_counts(graph, &items, groups) };
        let mut ledger = crate::memory::MemoryLedger::new();
        let mut timing = Timing::default();
        let mut captured = Vec::new();
        let mut node_evals = 0;
        let mut pipeline_ticks = 0;
        let mut stage_events = Vec::new();
        let seq = AtomicU64::new(0);

        for item in items {
            let t0 = Instant::now();
            let produced = match item {
                ExecItem::Node(id) if id == input_id => {
                    ledger.alloc(input.nbytes(), "input");
                    vals.values[id] = Some(input.clone());
                    id
                }
                ExecItem::Node(id) => {
                    let node = graph.node(id);
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| vals.get(i)).collect();
                    let out_shape = graph.shape(id);
                    let scratch_elems = node.kind.scratch_elems(ins[0].shape());
                    let mut out = Tensor::empty_with_capacity(out_shape.numel());
                    let mut scratch = Vec::new();
                    ledger.alloc(out_shape.numel() * std::mem::size_of::<T>(), &node.label);
                    ledger.alloc(scratch_elems * std::mem::size_of::<T>(), &format!("{}.scratch", node.label));
                    let refs: Vec<&[T]> = self.params[id].iter().map(Vec::as_slice).collect();
                    apply_kernel_into(&node.kind, &ins, &refs, ctx, &mut out, &mut scratch)
                        .map_err(|source| ExecError::Kernel { label: node.label.clone(), source })?;
                    ledger.free(scratch_elems * std::mem::size_of::<T>(), &format!("{}.scratch", node.label));
                    vals.values[id] = Some(out);
                    vals.release(graph, &node.inputs, &mut ledger);
                    node_evals += 1;
                    timing.add("ungrouped", t0);
                    id
                }
                ExecItem::Group(g) => {
                    let group = &groups[g];
                    let x_id = group.input(graph);
                    let (out, ticks) = if pipelined {
                        self.run_group_pipelined(g, group, vals.get(x_id), ctx, &mut ledger, &seq, &mut stage_events)?
                    } else {
                        (self.run_group_loop(group, vals.get(x_id), ctx, &mut ledger)?, 0)
                    };
                    pipeline_ticks += ticks;
                    vals.values[group.last()] = Some(out);
                    vals.release(graph, &[x_id], &mut ledger);
                    node_evals += group.nodes.len();
                    timing.add("grouped", t0);
                    group.last()
                }
            };
            if capture.contains(&produced) {
                captured.push((produced, vals.get(produced).clone()));
            }
        }
        captured.sort_by_key(|(id, _)| capture.iter().position(|c| c == id));

        let out_id = graph.outputs()[0];
        let output = vals.values[out_id].take().expect("output was computed");
        ledger.free(output.nbytes(), &graph.node(out_id).label);
        debug_assert_eq!(ledger.current_bytes(), 0, "ledger leaked");
        Ok(ExecOutput { output, ledger, timing, captured, node_evals, pipeline_ticks, stage_events })
    }

    fn stage(&self, group: &OperatorGroup, s: usize, input: &Tensor<T>, slot: &mut Slot<T>, ctx: StepCtx) -> Result<(), ExecError> {
        let id = group.nodes[s];
        let node = self.graph.node(id);
        let refs: Vec<&[T]> = self.params[id].iter().map(Vec::as_slice).collect();
        apply_kernel_into(&node.kind, &[input], &refs, ctx, &mut slot.buf, &mut slot.scratch)
            .map_err(|source| ExecError::Kernel { label: node.label.clone(), source })
    }

    fn group_regions(&self, group: &OperatorGroup, x: &Tensor<T>) -> Result<(Vec<Region>, Vec<Region>, Shape5), ExecError> {
        let in_shape = x.shape();
        let out_shape = self.graph.shape(group.last());
        let regions = group.plan.regions(in_shape)?;
        let out_regions = regions.iter().map(|r| r.map_to(in_shape, out_shape)).collect();
        Ok((regions, out_regions, out_shape))
    }

    /// For-loop form: each slice passes through every stage before the
    /// next slice starts.
    fn run_group_loop(
        &self,
        group: &OperatorGroup,
        x: &Tensor<T>,
        ctx: StepCtx,
        ledger: &mut crate::memory::MemoryLedger,
    ) -> Result<Tensor<T>, ExecError> {
        let (regions, out_regions, out_shape) = self.group_regions(group, x)?;
        let mut out = Tensor::zeros(out_shape);
        ledger.alloc(out.nbytes(), &group.label);
        let mut pool = BufferPool::new(&self.graph, group);
        let m = group.nodes.len();
        for (region, out_region) in regions.iter().zip(&out_regions) {
            pool.reserve(0, ledger);
            copy_region_into(x, region, &mut pool.slots[0].get_mut().expect("unshared").buf);
            for s in 0..m {
                pool.reserve(s + 1, ledger);
                let (lo, hi) = pool.slots.split_at_mut(s + 1);
                let src = lo[s].get_mut().expect("unshared");
                let dst = hi[0].get_mut().expect("unshared");
                self.stage(group, s, &src.buf, dst, ctx)?;
            }
            write_region(&mut out, out_region, &pool.slots[m].get_mut().expect("unshared").buf);
        }
        pool.release(ledger);
        Ok(out)
    }

    /// Pipelined form. Stage `j` fires when slot `j` holds a slice and slot
    /// `j + 1` is free, so neighbouring stages never touch the same buffer;
    /// all stages that can fire in a tick run on their own threads. The
    /// scheduler thread loads slices, drains the last slot into the output
    /// and is the only writer to the ledger.
    #[allow(clippy::too_many_arguments)]
    fn run_group_pipelined(
        &self,
        index: usize,
        group: &OperatorGroup,
        x: &Tensor<T>,
        ctx: StepCtx,
        ledger: &mut crate::memory::MemoryLedger,
        seq: &AtomicU64,
        events: &mut Vec<StageEvent>,
    ) -> Result<(Tensor<T>, usize), ExecError> {
        let (regions, out_regions, out_shape) = self.group_regions(group, x)?;
        let mut out = Tensor::zeros(out_shape);
        ledger.alloc(out.nbytes(), &group.label);
        let mut pool = BufferPool::new(&self.graph, group);
        let m = group.nodes.len();
        let n = regions.len();
        // which slice each slot currently holds
        let mut holds: Vec<Option<usize>> = vec![None; m + 1];
        let mut next = 0;
        let mut drained = 0;
        let mut ticks = 0;

        while drained < n {
            let mut progressed = false;
            if holds[0].is_none() && next < n {
                pool.reserve(0, ledger);
                copy_region_into(x, &regions[next], &mut pool.slots[0].lock().expect("slot lock").buf);
                holds[0] = Some(next);
                next += 1;
                progressed = true;
            }
            let fire: Vec<usize> = (0..m).filter(|&s| holds[s].is_some() && holds[s + 1].is_none()).collect();
            for &s in &fire {
                pool.reserve(s + 1, ledger);
            }
            let results: Vec<Result<StageEvent, ExecError>> = {
                let pool = &pool;
                let run = |s: usize| -> Result<StageEvent, ExecError> {
                    let src = pool.slots[s].lock().expect("slot lock");
                    let mut dst = pool.slots[s + 1].lock().expect("slot lock");
                    let start = seq.fetch_add(1, Ordering::SeqCst);
                    self.stage(group, s, &src.buf, &mut dst, ctx)?;
                    let finish = seq.fetch_add(1, Ordering::SeqCst);
                    Ok(StageEvent { group: index, stage: s, slice: holds[s].expect("fired stage holds a slice"), start, finish })
                };
                if fire.len() == 1 {
                    vec![run(fire[0])]
                } else {
                    std::thread::scope(|scope| {
                        let handles: Vec<_> = fire.iter().map(|&s| scope.spawn(move || run(s))).collect();
                        handles.into_iter().map(|h| h.join().expect("stage thread panicked")).collect()
                    })
                }
            };
            for r in results {
                events.push(r?);
            }
            // fired stages are pairwise non-adjacent, so moving tokens in
            // descending order never overwrites a token that has yet to move
            for &s in fire.iter().rev() {
                holds[s + 1] = holds[s].take();
            }
            progressed |= !fire.is_empty();
            if let Some(slice) = holds[m].take() {
                write_region(&mut out, &out_regions[slice], &pool.slots[m].lock().expect("slot lock").buf);
                drained += 1;
            }
            ticks += 1;
            if !progressed {
                return Err(ExecError::PipelineStall(group.label.clone()));
            }
        }
        pool.release(ledger);
        Ok((out, ticks))
    }

    /// Runs the reference on consecutive windows of `chunk` frames and
    /// stitches the results along t.
    fn execute_clips(&self, chunk: usize, input: &Tensor<T>, ctx: StepCtx) -> Result<ExecOutput<T>, ExecError> {
        self.check_input(input)?;
        let t = input.shape().t;
        if chunk == 0 || chunk >= t {
            return Err(ExecError::InvalidMode(format!("naive clip chunk must be in 1..{t}, got {chunk}")));
        }
        let out_shape = self.graph.shape(self.graph.outputs()[0]);
        if out_shape.t != t {
            return Err(ExecError::InvalidMode("naive clip needs an output with the input's frame count".into()));
        }
        let mut output = Tensor::zeros(out_shape);
        let mut ledger = crate::memory::MemoryLedger::new();
        ledger.alloc(output.nbytes(), "naive_clip.output");
        let mut timing = Timing::default();
        let mut node_evals = 0;
        let mut engines: BTreeMap<usize, Engine<T>> = BTreeMap::new();
        for start in (0..t).step_by(chunk) {
            let len = chunk.min(t - start);
            let t0 = Instant::now();
            let part = input.narrow_t(start, len)?;
            let engine = match engines.entry(len) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(self.rebind(part.shape())?),
            };
            let run = engine.execute_items(None, false, &part, ctx, &[])?;
            output.write_t(start, &run.output)?;
            ledger.absorb(&run.ledger);
            node_evals += run.node_evals;
            timing.add(&format!("chunk.{start}"), t0);
        }
        ledger.free(output.nbytes(), "naive_clip.output");
        Ok(ExecOutput {
            output,
            ledger,
            timing,
            captured: Vec::new(),
            node_evals,
            pipeline_ticks: 0,
            stage_events: Vec::new(),
        })
    }
}

/// Runs one group on `x` outside a full-graph execution, charging `ledger`
/// for its output and pool.
pub fn execute_group<T: Scalar>(
    engine: &Engine<T>,
    group: &OperatorGroup,
    x: &Tensor<T>,
    ctx: StepCtx,
    ledger: &mut crate::memory::MemoryLedger,
    pipelined: bool,
) -> Result<Tensor<T>, ExecError> {
    let expected = engine.graph.shape(group.input(&engine.graph));
    if x.shape() != expected {
        return Err(ExecError::InputShape { got: x.shape().to_string(), expected: expected.to_string() });
    }
    if pipelined {
        let seq = AtomicU64::new(0);
        let mut events = Vec::new();
        Ok(engine.run_group_pipelined(0, group, x, ctx, ledger, &seq, &mut events)?.0)
    } else {
        engine.run_group_loop(group, x, ctx, ledger)
    }
}

/// Ideal wavefront for `stages` stages over `n_slices` slices: entry `τ`
/// lists the `(stage, slice)` pairs active at tick `τ`, i.e. stage `j` on
/// slice `τ − j`. Takes `stages + n_slices − 1` ticks.
pub fn pipeline_schedule(stages: usize, n_slices: usize) -> Vec<Vec<(usize, usize)>> {
    if stages == 0 || n_slices == 0 {
        return Vec::new();
    }
    (0..stages + n_slices - 1)
        .map(|tick| {
            (0..stages)
                .filter(|&j| tick >= j && tick - j < n_slices)
                .map(|j| (j, tick - j))
                .collect()
        })
        .collect()
}

/// Checks recorded stage events against the pipeline contract: a slice
/// enters stage `j + 1` only after finishing stage `j`, and slice `i + 1`
/// enters stage `j` only after slice `i` has left it.
pub fn check_pipeline_contract(events: &[StageEvent]) -> Result<(), String> {
    let mut by_key: BTreeMap<(usize, usize, usize), StageEvent> = BTreeMap::new();
    for e in events {
        if e.finish <= e.start {
            return Err(format!("stage {} slice {} finished before starting", e.stage, e.slice));
        }
        if by_key.insert((e.group, e.stage, e.slice), *e).is_some() {
            return Err(format!("stage {} ran slice {} twice", e.stage, e.slice));
        }
    }
    for (&(g, j, i), e) in &by_key {
        if j > 0 {
            let prev = by_key.get(&(g, j - 1, i)).ok_or(format!("slice {i} skipped stage {}", j - 1))?;
            if prev.finish > e.start {
                return Err(format!("slice {i} entered stage {j} before leaving stage {}", j - 1));
            }
        }
        if i > 0 {
            let prev = by_key.get(&(g, j, i - 1)).ok_or(format!("slice {} never ran stage {j}", i - 1))?;
            if prev.finish > e.start {
                return Err(format!("slice {i} entered stage {j} before slice {} left", i - 1));
            }
        }
    }
    Ok(())
}

/// True for nodes whose output can be captured under `grouped`.
pub fn is_materialised(grouped: &GroupedGraph, id: NodeId) -> bool {
    !grouped.groups.iter().any(|g| g.nodes.contains(&id) && g.last() != id)
}
