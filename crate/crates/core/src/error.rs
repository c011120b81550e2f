use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("similarity undefined: tensor is identically zero")]
    ZeroNorm,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {node} references missing input {input}")]
    DanglingInput { node: usize, input: usize },
    #[error("graph contains a cycle through node {0}")]
    Cycle(usize),
    #[error("node {0} is not reachable from any output")]
    Unreachable(usize),
    #[error("node ids must be dense and ordered; found {found} at position {position}")]
    BadNodeId { position: usize, found: usize },
    #[error("node {node}: {reason}")]
    InvalidNode { node: usize, reason: String },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("no node labelled {0:?}")]
    UnknownLabel(String),
    #[error("segment is not a chain: {0}")]
    NotAChain(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape inference failed at node {node}: {source}")]
    ShapeInference { node: usize, source: KernelError },
    #[error("malformed graph document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SliceError {
    #[error("slice count {count} outside 1..={extent}")]
    BadSliceCount { count: usize, extent: usize },
    #[error("plan does not fit tensor: {0}")]
    PlanShapeMismatch(String),
    #[error("sub-features leave part of the parent uncovered")]
    IncompleteCover,
    #[error("sub-features overlap")]
    OverlappingRegions,
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("missing parameter {0:?}")]
    Missing(String),
    #[error("parameter {name:?} has {got} elements, expected {expected}")]
    WrongSize { name: String, got: usize, expected: usize },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("node {label}: {source}")]
    Kernel { label: String, source: KernelError },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("input shape {got} does not match graph input {expected}")]
    InputShape { got: String, expected: String },
    #[error("invalid mode configuration: {0}")]
    InvalidMode(String),
    #[error("pipeline stalled in group {0}")]
    PipelineStall(String),
    #[error("non-finite values after {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum RehashError {
    #[error("gamma must be in (0,1], got {0}")]
    BadThreshold(f64),
    #[error("schedule covers {schedule} steps but the run has {run}")]
    ScheduleMismatch { schedule: usize, run: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no threshold yields exactly {target} key steps (reachable counts: {reachable:?})")]
    UnreachableTarget { target: usize, reachable: Vec<usize> },
    #[error("similarity map: {0}")]
    BadMap(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<KernelError> for ExecError {
    fn from(source: KernelError) -> Self {
        ExecError::Kernel { label: "<tensor>".into(), source }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Rehash(#[from] RehashError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl RunError {
    /// True when the run was rejected before any computation because of
    /// its inputs, as opposed to failing while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunError::InvalidConfig(_)
                | RunError::Graph(GraphError::InvalidConfig(_))
                | RunError::Rehash(
                    RehashError::BadThreshold(_)
                        | RehashError::ScheduleMismatch { .. }
                        | RehashError::InvalidSchedule(_)
                )
        )
    }
}
