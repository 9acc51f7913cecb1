//! Error type shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("axis {axis} has zero extent")]
    DegenerateAxis { axis: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("axis {axis} of the grid is not equispaced")]
    GridNotEquispaced { axis: usize },
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),
    #[error("observation {obs} of sample '{sample}' lies outside the grid")]
    ObservationOutsideGrid { sample: String, obs: usize },
    #[error("no observation inside the kernel window at {node}")]
    AllWeightsZero { node: usize },
    #[error("bandwidth too small: {nodes} node(s) have an empty kernel window")]
    BandwidthTooSmall { nodes: usize },
    #[error("no sample has at least two observations")]
    NoPairs,
    #[error("halo {halo} on axis {axis} is smaller than the stencil radius {radius}")]
    HaloTooSmall { axis: usize, halo: usize, radius: usize },
    #[error("block core on axis {axis} is smaller than its halo")]
    BlockTooSmall { axis: usize },
    #[error("invalid block plan: {0}")]
    InvalidPlan(String),
    #[error("eigendecomposition failed: {0}")]
    EigFailure(String),
    #[error("sketch size {q} is smaller than the requested {requested} components")]
    SketchTooSmall { q: usize, requested: usize },
    #[error("covariance of sample '{sample}' is not positive definite")]
    SingularCovariance { sample: String },
    #[error("point {point:?} lies outside the model domain")]
    OutOfDomain { point: Vec<f64> },
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<FpcaError> },
}

impl FpcaError {
    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        FpcaError::Parse { source_name: source_name.into(), line, message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FpcaError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ FpcaError::Stage { .. } => e,
            e => FpcaError::Stage { stage, source: Box::new(e) },
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &FpcaError {
        match self {
            FpcaError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, FpcaError>;
