use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::ViewId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed line {line} in {file}: {reason}")]
    MalformedLine { file: String, line: usize, reason: String },
    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),
    #[error("unknown view {0}")]
    UnknownView(ViewId),
    #[error("scene invariant violated: {0}")]
    InvalidScene(String),

    #[error("cluster {0} has zero volume")]
    ZeroVolumeCluster(usize),
    #[error("graph has {nodes} nodes, fewer than the {clusters} requested clusters")]
    TooFewNodes { nodes: usize, clusters: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no valid points produced")]
    EmptyResult,

    #[error("render buffers do not match the forward pass: {0}")]
    MismatchedForward(String),

    #[error("need at least two usable samples, got {0}")]
    InsufficientSamples(usize),
    #[error("degenerate least-squares fit: {0}")]
    DegenerateFit(String),
    #[error("rendered and target maps share no valid pixel")]
    EmptyOverlap,
    #[error("visible set is empty")]
    EmptyVisibleSet,
    #[error("refinement target has no valid pixel")]
    EmptyTarget,
    #[error("no valid seed pixels for PatchMatch")]
    NoValidSeeds,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training views available")]
    NoTrainingViews,

    #[error("loss is not finite: {0}")]
    NonFiniteLoss(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("bad truncation: {0}")]
    BadTruncation(String),
    #[error("volume has no observed voxels")]
    EmptyVolume,
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
