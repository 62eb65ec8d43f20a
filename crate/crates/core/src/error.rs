use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("grid mismatch: map is {map_h}x{map_w}, grid is {grid_h}x{grid_w}")]
    GridMismatch {
        map_h: usize,
        map_w: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("pillar coordinate ({row}, {col}) outside {h}x{w} grid")]
    CoordOutOfBounds {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },
    #[error("feature width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("timestamps must increase: previous {prev}, current {cur}")]
    NonMonotonicTime { prev: f64, cur: f64 },
    #[error("negative time offset {0}")]
    NegativeTimeOffset(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("box placement failed: {0}")]
    Placement(String),
    #[error("occlusion layout failed: {0}")]
    OcclusionLayout(String),
    #[error("non-finite loss at step {step} (lr {lr}): seg {seg}, center {center}, box {box_loss}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        seg: f64,
        center: f64,
        box_loss: f64,
    },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("pipeline invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
