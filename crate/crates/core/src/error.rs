use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid quantization scale {0}; must be positive and finite")]
    InvalidScale(f64),

    #[error("invalid bit-width {0}")]
    InvalidBits(u32),

    #[error("integer {value} at index {index} outside [{q_min}, {q_max}]")]
    OutOfRange {
        index: usize,
        value: i32,
        q_min: i32,
        q_max: i32,
    },

    #[error("empty quantization range [{min}, {max}]")]
    EmptyRange { min: f64, max: f64 },

    #[error("empty tensor")]
    EmptyTensor,

    #[error("tensor is all zero; skip entropy calibration for it")]
    AllZero,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("negative variance {value} in channel {channel}")]
    NegativeVariance { channel: usize, value: f64 },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("variable {0} is not on the recorded trace")]
    NotOnTrace(usize),

    #[error("could not place {objects} objects without overlap after {attempts} attempts")]
    Placement { objects: usize, attempts: usize },

    #[error("requested {requested} items but only {available} are available")]
    InsufficientData { requested: usize, available: usize },

    #[error("non-finite loss in unit `{unit}` at iteration {iter}")]
    NanLoss { unit: String, iter: usize },

    #[error("first and last layers must be marked full-precision exempt")]
    MissingFpExempt,

    #[error("training did not reach the AP floor: final AP {ap:.4} < {floor:.4}")]
    NonConvergence { ap: f64, floor: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
