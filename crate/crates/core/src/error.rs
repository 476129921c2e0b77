//! Error type shared by the core pipeline operations.

use alloc::string::String;
use core::fmt;

/// Errors produced by core operations. Data-quality findings that are not
/// failures (e.g. cloud validation violations) are reported as values, not
/// through this type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An operation that requires at least one element got none.
    EmptyInput(&'static str),
    /// A parameter is outside its documented domain.
    InvalidParam { name: &'static str, reason: String },
    /// Tensor/array dimensions do not line up.
    ShapeMismatch(String),
    /// A cloud's schema name does not match the schema an operation expects.
    SchemaMismatch { expected: String, found: String },
    /// Labels required but absent on the cloud.
    MissingLabels,
    /// A label is not a valid class id for the governing schema.
    LabelOutOfRange {
        index: usize,
        label: u32,
        class_count: usize,
    },
    /// A coordinate is NaN or infinite.
    NonFiniteCoordinate { index: usize },
    /// A neighbor query asked for more points than are available.
    KTooLarge { requested: usize, available: usize },
    /// Model/checkpoint configurations cannot be combined.
    IncompatibleConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::InvalidParam { name, reason } => {
                write!(f, "invalid parameter `{name}`: {reason}")
            }
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::SchemaMismatch { expected, found } => {
                write!(f, "schema mismatch: expected `{expected}`, found `{found}`")
            }
            Error::MissingLabels => write!(f, "point cloud has no labels"),
            Error::LabelOutOfRange {
                index,
                label,
                class_count,
            } => write!(
                f,
                "label {label} at point {index} out of range for {class_count} classes"
            ),
            Error::NonFiniteCoordinate { index } => {
                write!(f, "non-finite coordinate at point {index}")
            }
            Error::KTooLarge {
                requested,
                available,
            } => write!(f, "k={requested} exceeds {available} available candidates"),
            Error::IncompatibleConfig(msg) => write!(f, "incompatible configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
