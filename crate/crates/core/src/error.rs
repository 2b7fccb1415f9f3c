use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong inside the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} outside the domain of the operation")]
    Domain { op: &'static str, value: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("frozen weights changed during fine-tuning: {0}")]
    FrozenViolation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
