use alloc::string::String;
use alloc::vec::Vec;

use crate::maps::Shape;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index} (batch {batch}, class {class}, y {y}, x {x})")]
    NonFinite {
        index: usize,
        batch: usize,
        class: usize,
        y: usize,
        x: usize,
        value: f64,
    },
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("buffer of length {actual} does not match shape {shape} ({expected} elements)")]
    BufferLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("class index {value} at position {index} is outside [0, {classes})")]
    InvalidClass {
        index: usize,
        value: u8,
        classes: usize,
    },
    #[error("at least {min} classes required, got {actual}")]
    TooFewClasses { min: usize, actual: usize },
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
