use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor operations, the model, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Concatenation/softmax axis outside the tensor rank.
    Axis { op: &'static str, axis: usize, rank: usize },
    /// Data length does not match the product of the shape.
    Length { expected: usize, actual: usize },
    /// A scalar-valued hyperparameter is outside its domain.
    Parameter { name: &'static str, value: f64 },
    /// A class label is not in `[0, classes)`.
    Label { label: usize, classes: usize },
    /// Backward was asked to start from a non-scalar value.
    NotScalar { shape: Vec<usize> },
    /// An operation received no input to work on.
    Empty(&'static str),
    /// A gradient or parameter became NaN or infinite.
    NonFinite { group: String },
    /// A token id does not fit the embedding table.
    Token { id: u32, vocab: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Error::Length { expected, actual } => {
                write!(f, "data length {actual} does not match shape size {expected}")
            }
            Error::Parameter { name, value } => write!(f, "invalid {name}: {value}"),
            Error::Label { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::NotScalar { shape } => write!(f, "expected a scalar, got shape {shape:?}"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::NonFinite { group } => write!(f, "non-finite values in {group}"),
            Error::Token { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
