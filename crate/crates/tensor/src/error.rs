use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}
