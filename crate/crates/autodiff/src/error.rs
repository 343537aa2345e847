use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape [{rows}, {cols}]")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("parameter sets differ in structure: {0}")]
    StructureMismatch(String),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}
