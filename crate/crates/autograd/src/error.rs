use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("region mask selects no voxels")]
    DegenerateRegion,
}
