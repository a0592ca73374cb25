//! Minimal dense-tensor engine with a tape-based reverse-mode autodiff.
//!
//! Everything here is sized for volumetric networks of a few thousand voxels:
//! no broadcasting, no batching, no device abstraction. Tensors use a
//! channel-first row-major layout (`C×X×Y×Z`).

mod conv;
mod dense;
mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use conv::{conv3d_forward, conv3d_output_extent};
pub use dense::Dense;
pub use error::AutogradError;
pub use gradcheck::{grad_check, grad_check_coords, grad_check_stencil, GradCheckReport, Stencil};
pub use graph::{Activation, Gradients, Graph, Var};
pub use tensor::{DType, Element, Tensor, TensorData, TensorError};

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;
