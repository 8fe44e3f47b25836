//! Reverse-mode automatic differentiation over dense f64 tensors, with the
//! layer set needed by the landmark networks, a finite-difference gradient
//! checker, and the Adam optimizer.
//!
//! A graph and its tensors are confined to one worker at a time; there is
//! no internal locking. Independent graphs may run on separate workers, and
//! parameter tensors move between workers only between steps.

mod adam;
pub mod conv;
mod gemm;
mod gradcheck;
mod graph;
mod ops;

pub use adam::{AdamParams, AdamState, ParamTensor};
pub use conv::Padding;
pub use gradcheck::{finite_diff_check, GradCheckReport, GradCheckSettings};
pub use graph::{Graph, Mode, NodeId, Tensor};
