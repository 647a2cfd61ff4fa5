//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_coords, grad_check_coords_at, grad_check_report, grad_check_report_at,
    rel_error, GradCheckReport, ScalarFn,
};
pub(crate) use graph::Op;
pub use graph::{Graph, Var};
pub use tensor::{Element, Tensor};
