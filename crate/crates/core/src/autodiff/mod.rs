//! Small static-graph reverse-mode differentiation engine.
//!
//! A [`Graph`] is built once with shape inference, then evaluated with
//! [`forward`] (which retains every activation) and differentiated with
//! [`backward`]. The engine is generic over [`Real`](crate::tensor::Real):
//! training runs in `f32`, gradient verification in `f64`.

mod exec;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use exec::{backward, forward, Activations, Gradients};
pub use gradcheck::{
    check_gradients, relative_error, relative_error_with_floor, GradCheckReport, TensorCheck, DEFAULT_EPSILON,
    LOSS_RELATIVE_FLOOR, MAX_UNRESOLVED_FRACTION, RESOLUTION_TOLERANCE,
};
pub use graph::{Axis, Graph, Node, NodeId, Op};
