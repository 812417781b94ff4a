//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar returns gradients for the leaves. The
//! operation set is the one needed by small transformer and recurrent models:
//! broadcasting arithmetic, matrix products, reductions, softmax and layer norm.

mod graph;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::AdamW;
pub use params::{Bound, ParamSet};

/// Dynamically shaped `f64` array used for every value on the tape.
pub type Tensor = ndarray::ArrayD<f64>;
