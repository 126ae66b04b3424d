//! Dense tensors, the reverse-mode tape, special functions, samplers and
//! quadrature shared by every other module.

pub mod graph;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use rng::{sample_gamma, sample_std_normal, sample_std_t, RngStream};
pub use special::{digamma, ln_gamma};
pub use tensor::Tensor;
