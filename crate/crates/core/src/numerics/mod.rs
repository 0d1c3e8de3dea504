//! Dense fp32 tensors, deterministic matmul kernels, and a reverse-mode
//! tape with finite-difference verification.

pub mod findiff;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, GradSink, Var};
pub use optim::Adam;
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;
