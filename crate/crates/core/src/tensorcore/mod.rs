//! Tensors, reverse-mode differentiation, parameters and optimizers.

pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamStore, Parameter, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub(crate) use params::ByteReader;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
