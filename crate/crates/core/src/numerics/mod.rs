//! Dense tensors, a reverse-mode tape, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
pub mod layers;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, FD_STEP};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use tape::{sigmoid, SparseRows, Tape, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::Tensor;
