//! Minimal neural-network kernel: layers, reverse-mode gradients, MSE, Adam,
//! and a finite-difference gradient oracle.

mod adam;
mod conv;
mod engine;
mod gradcheck;
mod layer;
mod loss;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use engine::{backward, backward_pass, forward, BackwardPass, BN_EPS, BN_MOMENTUM};
pub use gradcheck::check_gradients;
pub use layer::{Layer, LayerKind, ParamSpec, SpecKind, Stack, KERNEL};
pub use loss::loss_mse;
pub use params::{init_params, BitRepr, ParamEntry, ParamSet, Partition};
pub use tensor::{Scalar, Tensor};
