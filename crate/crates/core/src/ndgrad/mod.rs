//! Dense-tensor numeric core with reverse-mode gradients for the layer set
//! the models need, plus SGD with global-norm gradient clipping.
//!
//! Everything runs in 64-bit floats so finite-difference checks are
//! meaningful. Determinism contract: identical seeds, inputs and configs
//! produce bitwise-identical parameters after any number of steps; the
//! parallel paths only ever split work into fixed chunks whose results are
//! combined in a fixed order.

pub mod check;
pub mod gemm;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use layers::LayerNode;
pub use ops::{Act, Padding, RunningStats};
pub use optim::{global_grad_norm, sgd_step, OptimizerConfig};
pub use tensor::{LrGroup, Parameter, Tensor};
