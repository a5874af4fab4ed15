//! Dense tensors, parameters, reverse-mode autodiff, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod real;
mod rng;
mod tensor;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{gradient_check, FULL_CHECK_LIMIT, SAMPLED_ENTRIES};
pub use graph::{Gradients, Graph, Var, ROPE_BASE};
pub use params::{GradBuffer, ParamId, ParamSource, ParamStore, Parameter, ShadowStore, TargetView};
pub use real::Real;
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::{matmul, rmsnorm, softmax_rows, Tensor, Trans, RMS_EPS};
