//! Dense float64 tensors, a reverse-mode tape, optimizers and gradient checking.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Offender};
pub use optim::{sgd_step, Adam, ParamId, ParamStore, Parameter};
pub use rng::{key_of, Rng, RNG_ALGORITHM};
pub use tape::{Gradients, Tape, Var, BCE_LOGIT_CLAMP};
pub use tensor::{
    cross_entropy_logits, gelu_scalar, layer_norm, matmul, matmul_bt, sigmoid, sigmoid_scalar,
    softmax_rows, softplus, Tensor,
};
