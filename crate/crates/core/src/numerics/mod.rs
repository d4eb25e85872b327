//! Dense tensors, reverse-mode differentiation, Adam and Xavier initialisation.

mod gradcheck;
mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, check_tape, op_suite, relative_error, GradCheckReport, FD_STEP};
pub use init::{xavier_bound, xavier_init, xavier_uniform};
pub use optim::{Adam, AdamConfig, DEFAULT_LEARNING_RATE};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, softmax_row, Tensor};

