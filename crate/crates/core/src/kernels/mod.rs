//! Forward/backward numeric kernels.

mod conv;
mod gemm;
mod init;
mod linear;
mod loss;
mod optim;
mod pool;

pub use conv::{conv2d_backward, conv2d_backward_parts, conv2d_forward, ConvGrads};
pub use init::{he_init, he_init_with};
pub use linear::{linear_backward, linear_backward_parts, linear_forward};
pub use loss::{accuracy, one_hot, softmax, softmax_crossentropy};
pub use optim::{adam_step, sgd_momentum_step, Adam, AdamConfig, SgdMomentum};
pub use pool::{avgpool2x2_backward, avgpool2x2_forward};
