//! Differentiable tensor operations.
//!
//! Each op produces a new tensor and, when recording is on, attaches the
//! adjoint needed by [`crate::tensor::backward`]. Only the operations the
//! architecture needs are implemented.

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod resize;
mod shape;
mod softmax;
mod tokens;

pub use conv::conv2d;
pub use elementwise::{add, hardswish, relu, scale};
pub use linear::{bmm, linear, matmul};
pub use loss::{cross_entropy_mean, soft_dice_loss, DICE_EPS};
pub use norm::{batch_norm_eval, batch_norm_train, BnLayout, BnStats};
pub use resize::bilinear_resize;
pub use shape::{concat, permute, reshape};
pub use softmax::softmax;
pub use tokens::{add_attention_bias, token_select};

mod reduce;
pub use reduce::{mean_all, sum_all};
