//! Local losses, their closed-form gradients and the finite-difference harness
//! that checks them.

mod backward;
pub mod gradcheck;
mod losses;

pub use backward::{conv_backward, dense_backward, ff_backward, ff_pair_loss, head_loss, LossGrad};
pub use gradcheck::{grad_check, GradCheckReport, GradCheckable};
pub use losses::{cross_entropy_loss, ff_loss, ff_loss_with_grad, sigmoid, smooth_margin_loss, softplus, LossKind};
