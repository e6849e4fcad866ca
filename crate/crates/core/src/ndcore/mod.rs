//! Dense arrays, reverse-mode derivatives for the supported networks, and
//! finite-difference second-order probes.

mod fd;
mod network;
mod tensor;

pub use fd::{fd_step, hessian_fd, hessian_fd_raw, hessian_fd_with, objective_hessian, DENSE_CAP};
pub(crate) use fd::check_cap;
pub use network::{
    accuracy, forward, grad_loss, loss, per_sample_loglik_grad, LayerId, Objective,
};
pub(crate) use network::{backward, chunked_sum, class_scores, forward_pass};
pub use tensor::{axpy, dot, norm, Matrix, Segment, Tensor, WeightVector};
pub(crate) use tensor::check_finite;
