//! Peak-suppression orthogonal transforms: Hadamard-initialized block-diagonal
//! rotations trained by Cayley SGD on a softmax-weighted peak norm.

mod cayley;
mod loss;
mod ortm;
mod train;
mod transform;

pub use cayley::{cayley_step, step_cap};
pub use loss::{centering_project, grad_loss, loss_ps};
pub use ortm::{read_transform, write_transform};
pub use train::{
    finite_difference_audit, mean_weighted_loss, train_psot, Init, LrSchedule, PsotConfig,
    PsotOutcome,
};
pub use transform::{hadamard, orthogonality_error, random_orthogonal, OrthoTransform, ORTHOGONALITY_TOL};
