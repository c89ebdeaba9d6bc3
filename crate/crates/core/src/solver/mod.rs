//! The direct estimator's training stack: Gaussian-kernel representer rules
//! fit by a difference-of-convex algorithm, with bandwidth and
//! regularization chosen by cross-validation.

mod cv;
mod dc;
mod kernel;

pub use cv::{cross_validate, CvReport};
pub use dc::{dc_fit, init_points, DcConfig, DcFit};
pub use kernel::{kernel_matrix, kernel_value, median_heuristic, winsorize, KernelRule, WinsorizedRule};
