//! Estimation, evaluation, and diagnostics for optimal minimal allocation
//! rules: the smallest within-cluster treatment fraction that achieves a
//! pre-specified outcome target, under within-cluster spillovers.
//!
//! Two estimation routes are provided. The indirect route fits an outcome
//! regression and reads the allocation fraction off the implied policy
//! surface by grid search. The direct route minimizes a tailored empirical
//! risk with a Gaussian-kernel machine trained by a difference-of-convex
//! algorithm, with cross-fitted nuisance models and undersampling.

pub mod data;
pub mod diagnostics;
pub mod evaluation;
pub mod error;
pub mod loss;
pub mod estimands;
pub mod models;
pub mod nuisance;
pub mod pipeline;
pub mod simulation;
pub mod solver;
pub mod util;

pub use data::{ClusterData, Dataset, Household};
pub use error::{Error, Result};
pub use estimands::{Estimand, Grid, OutcomeSurface, Target};
pub use models::{OutcomeModel, PropensityModel};
