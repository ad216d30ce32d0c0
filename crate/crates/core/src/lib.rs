//! Projection of scalar Fokker–Planck evolutions onto finite-dimensional
//! exponential families, drift reconstruction, and reference oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expfam;
pub mod geometry;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod oracle;
pub mod projection;
pub mod reconstruction;

pub use error::{Error, Result};
pub use expfam::{DensityGrid, ExponentialFamily, FamilyState, GridPolicy};
pub use harness::{ConvergenceReport, ExperimentConfig};
pub use models::{DiffusionModel, TimeSpaceField};
pub use numerics::{Polynomial, QuadratureGrid};
pub use projection::ThetaTrajectory;
pub use reconstruction::PathEnsemble;
