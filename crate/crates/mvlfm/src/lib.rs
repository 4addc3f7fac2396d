//! Multivariate multilevel longitudinal functional models.
//!
//! Pipeline: represent each multivariate curve on a spline basis, pool the
//! coefficients into a multivariate FPCA, then model each FPC score with a
//! scalar linear mixed model whose random effects vary along longitudinal
//! time. Prediction, covariance surfaces, bootstrap bands and a simulation
//! harness are built on top.

pub mod basis;
pub mod data;
pub mod fpca;
pub mod lmm;
pub mod model;
pub mod rng;
pub mod sim;
