//! Functional data pipeline for panels of cumulative-count curves.
//!
//! Raw per-city series are aligned to epidemic time ([`ingest`]), smoothed
//! onto a shared clamped B-spline basis ([`basis`], [`curve`]), clustered into
//! ordered alert levels on the curves and their derivatives ([`cluster`]),
//! and regressed on scalar covariates with pointwise mean and L1-penalized
//! quantile regressions whose coefficient paths are smoothed back onto the
//! basis ([`fosr`]).

// `!(a > b)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod cluster;
pub mod curve;
pub mod error;
pub mod fosr;
pub mod ingest;
pub mod io;
pub mod manifest;

pub use basis::BasisSystem;
pub use cluster::ClusterModel;
pub use curve::{FunctionalDataset, RawCurve, SmoothedCurve};
pub use error::{Error, Result};
pub use fosr::{DesignMatrix, MeanFitModel, QuantileFitModel};
