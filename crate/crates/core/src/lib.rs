//! Marginalized effective doses from nonlinear mixed-effects dose-response
//! models.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod marginal;
pub mod models;
pub mod normal;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod simulation;

pub use data::{DataSummary, Dataset, Observation};
pub use error::{Error, Result};
pub use models::{CurveParams, ModelFamily, Param};
