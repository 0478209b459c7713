//! Covariate balancing estimators with measurement-error corrections.

pub mod balance;
pub mod cli;
pub mod correction;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod error_model;
pub mod experiments;
pub mod linalg;
pub mod solver;

pub use error::{Error, Result};
