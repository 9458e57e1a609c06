//! Risk-aligned conditional scenario generation.
//!
//! Generators are trained so that the risk of policy-induced outcomes on
//! synthetic scenarios matches the risk on real data, as measured by strictly
//! consistent scoring rules for quantiles, expectiles and the joint
//! (VaR, ES) pair. An adversarial trading policy searches for the worst-case
//! discrepancy during training.

pub mod baselines;
pub mod checkpoint;
pub mod datapipe;
pub mod diffcore;
pub mod error;
pub mod generators;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod risk;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
