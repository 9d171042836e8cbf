//! Causal mediation analysis for a right-censored failure-time outcome when
//! the continuous exposure is measured with error.
//!
//! The estimation pipeline runs in three stages:
//!
//! 1. [`calibrate`] fits the measurement-error and mediator models from the
//!    main study and an external validation study, and builds an exposure
//!    predictor (ORC1, ORC2 or risk-set RRC).
//! 2. [`coxfit`] fits the Cox outcome model with the imputed exposure.
//! 3. [`mediate`] turns the parameters into natural indirect/direct effects,
//!    total effect and mediation proportion; [`infer`] attaches sandwich or
//!    bootstrap uncertainty.
//!
//! [`simulate`] generates synthetic studies and runs replication experiments.

pub mod calibrate;
pub mod cli;
pub mod coxfit;
pub mod dataio;
pub mod error;
pub mod infer;
pub mod mediate;
pub mod quadrature;
pub mod regress;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
