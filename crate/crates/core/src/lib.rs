//! Learning-based model predictive control of a diesel engine's load and
//! NOx emissions.
//!
//! The pipeline: excite a plant, fit a cascaded LSTM surrogate
//! ([`engine`]), control the plant with a condensed SQP receding-horizon
//! controller built on that surrogate ([`nmpc`]), then clone the controller
//! into a small recurrent policy ([`imitation`]). [`harness`] runs any of
//! the controllers in closed loop against [`plant`] and computes the
//! comparison metrics.

pub mod artifact;
pub mod engine;
pub mod error;
pub mod harness;
pub mod imitation;
pub mod linalg;
pub mod nmpc;
pub mod nn;
pub mod plant;
pub mod qp;
pub mod recurrent;
pub mod training;

pub use error::{Error, Result};
