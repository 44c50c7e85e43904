//! Lumped-parameter model of a closed-loop cryogenic helium circulation plant
//! that cools several experiments in parallel from a pair of remote cold heads.
//!
//! The crate covers helium properties, component models, the flow network,
//! steady-state energy balances, time-domain simulation with operator events,
//! and the inference formulas used to read flows and loads back out of
//! temperature measurements.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod components;
pub mod error;
pub mod gasprops;
pub mod network;
pub mod plant;
pub mod scenario;
pub mod session;
pub mod steadystate;
pub mod telemetry;
pub mod transient;
pub mod units;

pub use error::{Error, Result};
