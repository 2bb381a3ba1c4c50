//! Household hot-water demand forecasting for heat-pump tanks.
//!
//! The crate covers the whole chain from sparse sensor logs to start/stop
//! commands: [`ingest`] regularizes raw logs, [`features`] builds lag
//! predictors, [`gbdt`] and [`neuralnet`] forecast the mid-tank temperature,
//! [`iforest`] turns forecast drops into shower events, [`calendar`] compiles
//! them into a weekday × hour demand grid and a steering plan, and
//! [`simulator`] provides synthetic households with known ground truth.
//! [`pipeline`] chains the stages with a run registry.

// Validation is written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calendar;
pub mod error;
pub mod features;
pub mod gbdt;
pub mod iforest;
pub mod ingest;
pub mod metrics;
pub mod neuralnet;
pub mod par;
pub mod pipeline;
pub mod simulator;

pub use error::{Error, Result};
pub use par::Exec;
