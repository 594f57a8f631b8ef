//! Weakly-supervised micro- and macro-expression spotting.
//!
//! The engine trains on video-level labels over precomputed snippet features
//! (an RGB stream and an optical-flow stream) and emits frame-level expression
//! proposals. Modules follow the data path: [`dataio`] loads or synthesizes
//! corpora, [`cscm`] and [`pipeline`] form the model, [`losses`] holds the
//! training objective, [`spotting`] turns attention into proposals and
//! [`metrics`] scores them. [`train`] ties everything into training runs and
//! leave-one-subject-out evaluation.

pub mod config;
pub mod cscm;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod spotting;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
