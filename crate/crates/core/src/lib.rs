//! Discrete-event simulator and control plane for serving many LLMs on a
//! shared GPU cluster with one-for-many prewarming.
//!
//! The crate is organised along the serving stack: [`trace`] produces and
//! analyses request streams, [`predictor`] forecasts per-window load,
//! [`placement`] and [`manager`] decide where models are prewarmed,
//! [`cluster`] and [`memswitch`] model GPU memory, [`autoscaler`] routes
//! requests and sizes instances, and [`engine`] ties it all together.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoscaler;
pub mod cluster;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod manager;
pub mod memswitch;
pub mod placement;
pub mod predictor;
pub mod rng;
pub mod trace;

/// Simulation time in milliseconds.
pub type Millis = u64;
