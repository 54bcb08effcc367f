//! Incident-guided spatio-temporal traffic forecasting.
//!
//! The crate is organized in three layers:
//!
//! * numeric kernels — [`tensor`], [`tape`], [`gradcheck`], [`params`]:
//!   dense f64 tensors and a reverse-mode gradient recorder;
//! * data — [`data`], [`io`], [`config`]: road graph, incident log,
//!   traffic containers, instance assembly;
//! * model — encoders, incident-conditioned fusion, the decoupled
//!   spatio-temporal backbone, temporal impact decay, training and
//!   evaluation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod reference;
pub mod synth;
pub mod tape;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tiid;
pub mod trainer;

pub use error::{CoreError, Result};
