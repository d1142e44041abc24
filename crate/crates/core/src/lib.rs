//! Variational inference for computational imaging.
//!
//! Two learned stages sit on top of an analytic (low-fidelity) observation
//! model:
//!
//! 1. [`forward`]: a multi-fidelity forward model `p(y | x)` trained on a
//!    small set of paired targets and measurements, using the analytic model
//!    as an extra input.
//! 2. [`inverse`]: a conditional VAE `r(x | y)` trained on a large set of
//!    unpaired targets, with training measurements drawn from the forward
//!    model.
//!
//! [`degrade`] and [`diffusion`] provide the analytic observation models,
//! [`baselines`] the comparison systems, [`metrics`] the evaluation and
//! [`pipeline`] the end-to-end experiment runner used by the CLI.

pub mod baselines;
pub mod config;
pub mod cvae;
pub mod data;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod export;
pub mod forward;
pub mod fourier;
pub mod image;
pub mod inverse;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use image::{Image, Measurement, MeasurementShape};
