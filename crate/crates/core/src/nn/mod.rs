//! Minimal differentiable core: MLPs with Gaussian heads, a reverse-mode
//! tape, Adam, seeded random streams and checkpoint files.

pub mod checkpoint;
pub mod gaussian;
pub mod mlp;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;

pub use checkpoint::{Checkpoint, NamedNetwork};
pub use gaussian::{
    gaussian_head, gaussian_log_likelihood, kl_diag_gaussians, reparam_sample, split_head,
    split_head_var, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use mlp::{Activation, LayerLayout, MlpParams, MlpSpec, MlpVars};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
