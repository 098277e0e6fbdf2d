//! Score-based diffusion acoustic model with intensity-controllable
//! soft-label classifier guidance, plus the closed-form Gaussian-mixture
//! oracle used to verify it.

pub mod acoustic;
pub mod classifier;
pub mod error;
pub mod guidance;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
