//! Non-intrusive reduced-order modeling of parameterized scalar fields.
//!
//! The pipeline compresses an ensemble of field snapshots with proper
//! orthogonal decomposition (POD), learns each whitened reduced coefficient
//! with an independent Gaussian process (Matérn-5/2, ARD length-scales,
//! observation noise), and reconstructs fields for unseen parameters by
//! inverting the POD transform.
//!
//! Modules, bottom-up:
//!
//! - [`sampling`]: the 4-D uncertain parameter space, Halton designs and
//!   the log-law wind profile quantities.
//! - [`plume`]: an analytic plume surrogate standing in for the expensive
//!   full-order simulator, with time-averaging noise emulation.
//! - [`smx`]: the binary matrix container shared by every artifact.
//! - [`pod`]: centering, truncated SVD, whitening, truncation rules.
//! - [`gpr`]: kernel, exact inference, likelihood/posterior and optimizers.
//! - [`priors`]: POD-informed hyperparameter priors.
//! - [`rom`]: training, prediction, the Q² evaluation suite and persistence.

pub mod error;
pub mod gpr;
pub mod plume;
pub mod pod;
pub mod priors;
pub mod rom;
pub mod sampling;
pub mod smx;

pub use error::{ErrorClass, Result, RomError};

/// Crate version embedded in every manifest.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
