//! Inductive, amortized simulation-based inference for misspecified simulators.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: dense matrices, stable special functions, seeded random
//!   streams and a small reverse-mode tape.
//! - [`simulate`]: the pendulum benchmark (ideal simulator, damped emulator,
//!   priors, dataset splits, label corruption).
//! - [`nets`]: MLP encoders, conditional affine-coupling flows and Adam.
//! - [`ot`]: closed-form, semi-balanced and balanced entropic transport.
//! - [`pipeline`]: NPE pretraining, joint OT + supervised encoder transfer,
//!   flow amortization of the transport posterior, and inference.
//! - [`baselines`]: comparison estimators sharing one posterior interface.
//! - [`metrics`]: log-posterior probability and coverage AUC.

pub mod baselines;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod numeric;
pub mod ot;
pub mod pipeline;
pub mod posterior;
pub mod simulate;

pub use error::{Error, Result};
