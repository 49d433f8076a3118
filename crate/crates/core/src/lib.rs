//! Pontryagin-guided direct policy optimization for continuous-time
//! consumption and investment problems with many risky assets.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg_ad`]: dense kernels and a batched reverse-mode tape
//! - [`market`]: reproducible synthetic markets
//! - [`merton_reference`]: closed-form benchmarks and a value-function ODE oracle
//! - [`policy`]: feed-forward consumption and investment networks
//! - [`rollout`]: exponential-Euler wealth simulation and objective estimation
//! - [`costate`]: pathwise adjoints extracted from differentiated rollouts
//! - [`barrier`]: log-barrier Newton solver over the simplex and a KKT oracle
//! - [`pgdpo`]: training, one-shot controls, surrogate fitting and metrics
//! - [`io`]: checkpoints, CSV schemas and run manifests

pub mod barrier;
pub mod costate;
pub mod error;
pub mod io;
pub mod linalg_ad;
pub mod market;
pub mod merton_reference;
pub mod pgdpo;
pub mod policy;
pub mod rng;
pub mod rollout;

pub use error::{PgdpoError, Result};
