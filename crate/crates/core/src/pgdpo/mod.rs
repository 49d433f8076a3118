//! Training loop, the costate-driven control projection and scoring.

pub mod adam;
pub mod evaluate;
pub mod gradients;
pub mod metrics;
pub mod oneshot;
pub mod surrogate;
pub mod train;
