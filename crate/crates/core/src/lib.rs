//! Offline reliability prediction and enhancement for positioning a ground
//! user from two-way ranges taken by a single UAV at several service points.
//!
//! The pipeline runs terrain visibility ([`propagation`]) into event priors
//! ([`events`]), splits the false-alarm and missed-detection budgets across
//! events ([`allocation`]), and turns each failure event into a minimum
//! detectable error ([`mde`]). Hazardous sample points are grouped and
//! attributed to service points in [`hazard`]; [`monte_carlo`] checks the
//! predictions by simulation.

pub mod allocation;
pub mod chi2;
pub mod dem;
pub mod error;
pub mod events;
pub mod geometry;
pub mod hazard;
pub mod mde;
pub mod monte_carlo;
pub mod point;
pub mod propagation;
pub mod report;
pub mod scenario;
pub mod twr;

pub use error::{Error, Result};
pub use point::{Point2, Point3};
