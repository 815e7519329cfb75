//! Hierarchical scene-to-instance sparse mixture-of-experts routing at desk
//! scale: routing, expert variants, losses, a synthetic training task, and
//! routing diagnostics.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod latency;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod routing;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
