//! Perturbative construction of forced mean curvature flows of small
//! geodesic spheres whose centres follow gradient lines of scalar curvature.

pub mod diagnostics;
pub mod error;
pub mod expansion;
pub mod flowline;
pub mod immersion;
pub mod jet;
pub mod metric;
pub mod ode;
pub mod par;
pub mod scenario;
pub mod sphere;
pub mod symtensor;

pub use error::{Error, Result};

/// Library version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
