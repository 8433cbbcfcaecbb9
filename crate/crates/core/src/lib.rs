//! Numerical and combinatorial laboratory for the bilinear restriction
//! estimate on the paraboloid τ = −½|ξ|².
//!
//! The crate is organised bottom-up: [`geometry`] holds exact primitives,
//! [`extension`] evaluates free waves, [`wavepacket`] builds tube-localised
//! decompositions, [`combinatorics`] handles tube/ball incidences and
//! [`estimator`] measures constants and scaling exponents.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Coordinate loops index several fixed-size arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod combinatorics;
pub mod error;
pub mod estimator;
pub mod extension;
mod fft;
pub mod geometry;
pub mod wavepacket;

pub use error::{LabError, Result};
pub use num_complex::Complex64;

/// Version stamp recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
