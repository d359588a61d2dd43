//! Statevector simulation of wavepacket preparation and scattering in the
//! one-dimensional Ising field theory.
//!
//! The crate is organised bottom-up: [`pauli`] and [`model`] define operators,
//! [`sim`] executes circuits, [`wstate`] and [`adapt`] prepare states, [`spectra`]
//! supplies exact-diagonalization references, [`scatter`] evolves them, and
//! [`noise`] and [`analysis`] post-process measurements.

pub mod adapt;
pub mod analysis;
pub mod error;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod pauli;
pub mod scatter;
pub mod sim;
pub mod spectra;
pub mod wstate;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
