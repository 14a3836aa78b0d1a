//! Periodic traveling waves of reaction-diffusion systems.
//!
//! The crate computes wave-train profiles, their Floquet-Bloch spectra and
//! diffusive stability, the low/high frequency split of the linearized
//! semigroup with its phase kernel, and nonlinear decay runs with phase
//! extraction.
//!
//! Conventions used throughout:
//! - fields on a grid are stored sample-major (`[N x n]`, row `j` holds the
//!   `n` components at `x_j`), matching the JSON and binary artifacts;
//! - Bloch operators act on component-major vectors (`index = comp * N + j`);
//! - the co-moving equation is `u_t = u_xx + c u_x + f(u)`, so a profile
//!   satisfies `u'' + c u' + f(u) = 0`.

pub mod bloch;
pub mod error;
pub mod exec;
pub mod fit;
pub mod fourier;
pub mod integrate;
pub mod io;
pub mod linalg;
pub mod model;
pub mod profile;
pub mod semigroup;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Exec;
