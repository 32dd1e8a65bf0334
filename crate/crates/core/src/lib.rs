//! Simulation and analysis of large ensembles of chaotic maps coupled
//! through a mean field.
//!
//! The crate is organised bottom-up:
//!
//! * [`maps`] holds the stateless one-step kernels of the three microscopic
//!   map families and the parameter distributions.
//! * [`ensemble`] advances whole ensembles (uncoupled, mean-field coupled or
//!   externally driven) and records the macroscopic time series.
//! * [`stats`] reduces time series: Birkhoff means, autocovariances, ANOVA,
//!   Gaussian surrogate noise and the noisy single-map scan.
//! * [`response`] sweeps the perturbation strength, fits Chebyshev series and
//!   runs the smooth-response hypothesis test.
//! * [`thermo`] treats the infinite-ensemble limit of the uniformly expanding
//!   family with a Chebyshev spectral transfer operator.
//!
//! All randomness is drawn from counter-based streams ([`rng`]) so results do
//! not depend on the number of worker threads.

pub mod chebyshev;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod maps;
pub mod response;
pub mod rng;
pub mod special;
pub mod stats;
pub mod thermo;

pub use error::{Error, Result};
