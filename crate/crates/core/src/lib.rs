//! Particle approximation, relaxed controls and chattering for McKean-Vlasov
//! control problems with common noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: problem definition (coefficients, rewards, constants) and a
//!   sampling validator for the growth/Lipschitz/coercivity conditions.
//! - [`timebase`]: uniform grids, path views and counter-keyed Gaussian noise.
//! - [`measure`]: empirical (pair) measures, occupation measures, exact
//!   Wasserstein distances via optimal assignment.
//! - [`control`]: policy representations and the constructive transformations
//!   (piecewise-constant discretization, action truncation and partition,
//!   chattering schedules, Brownian compression).
//! - [`engine`]: explicit Euler particle simulators.
//! - [`value`]: Monte-Carlo value estimation and cross-entropy search.
//! - [`bench`]: the linear-quadratic benchmark, its Riccati oracle and the
//!   convergence studies.
//! - [`cli`]: the `mkv` command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod control;
pub mod engine;
mod error;
pub mod measure;
pub mod model;
pub mod output;
pub mod timebase;
pub mod value;

pub use error::{Error, Result};
