//! Multi-state step selection functions: simulation of hidden-state biased
//! correlated random walks, matched control sampling, weighted conditional
//! logistic regression and hidden Markov EM fitting.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! type aliases at the crate root fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bcrw;
pub mod circular;
pub mod clogit;
pub mod distance;
pub mod em;
pub mod error;
pub mod hmm;
pub mod io;
pub mod linalg;
pub mod model;
pub mod newton;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod special;
pub mod study;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point = model::Point<f64>;
pub type Trajectory = model::Trajectory<f64>;
pub type ChoiceSet = model::ChoiceSet<f64>;
pub type Alternative = model::Alternative<f64>;
pub type HmmParams = model::HmmParams<f64>;
pub type StateParams = model::StateParams<f64>;
pub type FitResult = model::FitResult<f64>;
pub type LandscapeGrid = model::LandscapeGrid<f64>;
pub type GammaParams = distance::GammaParams<f64>;
pub type BcrwScenario = bcrw::BcrwScenario<f64>;
pub type Matrix = linalg::SquareMatrix<f64>;
