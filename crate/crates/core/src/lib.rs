//! Weighted l1-regularized estimation of high-dimensional spatio-temporal
//! vector autoregressions.
//!
//! The crate is organised around the estimation pipeline:
//!
//! - [`model`]: VAR(p) representation, companion form, simulation, lagged
//!   design construction and recursive forecasting.
//! - [`weights`]: site geometry and the distance/lag dependent penalty weights.
//! - [`solver`]: weighted lasso via column-wise rescaling and cyclic coordinate
//!   descent, lambda grids and warm-started paths.
//! - [`selection`]: forward (rolling-origin) cross-validation over order,
//!   weight constant and penalty level.
//! - [`evaluation`]: estimation/support metrics, network classification, the
//!   Diebold-Mariano test and theory diagnostics (error-bound evaluators).
//! - [`scenario`]: lattice and truth generators for the simulation studies and
//!   the Monte-Carlo study runner.
//! - [`detrend`]: periodic trend and variance-link preprocessing of sensor
//!   panels.
//! - [`io`]: CSV/JSON codecs for panels, geometry, fits and tables.

pub mod detrend;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod selection;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};
pub use model::{CoefficientStack, LaggedRegression, Panel, VarModel};
pub use solver::{FitResult, LambdaGrid, SolverOptions};
pub use weights::{PenaltyWeights, SiteGeometry, WeightKind, WeightSpec};
