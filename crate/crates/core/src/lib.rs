//! Incompressible 3D ocean-current estimation from ensemble forecasts.
//!
//! Ensemble members are fitted to latent vectors of a divergence-free kernel,
//! compressed into a basis of continuous flow modes, and the mode weights are
//! estimated from point current measurements with a Kalman filter. The
//! resulting fields drive glider path planning.

pub mod basis;
pub mod ensemble;
pub mod error;
pub mod estimator;
pub mod flowgrid;
pub mod glider;
pub mod kernel;
pub mod metrics;
pub mod sensing;

pub use error::{Error, Result};
pub use flowgrid::{build_grid, EnsembleForecast, Grid3D, GriddedField, Point3, Velocity};
pub use kernel::{GridKernel, KernelConfig, LatentField};
