//! Grid-point error metrics between an estimate and the truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::GriddedField;

fn check_same_grid(estimate: &GriddedField, truth: &GriddedField) -> Result<()> {
    if estimate.grid() != truth.grid() {
        return Err(Error::DimensionMismatch(
            "estimate and truth are on different grids".into(),
        ));
    }
    Ok(())
}

fn sq_residual<'a>(a: impl Iterator<Item = &'a [f64; 2]>, b: impl Iterator<Item = &'a [f64; 2]>) -> f64 {
    a.zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum()
}

/// Root mean square over all grid points and both components, in cm/s.
pub fn rmse(estimate: &GriddedField, truth: &GriddedField) -> Result<f64> {
    check_same_grid(estimate, truth)?;
    let ss = sq_residual(estimate.velocities().iter(), truth.velocities().iter());
    Ok(100.0 * (ss / (2 * truth.velocities().len()) as f64).sqrt())
}

/// `100 · ‖est − truth‖ / ‖truth‖` over all grid-point components.
pub fn relative_error(estimate: &GriddedField, truth: &GriddedField) -> Result<f64> {
    check_same_grid(estimate, truth)?;
    let norm_sq: f64 = truth
        .velocities()
        .iter()
        .map(|v| v[0] * v[0] + v[1] * v[1])
        .sum();
    if norm_sq == 0.0 {
        return Err(Error::InvalidArgument("truth field is identically zero".into()));
    }
    let ss = sq_residual(estimate.velocities().iter(), truth.velocities().iter());
    Ok(100.0 * (ss / norm_sq).sqrt())
}

/// RMSE of each depth layer, cm/s, shallowest first.
pub fn per_layer_rmse(estimate: &GriddedField, truth: &GriddedField) -> Result<Vec<f64>> {
    check_same_grid(estimate, truth)?;
    let layer = truth.grid().layer_len();
    Ok(estimate
        .velocities()
        .chunks(layer)
        .zip(truth.velocities().chunks(layer))
        .map(|(e, t)| 100.0 * (sq_residual(e.iter(), t.iter()) / (2 * layer) as f64).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rmse: f64,
    pub relative_error: f64,
    pub n_points: usize,
    pub per_layer_rmse: Vec<f64>,
}

impl ErrorReport {
    pub fn compute(estimate: &GriddedField, truth: &GriddedField) -> Result<Self> {
        Ok(ErrorReport {
            rmse: rmse(estimate, truth)?,
            relative_error: relative_error(estimate, truth)?,
            n_points: truth.velocities().len(),
            per_layer_rmse: per_layer_rmse(estimate, truth)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
