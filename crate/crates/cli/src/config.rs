//! Run configuration document.

use std::path::{Path, PathBuf};

use oceanflow::basis::Variant;
use oceanflow::ensemble::{SynthConfig, DEFAULT_RIDGE};
use oceanflow::glider::GliderMission;
use oceanflow::sensing::AdcpConfig;
use oceanflow::{build_grid, EnsembleForecast, Grid3D, KernelConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x: [0.0, 70_000.0],
            y: [0.0, 70_000.0],
            z: [2.5, 685.0],
            nx: 8,
            ny: 8,
            nz: 4,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> oceanflow::Result<Grid3D> {
        build_grid(
            (self.x[0], self.x[1]),
            (self.y[0], self.y[1]),
            (self.z[0], self.z[1]),
            self.nx,
            self.ny,
            self.nz,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub ell_x: f64,
    pub ell_y: f64,
    pub ell_z: f64,
    /// Kernel amplitude, m²/s. When absent it is the ensemble's mean
    /// surface speed times `ell_x`.
    #[serde(default)]
    pub sigma_k: Option<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            ell_x: 1e4,
            ell_y: 1e4,
            ell_z: 200.0,
            sigma_k: None,
        }
    }
}

impl KernelSpec {
    pub fn resolve(&self, ensemble: &EnsembleForecast) -> oceanflow::Result<KernelConfig> {
        let base = KernelConfig::new(self.ell_x, self.ell_y, self.ell_z, 1.0)?;
        let cfg = match self.sigma_k {
            Some(s) => KernelConfig { sigma_k: s, ..base },
            None => base.with_mean_speed(ensemble.mean_surface_speed()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    pub variant: Variant,
    /// Retained modes; full rank when absent.
    #[serde(default)]
    pub rank: Option<usize>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            variant: Variant::Layered25D,
            rank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Measurement standard deviation assumed by the filter without sensor
    /// noise, m/s (`R = r_std_ideal² I`).
    pub r_std_ideal: f64,
    /// Same for the noisy regime.
    pub r_std_noisy: f64,
    /// Sensor noise added to simulated pings, m/s.
    pub noise_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            r_std_ideal: 0.01,
            r_std_noisy: 0.12,
            noise_std: 0.09,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSpec {
    pub n_sites: usize,
    pub seed: u64,
    pub bin_spacing: f64,
    pub n_bins: usize,
    pub first_bin_depth: f64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        let adcp = AdcpConfig::default();
        CampaignSpec {
            n_sites: 450,
            seed: 1,
            bin_spacing: adcp.bin_spacing,
            n_bins: adcp.n_bins,
            first_bin_depth: adcp.first_bin_depth,
        }
    }
}

impl CampaignSpec {
    pub fn adcp(&self, noise_std: f64) -> AdcpConfig {
        AdcpConfig {
            bin_spacing: self.bin_spacing,
            n_bins: self.n_bins,
            first_bin_depth: self.first_bin_depth,
            noise_std,
        }
    }
}

/// Surface start 10.3 km from a target at 500 m depth, inside the default
/// grid.
pub fn default_mission() -> GliderMission {
    GliderMission {
        start: [15_000.0, 20_000.0, 2.5],
        target: [24_000.0, 25_000.0, 500.0],
        speed: 0.3,
        step_length: 10.0,
        max_path_length: 20_000.0,
    }
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Relative ridge of the latent fit.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub campaign: CampaignSpec,
    #[serde(default = "default_mission")]
    pub mission: GliderMission,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridSpec::default(),
            kernel: KernelSpec::default(),
            synth: SynthConfig::default(),
            ridge: DEFAULT_RIDGE,
            basis: BasisSpec::default(),
            noise: NoiseSpec::default(),
            campaign: CampaignSpec::default(),
            mission: default_mission(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every section before any computation runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |e: oceanflow::Error| CliError::schema(e.to_string());
        self.grid.build().map_err(schema)?;
        KernelConfig::new(self.kernel.ell_x, self.kernel.ell_y, self.kernel.ell_z, 1.0).map_err(schema)?;
        if let Some(s) = self.kernel.sigma_k {
            if !(s.is_finite() && s > 0.0) {
                return Err(CliError::schema("kernel.sigma_k must be positive"));
            }
        }
        self.synth.validate().map_err(schema)?;
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(CliError::schema("ridge must be >= 0"));
        }
        if self.basis.rank == Some(0) {
            return Err(CliError::schema("basis.rank must be >= 1"));
        }
        let n = &self.noise;
        for (name, v) in [("r_std_ideal", n.r_std_ideal), ("r_std_noisy", n.r_std_noisy)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::schema(format!("noise.{name} must be positive")));
            }
        }
        self.campaign.adcp(n.noise_std).validate().map_err(schema)?;
        self.mission.validate().map_err(schema)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"synth": {"seed": 7}, "grid": {"nz": 2}}"#).unwrap();
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.synth.n_members, RunConfig::default().synth.n_members);
        assert_eq!(cfg.grid.nz, 2);
        assert_eq!(cfg.grid.nx, GridSpec::default().nx);
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let err = RunConfig::from_json(r#"{"gird": {}}"#).unwrap_err();
        assert_eq!(err.code, crate::exit::SCHEMA);
    }

    #[test]
    fn invalid_values_are_schema_errors() {
        let err = RunConfig::from_json(r#"{"ridge": -1}"#).unwrap_err();
        assert_eq!(err.code, crate::exit::SCHEMA);
        let err = RunConfig::from_json(r#"{"grid": {"x": [0, 1], "y": [0, 1], "z": [5, 1], "nx": 2, "ny": 2, "nz": 2}}"#)
            .unwrap_err();
        assert_eq!(err.code, crate::exit::SCHEMA);
    }

    #[test]
    fn roundtrip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
