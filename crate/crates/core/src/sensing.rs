//! Continuous sampling of a gridded "true" field and simulated ADCP pings.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::flowpack::{Flowpack, Header, Kind};
use crate::flowgrid::{Grid3D, GriddedField, Point3, Velocity};

/// A point current observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub position: Point3,
    pub velocity: Velocity,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub items: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(items: Vec<Measurement>) -> Self {
        MeasurementSet { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Measurement> {
        self.items.iter()
    }

    /// Indices of measurements whose position lies outside `grid`'s box.
    pub fn out_of_bounds(&self, grid: &Grid3D) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, m)| !grid.contains(&m.position))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,z,u,v")?;
        for m in &self.items {
            let [x, y, z] = m.position;
            let [u, v] = m.velocity;
            writeln!(out, "{x},{y},{z},{u},{v}")?;
        }
        Ok(())
    }

    /// Container layout: header key `n`, payload `(x, y, z, u, v)` per item.
    pub fn to_flowpack(&self) -> Flowpack {
        let mut header = Header::new(Kind::Measurements);
        header.set("n", self.items.len()).expect("usize serializes");
        let payload = self
            .items
            .iter()
            .flat_map(|m| {
                let [x, y, z] = m.position;
                let [u, v] = m.velocity;
                [x, y, z, u, v]
            })
            .collect();
        Flowpack::new(header, payload)
    }

    pub fn from_flowpack(pack: &Flowpack) -> Result<Self> {
        pack.header.expect_kind(Kind::Measurements)?;
        let n: usize = pack.header.get("n")?;
        pack.expect_payload_len(5 * n)?;
        let items = pack
            .payload
            .chunks_exact(5)
            .map(|c| Measurement {
                position: [c[0], c[1], c[2]],
                velocity: [c[3], c[4]],
            })
            .collect();
        Ok(MeasurementSet { items })
    }
}

impl FromIterator<Measurement> for MeasurementSet {
    fn from_iter<I: IntoIterator<Item = Measurement>>(iter: I) -> Self {
        MeasurementSet {
            items: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcpConfig {
    /// Vertical distance between bins, m.
    pub bin_spacing: f64,
    pub n_bins: usize,
    pub first_bin_depth: f64,
    /// Per-component Gaussian noise, m/s.
    pub noise_std: f64,
}

impl Default for AdcpConfig {
    fn default() -> Self {
        AdcpConfig {
            bin_spacing: 32.0,
            n_bins: 22,
            first_bin_depth: 2.5,
            noise_std: 0.09,
        }
    }
}

impl AdcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_spacing.is_finite() && self.bin_spacing > 0.0) {
            return Err(Error::InvalidArgument("bin_spacing must be positive".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        if !self.first_bin_depth.is_finite() {
            return Err(Error::InvalidArgument("first_bin_depth must be finite".into()));
        }
        Ok(())
    }

    /// Bin depths that fall inside `[z_min, z_max]`.
    pub fn bin_depths(&self, z_min: f64, z_max: f64) -> Vec<f64> {
        (0..self.n_bins)
            .map(|i| self.first_bin_depth + i as f64 * self.bin_spacing)
            .filter(|&z| z >= z_min && z <= z_max)
            .collect()
    }
}

/// Weights and base index for one axis. Catmull-Rom on interior cells, linear
/// in the first and last cell.
fn axis_stencil(coord: f64, origin: f64, spacing: f64, n: usize) -> ([f64; 4], isize) {
    if n == 1 {
        return ([0.0, 1.0, 0.0, 0.0], -1);
    }
    let s = (coord - origin) / spacing;
    let cell = (s.floor() as isize).clamp(0, n as isize - 2);
    let t = s - cell as f64;
    let weights = if cell >= 1 && cell + 2 < n as isize {
        let t2 = t * t;
        let t3 = t2 * t;
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ]
    } else {
        [0.0, 1.0 - t, t, 0.0]
    };
    (weights, cell - 1)
}

/// Separable Catmull-Rom cubic interpolation of both velocity components.
///
/// Cells touching the boundary of an axis use linear interpolation since the
/// four-point stencil would leave the grid. Axes with a single sample are
/// constant.
pub fn interpolate_field(field: &GriddedField, x: &Point3) -> Result<Velocity> {
    let g = field.grid();
    if x.iter().any(|c| !c.is_finite()) || !g.contains(x) {
        return Err(Error::OutOfRange(format!(
            "query {x:?} lies outside the grid bounding box"
        )));
    }
    let (wx, bx) = axis_stencil(x[0], g.x0, g.dx, g.nx);
    let (wy, by) = axis_stencil(x[1], g.y0, g.dy, g.ny);
    let (wz, bz) = axis_stencil(x[2], g.z0, g.dz, g.nz);
    let vel = field.velocities();
    let mut out = [0.0; 2];
    for (c, &wk) in wz.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let k = (bz + c as isize) as usize;
        for (b, &wj) in wy.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let j = (by + b as isize) as usize;
            let wjk = wj * wk;
            for (a, &wi) in wx.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let i = (bx + a as isize) as usize;
                let v = vel[g.flatten(i, j, k)];
                let w = wi * wjk;
                out[0] += w * v[0];
                out[1] += w * v[1];
            }
        }
    }
    Ok(out)
}

/// One ADCP profile below `surface_xy`.
pub fn adcp_ping(
    truth: &GriddedField,
    surface_xy: [f64; 2],
    cfg: &AdcpConfig,
    rng_seed: u64,
) -> Result<MeasurementSet> {
    cfg.validate()?;
    let g = truth.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ping_with_rng(truth, g, surface_xy, cfg, &mut rng)
}

fn ping_with_rng(
    truth: &GriddedField,
    g: &Grid3D,
    surface_xy: [f64; 2],
    cfg: &AdcpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MeasurementSet> {
    if !g.contains(&[surface_xy[0], surface_xy[1], g.z0]) {
        return Err(Error::OutOfRange(format!(
            "ping location {surface_xy:?} lies outside the grid footprint"
        )));
    }
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut items = Vec::with_capacity(cfg.n_bins);
    for z in cfg.bin_depths(g.z0, g.z_max()) {
        let position = [surface_xy[0], surface_xy[1], z];
        let mut velocity = interpolate_field(truth, &position)?;
        if let Some(n) = &noise {
            velocity[0] += n.sample(rng);
            velocity[1] += n.sample(rng);
        }
        items.push(Measurement { position, velocity });
    }
    Ok(MeasurementSet { items })
}

/// Seed of the noise stream for site `site` of a campaign.
pub fn site_seed(seed: u64, site: usize) -> u64 {
    // splitmix64 finalizer over (seed, site)
    let mut z = seed ^ (site as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Surface locations drawn uniformly over the grid footprint.
pub fn campaign_sites(grid: &Grid3D, n_sites: usize, rng_seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    (0..n_sites)
        .map(|_| {
            let x = draw(&mut rng, grid.x0, grid.x_max());
            let y = draw(&mut rng, grid.y0, grid.y_max());
            [x, y]
        })
        .collect()
}

/// `n_sites` pings at uniformly random surface locations, site-major then
/// depth-major. Site `s` uses the noise stream [`site_seed`]`(rng_seed, s)`.
pub fn generate_campaign(
    truth: &GriddedField,
    n_sites: usize,
    cfg: &AdcpConfig,
    rng_seed: u64,
) -> Result<MeasurementSet> {
    let sites = campaign_sites(truth.grid(), n_sites, rng_seed);
    let mut items = Vec::new();
    for (s, xy) in sites.into_iter().enumerate() {
        items.extend(adcp_ping(truth, xy, cfg, site_seed(rng_seed, s))?.items);
    }
    Ok(MeasurementSet { items })
}

/// One noise-free measurement at every grid point, in flatten order.
pub fn grid_point_campaign(truth: &GriddedField) -> MeasurementSet {
    let g = truth.grid();
    truth
        .velocities()
        .iter()
        .enumerate()
        .map(|(p, &velocity)| Measurement {
            position: g.point(p),
            velocity,
        })
        .collect()
}
