//! Regular sample lattices and horizontal velocity fields defined on them.
//!
//! Grid points are flattened with `i` (east) fastest, then `j` (north), then
//! `k` (depth) slowest. Every depth layer is therefore one contiguous run of
//! `nx * ny` points, which the layer reshape in [`crate::basis`] relies on.
//! Depth is positive down, all coordinates are Cartesian meters.

pub mod flowpack;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cartesian position `[x east, y north, z depth]` in meters.
pub type Point3 = [f64; 3];

/// Horizontal velocity `[u east, v north]` in m/s.
pub type Velocity = [f64; 2];

/// Uniform `nx × ny × nz` lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub x0: f64,
    pub dx: f64,
    pub y0: f64,
    pub dy: f64,
    pub z0: f64,
    pub dz: f64,
}

impl Grid3D {
    /// Builds a grid from origins and spacings. Spacing must be positive on
    /// every axis with two or more points.
    pub fn new(counts: [usize; 3], origin: [f64; 3], spacing: [f64; 3]) -> Result<Self> {
        let grid = Grid3D {
            nx: counts[0],
            ny: counts[1],
            nz: counts[2],
            x0: origin[0],
            dx: spacing[0],
            y0: origin[1],
            dy: spacing[1],
            z0: origin[2],
            dz: spacing[2],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, n, o, d) in [
            ("x", self.nx, self.x0, self.dx),
            ("y", self.ny, self.y0, self.dy),
            ("z", self.nz, self.z0, self.dz),
        ] {
            if n == 0 {
                return Err(Error::InvalidGrid(format!("{axis} count must be >= 1")));
            }
            if !o.is_finite() || !d.is_finite() {
                return Err(Error::InvalidGrid(format!("{axis} origin/spacing not finite")));
            }
            if n >= 2 && d <= 0.0 {
                return Err(Error::InvalidGrid(format!(
                    "{axis} spacing must be positive, got {d}"
                )));
            }
            if d < 0.0 {
                return Err(Error::InvalidGrid(format!("{axis} spacing is negative")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points per depth layer.
    pub fn layer_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn flatten(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.nx;
        let j = (index / self.nx) % self.ny;
        let k = index / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn x_coords(&self) -> Vec<f64> {
        axis_coords(self.x0, self.dx, self.nx)
    }

    pub fn y_coords(&self) -> Vec<f64> {
        axis_coords(self.y0, self.dy, self.ny)
    }

    pub fn z_coords(&self) -> Vec<f64> {
        axis_coords(self.z0, self.dz, self.nz)
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.dx * (self.nx - 1) as f64
    }

    pub fn y_max(&self) -> f64 {
        self.y0 + self.dy * (self.ny - 1) as f64
    }

    pub fn z_max(&self) -> f64 {
        self.z0 + self.dz * (self.nz - 1) as f64
    }

    pub fn point(&self, index: usize) -> Point3 {
        let (i, j, k) = self.unflatten(index);
        [
            self.x0 + self.dx * i as f64,
            self.y0 + self.dy * j as f64,
            self.z0 + self.dz * k as f64,
        ]
    }

    /// All grid points in flatten order.
    pub fn points(&self) -> Vec<Point3> {
        (0..self.len()).map(|p| self.point(p)).collect()
    }

    /// Whether `x` falls inside the bounding box. Axes with a single sample
    /// are treated as unbounded.
    pub fn contains(&self, x: &Point3) -> bool {
        let inside = |v: f64, lo: f64, hi: f64, n: usize| n == 1 || (v >= lo && v <= hi);
        inside(x[0], self.x0, self.x_max(), self.nx)
            && inside(x[1], self.y0, self.y_max(), self.ny)
            && inside(x[2], self.z0, self.z_max(), self.nz)
    }
}

fn axis_coords(origin: f64, spacing: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| origin + spacing * i as f64).collect()
}

/// Uniform grid spanning the given extents, both endpoints included on any
/// axis with two or more points.
pub fn build_grid(
    x_extent: (f64, f64),
    y_extent: (f64, f64),
    z_extent: (f64, f64),
    nx: usize,
    ny: usize,
    nz: usize,
) -> Result<Grid3D> {
    let mut origin = [0.0; 3];
    let mut spacing = [0.0; 3];
    for (axis, ((lo, hi), n)) in [(x_extent, nx), (y_extent, ny), (z_extent, nz)]
        .into_iter()
        .enumerate()
    {
        if n == 0 {
            return Err(Error::InvalidGrid("grid counts must be >= 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidGrid("grid extents must be finite".into()));
        }
        if n >= 2 && hi <= lo || hi < lo {
            return Err(Error::InvalidGrid(format!(
                "inverted extent ({lo}, {hi}) on axis {axis}"
            )));
        }
        origin[axis] = lo;
        spacing[axis] = if n >= 2 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    }
    Grid3D::new([nx, ny, nz], origin, spacing)
}

/// Horizontal velocities sampled at every point of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    grid: Grid3D,
    velocities: Vec<Velocity>,
}

impl GriddedField {
    pub fn new(grid: Grid3D, velocities: Vec<Velocity>) -> Result<Self> {
        grid.validate()?;
        if velocities.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} velocities for {} grid points",
                velocities.len(),
                grid.len()
            )));
        }
        if velocities.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("field velocities".into()));
        }
        Ok(GriddedField { grid, velocities })
    }

    pub fn zeros(grid: Grid3D) -> Self {
        GriddedField {
            velocities: vec![[0.0; 2]; grid.len()],
            grid,
        }
    }

    /// Builds a field from an interleaved `[u0, v0, u1, v1, ...]` vector.
    pub fn from_interleaved(grid: Grid3D, values: &[f64]) -> Result<Self> {
        if values.len() != 2 * grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} interleaved values, got {}",
                2 * grid.len(),
                values.len()
            )));
        }
        let velocities = values.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Self::new(grid, velocities)
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn velocities(&self) -> &[Velocity] {
        &self.velocities
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> Velocity {
        self.velocities[self.grid.flatten(i, j, k)]
    }

    /// Velocities flattened as `[u0, v0, u1, v1, ...]`.
    pub fn interleaved(&self) -> Vec<f64> {
        self.velocities.iter().flatten().copied().collect()
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Mean speed over the shallowest layer.
    pub fn mean_surface_speed(&self) -> f64 {
        let n = self.grid.layer_len();
        self.velocities[..n]
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .sum::<f64>()
            / n as f64
    }

    /// One CSV row per grid point: `x,y,z,u,v`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,z,u,v")?;
        for (p, v) in self.velocities.iter().enumerate() {
            let x = self.grid.point(p);
            writeln!(out, "{},{},{},{},{}", x[0], x[1], x[2], v[0], v[1])?;
        }
        Ok(())
    }
}

/// An ensemble forecast: two or more members on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    members: Vec<GriddedField>,
}

impl EnsembleForecast {
    pub fn new(members: Vec<GriddedField>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let grid = members[0].grid;
        if members.iter().any(|m| m.grid != grid) {
            return Err(Error::DimensionMismatch(
                "ensemble members must share one grid".into(),
            ));
        }
        Ok(EnsembleForecast { members })
    }

    pub fn grid(&self) -> &Grid3D {
        &self.members[0].grid
    }

    pub fn members(&self) -> &[GriddedField] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean shallowest-layer speed across all members.
    pub fn mean_surface_speed(&self) -> f64 {
        self.members
            .iter()
            .map(GriddedField::mean_surface_speed)
            .sum::<f64>()
            / self.members.len() as f64
    }

    /// CSV with one row per point and member: `x,y,z,u,v,member`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,z,u,v,member")?;
        for (m, member) in self.members.iter().enumerate() {
            for (p, v) in member.velocities.iter().enumerate() {
                let x = member.grid.point(p);
                writeln!(out, "{},{},{},{},{},{}", x[0], x[1], x[2], v[0], v[1], m)?;
            }
        }
        Ok(())
    }
}

/// Keeps every `factor`-th depth layer starting from the shallowest.
pub fn downsample_depth(field: &GriddedField, factor: usize) -> Result<GriddedField> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let g = field.grid;
    let kept: Vec<usize> = (0..g.nz).step_by(factor).collect();
    let grid = Grid3D::new(
        [g.nx, g.ny, kept.len()],
        [g.x0, g.y0, g.z0],
        [
            g.dx,
            g.dy,
            if kept.len() >= 2 { g.dz * factor as f64 } else { g.dz },
        ],
    )?;
    let layer = g.layer_len();
    let velocities = kept
        .iter()
        .flat_map(|&k| field.velocities[k * layer..(k + 1) * layer].iter().copied())
        .collect();
    GriddedField::new(grid, velocities)
}

/// Vertical mean of the horizontal velocity at every `(i, j)` column. The
/// result lives on a single-layer grid and evaluates depth-independently.
pub fn depth_average(field: &GriddedField) -> GriddedField {
    let g = field.grid;
    if g.nz == 1 {
        return field.clone();
    }
    let layer = g.layer_len();
    let mut velocities = vec![[0.0; 2]; layer];
    for k in 0..g.nz {
        for (acc, v) in velocities
            .iter_mut()
            .zip(&field.velocities[k * layer..(k + 1) * layer])
        {
            acc[0] += v[0];
            acc[1] += v[1];
        }
    }
    let n = g.nz as f64;
    for v in &mut velocities {
        v[0] /= n;
        v[1] /= n;
    }
    let grid = Grid3D {
        nz: 1,
        dz: 0.0,
        ..g
    };
    GriddedField { grid, velocities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_field(grid: Grid3D) -> GriddedField {
        let v = (0..grid.len())
            .map(|p| [p as f64 * 0.5, -(p as f64)])
            .collect();
        GriddedField::new(grid, v).unwrap()
    }

    #[test]
    fn endpoints_included_and_single_layer() {
        let g = build_grid((0.0, 100.0), (0.0, 100.0), (0.0, 10.0), 2, 2, 1).unwrap();
        assert_eq!(g.x_coords(), vec![0.0, 100.0]);
        assert_eq!(g.y_coords(), vec![0.0, 100.0]);
        assert_eq!(g.z_coords(), vec![0.0]);
    }

    #[test]
    fn large_region_point_count() {
        let g = build_grid((0.0, 255e3), (0.0, 178e3), (2.5, 685.0), 31, 17, 8).unwrap();
        assert_eq!(g.len(), 4216);
    }

    #[test]
    fn degenerate_single_point() {
        let g = build_grid((5.0, 5.0), (1.0, 1.0), (0.0, 0.0), 1, 1, 1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.flatten(0, 0, 0), 0);
        assert_eq!(g.unflatten(0), (0, 0, 0));
        assert_eq!(g.point(0), [5.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_counts_and_extents() {
        assert!(build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0, 2, 2).is_err());
        assert!(build_grid((1.0, 0.0), (0.0, 1.0), (0.0, 1.0), 2, 2, 2).is_err());
        assert!(build_grid((0.0, 0.0), (0.0, 1.0), (0.0, 1.0), 2, 2, 2).is_err());
    }

    #[test]
    fn layers_are_contiguous() {
        let g = build_grid((0.0, 2.0), (0.0, 1.0), (0.0, 3.0), 3, 2, 4).unwrap();
        for k in 0..4 {
            let start = k * g.layer_len();
            for p in start..start + g.layer_len() {
                assert_eq!(g.unflatten(p).2, k);
            }
        }
    }

    #[test]
    fn downsample_counts() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 39.0), 2, 2, 40).unwrap();
        let f = ramp_field(g);
        assert_eq!(downsample_depth(&f, 5).unwrap().grid().nz, 8);
        assert_eq!(downsample_depth(&f, 1).unwrap(), f);
        assert!(downsample_depth(&f, 0).is_err());
    }

    #[test]
    fn downsample_keeps_expected_layers() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 6.0), 2, 2, 7).unwrap();
        let f = ramp_field(g);
        let d = downsample_depth(&f, 3).unwrap();
        assert_eq!(d.grid().nz, 3);
        assert_eq!(d.grid().z_coords(), vec![0.0, 3.0, 6.0]);
        for (kk, k) in [0usize, 3, 6].into_iter().enumerate() {
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(d.at(i, j, kk), f.at(i, j, k));
                }
            }
        }
    }

    #[test]
    fn depth_average_of_two_layers() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 1, 1, 2).unwrap();
        let f = GriddedField::new(g, vec![[1.0, 0.0], [3.0, 0.0]]).unwrap();
        let avg = depth_average(&f);
        assert_eq!(avg.grid().nz, 1);
        assert_eq!(avg.velocities(), &[[2.0, 0.0]]);
    }

    #[test]
    fn depth_average_single_layer_unchanged() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 0.0), 2, 2, 1).unwrap();
        let f = ramp_field(g);
        assert_eq!(depth_average(&f), f);
    }

    #[test]
    fn depth_average_matches_direct_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = build_grid((0.0, 1.0), (0.0, 2.0), (0.0, 3.0), 2, 3, 4).unwrap();
        let v: Vec<Velocity> = (0..g.len())
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let f = GriddedField::new(g, v).unwrap();
        let avg = depth_average(&f);
        for j in 0..3 {
            for i in 0..2 {
                let mut su = 0.0;
                let mut sv = 0.0;
                for k in 0..4 {
                    su += f.at(i, j, k)[0];
                    sv += f.at(i, j, k)[1];
                }
                let got = avg.at(i, j, 0);
                assert!((got[0] - su / 4.0).abs() < 1e-15);
                assert!((got[1] - sv / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn field_rejects_wrong_length_and_nan() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 2, 2, 2).unwrap();
        assert!(GriddedField::new(g, vec![[0.0; 2]; 7]).is_err());
        let mut v = vec![[0.0; 2]; 8];
        v[3][1] = f64::NAN;
        assert!(GriddedField::new(g, v).is_err());
    }

    #[test]
    fn ensemble_requires_two_members_on_one_grid() {
        let g = build_grid((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 2, 2, 2).unwrap();
        let h = build_grid((0.0, 2.0), (0.0, 1.0), (0.0, 1.0), 2, 2, 2).unwrap();
        assert!(EnsembleForecast::new(vec![GriddedField::zeros(g)]).is_err());
        assert!(EnsembleForecast::new(vec![GriddedField::zeros(g), GriddedField::zeros(h)]).is_err());
        assert!(EnsembleForecast::new(vec![GriddedField::zeros(g), GriddedField::zeros(g)]).is_ok());
    }

    proptest! {
        #[test]
        fn flatten_is_bijective(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7, seed in 0usize..1000) {
            let g = Grid3D::new([nx, ny, nz], [0.0; 3], [1.0; 3]).unwrap();
            let p = seed % g.len();
            let (i, j, k) = g.unflatten(p);
            prop_assert_eq!(g.flatten(i, j, k), p);
        }

        #[test]
        fn depth_average_idempotent(values in proptest::collection::vec(-2.0f64..2.0, 2 * 2 * 3 * 3)) {
            let g = Grid3D::new([2, 3, 3], [0.0; 3], [1.0; 3]).unwrap();
            let f = GriddedField::from_interleaved(g, &values).unwrap();
            let once = depth_average(&f);
            prop_assert_eq!(depth_average(&once), once);
        }
    }
}
