//! Anisotropic squared-exponential kernel and its divergence-free 2×2 form.
//!
//! The scalar kernel is
//!
//! ```text
//! k(x, x') = σ_k² exp(-½ [(Δx/ℓx)² + (Δy/ℓy)² + (Δz/ℓz)²]),   Δ = x - x'
//! ```
//!
//! and the matrix kernel is `K = D(x) k D(x')ᵀ` with `D = [∂/∂y, -∂/∂x]ᵀ`.
//! Every field of the form `x ↦ Σ K(x, x_d) β_d` has zero horizontal
//! divergence, and since vertical velocity is taken to be zero it is
//! incompressible in 3D as well.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::{Grid3D, Point3, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub ell_x: f64,
    pub ell_y: f64,
    pub ell_z: f64,
    /// Streamfunction amplitude, m²/s.
    pub sigma_k: f64,
}

impl Default for KernelConfig {
    /// Hand-tuned values for the Tasman Sea region: 10 km horizontal and
    /// 100 m vertical length scales.
    fn default() -> Self {
        KernelConfig {
            ell_x: 1e4,
            ell_y: 1e4,
            ell_z: 100.0,
            sigma_k: 1718.9,
        }
    }
}

impl KernelConfig {
    pub fn new(ell_x: f64, ell_y: f64, ell_z: f64, sigma_k: f64) -> Result<Self> {
        let cfg = KernelConfig {
            ell_x,
            ell_y,
            ell_z,
            sigma_k,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.ell_x) && ok(self.ell_y) && ok(self.ell_z)) {
            return Err(Error::InvalidArgument(
                "kernel length scales must be positive and finite".into(),
            ));
        }
        if !ok(self.sigma_k) {
            return Err(Error::InvalidArgument("sigma_k must be positive".into()));
        }
        Ok(())
    }

    /// `σ_k = μ ℓx` from a mean surface speed `μ` (m/s).
    pub fn sigma_from_mean_speed(mean_speed: f64, ell_x: f64) -> f64 {
        mean_speed * ell_x
    }

    /// Same length scales with `σ_k` derived from `mean_speed`.
    pub fn with_mean_speed(self, mean_speed: f64) -> Self {
        KernelConfig {
            sigma_k: Self::sigma_from_mean_speed(mean_speed, self.ell_x),
            ..self
        }
    }

    fn inv_sq(&self) -> [f64; 3] {
        [
            1.0 / (self.ell_x * self.ell_x),
            1.0 / (self.ell_y * self.ell_y),
            1.0 / (self.ell_z * self.ell_z),
        ]
    }
}

pub fn scalar_kernel(x: &Point3, xp: &Point3, cfg: &KernelConfig) -> f64 {
    let w = cfg.inv_sq();
    let q: f64 = (0..3).map(|a| (x[a] - xp[a]).powi(2) * w[a]).sum();
    cfg.sigma_k * cfg.sigma_k * (-0.5 * q).exp()
}

/// Closed-form entries given the offset and the scalar kernel value.
#[inline]
fn matrix_entries(dx: f64, dy: f64, k: f64, wx: f64, wy: f64) -> [f64; 4] {
    let cross = k * dx * dy * wx * wy;
    [
        k * wy * (1.0 - dy * dy * wy),
        cross,
        cross,
        k * wx * (1.0 - dx * dx * wx),
    ]
}

/// The 2×2 divergence-free kernel `K(x, x')`.
pub fn incompressible_kernel(x: &Point3, xp: &Point3, cfg: &KernelConfig) -> Matrix2<f64> {
    let k = scalar_kernel(x, xp, cfg);
    let w = cfg.inv_sq();
    let [k11, k12, k21, k22] = matrix_entries(x[0] - xp[0], x[1] - xp[1], k, w[0], w[1]);
    Matrix2::new(k11, k12, k21, k22)
}

/// Dense `2Q × 2N` kernel matrix; block `(q, d)` is `K(queries[q], data[d])`.
pub fn kernel_matrix(queries: &[Point3], data: &[Point3], cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    if queries.is_empty() || data.is_empty() {
        return Err(Error::InvalidArgument("kernel_matrix needs non-empty point lists".into()));
    }
    let mut out = DMatrix::zeros(2 * queries.len(), 2 * data.len());
    for (d, xd) in data.iter().enumerate() {
        for (q, xq) in queries.iter().enumerate() {
            let block = incompressible_kernel(xq, xd, cfg);
            out.fixed_view_mut::<2, 2>(2 * q, 2 * d).copy_from(&block);
        }
    }
    Ok(out)
}

/// `K(x, x_data) β` for arbitrary data points.
pub fn evaluate_latent_field(
    x: &Point3,
    data: &[Point3],
    beta: &[f64],
    cfg: &KernelConfig,
) -> Result<Velocity> {
    if beta.len() != 2 * data.len() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries for {} data points",
            beta.len(),
            data.len()
        )));
    }
    let mut out = [0.0; 2];
    for (d, xd) in data.iter().enumerate() {
        let k = incompressible_kernel(x, xd, cfg);
        let (b0, b1) = (beta[2 * d], beta[2 * d + 1]);
        out[0] += k[(0, 0)] * b0 + k[(0, 1)] * b1;
        out[1] += k[(1, 0)] * b0 + k[(1, 1)] * b1;
    }
    Ok(out)
}

/// Kernel evaluation against all points of a regular grid.
///
/// The squared exponential factorizes per axis, so one query costs
/// `nx + ny + nz` exponentials instead of `nx·ny·nz`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridKernel {
    grid: Grid3D,
    cfg: KernelConfig,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
}

struct AxisTerms {
    ex: Vec<f64>,
    ey: Vec<f64>,
    ez: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl GridKernel {
    pub fn new(grid: Grid3D, cfg: KernelConfig) -> Self {
        GridKernel {
            xs: grid.x_coords(),
            ys: grid.y_coords(),
            zs: grid.z_coords(),
            grid,
            cfg,
        }
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    fn axis_terms(&self, x: &Point3) -> AxisTerms {
        let [wx, wy, wz] = self.cfg.inv_sq();
        let s2 = self.cfg.sigma_k * self.cfg.sigma_k;
        let dx: Vec<f64> = self.xs.iter().map(|c| x[0] - c).collect();
        let dy: Vec<f64> = self.ys.iter().map(|c| x[1] - c).collect();
        AxisTerms {
            ex: dx.iter().map(|d| s2 * (-0.5 * d * d * wx).exp()).collect(),
            ey: dy.iter().map(|d| (-0.5 * d * d * wy).exp()).collect(),
            ez: self
                .zs
                .iter()
                .map(|c| (-0.5 * (x[2] - c).powi(2) * wz).exp())
                .collect(),
            dx,
            dy,
        }
    }

    /// Writes the `2 × 2·layer_len` block `K(x, layer k)` into `out`, which is
    /// column-major (`out[2c]` is row 0 and `out[2c + 1]` row 1 of column `c`).
    fn fill_layer(&self, t: &AxisTerms, k: usize, out: &mut [f64]) {
        let [wx, wy, _] = self.cfg.inv_sq();
        let g = &self.grid;
        let ez = t.ez[k];
        for j in 0..g.ny {
            let eyz = t.ey[j] * ez;
            let dy = t.dy[j];
            for i in 0..g.nx {
                let kv = t.ex[i] * eyz;
                let [k11, k12, k21, k22] = matrix_entries(t.dx[i], dy, kv, wx, wy);
                let c = 2 * (i + g.nx * j);
                out[2 * c] = k11;
                out[2 * c + 1] = k21;
                out[2 * c + 2] = k12;
                out[2 * c + 3] = k22;
            }
        }
    }

    /// The `2 × 2|G|` row block `K(x, grid)`.
    pub fn row(&self, x: &Point3) -> DMatrix<f64> {
        let t = self.axis_terms(x);
        let layer_cols = 2 * self.grid.layer_len();
        let mut out = DMatrix::zeros(2, 2 * self.grid.len());
        let data = out.as_mut_slice();
        for k in 0..self.grid.nz {
            let start = 2 * k * layer_cols;
            self.fill_layer(&t, k, &mut data[start..start + 2 * layer_cols]);
        }
        out
    }

    /// `K(X, grid)` stacked over all query points.
    pub fn matrix(&self, queries: &[Point3]) -> DMatrix<f64> {
        let n = 2 * self.grid.len();
        let mut out = DMatrix::zeros(2 * queries.len(), n);
        for (q, x) in queries.iter().enumerate() {
            let row = self.row(x);
            out.view_mut((2 * q, 0), (2, n)).copy_from(&row);
        }
        out
    }

    /// `K(x, grid) β` without materializing the row block.
    ///
    /// The depth factor is folded into `β` first, then the horizontal sum
    /// splits into per-axis factors.
    pub fn apply(&self, x: &Point3, beta: &[f64]) -> Velocity {
        debug_assert_eq!(beta.len(), 2 * self.grid.len());
        let t = self.axis_terms(x);
        let [wx, wy, _] = self.cfg.inv_sq();
        let g = &self.grid;
        let layer = 2 * g.layer_len();
        let mut folded = vec![0.0; layer];
        for (k, chunk) in beta.chunks_exact(layer).enumerate() {
            let ez = t.ez[k];
            for (acc, b) in folded.iter_mut().zip(chunk) {
                *acc += ez * b;
            }
        }
        let mut u = 0.0;
        let mut v = 0.0;
        for j in 0..g.ny {
            let row = &folded[2 * g.nx * j..2 * g.nx * (j + 1)];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..g.nx {
                let ex = t.ex[i];
                let dx = t.dx[i];
                let cross = ex * dx * wx;
                let (b0, b1) = (row[2 * i], row[2 * i + 1]);
                s0 += ex * b0;
                s1 += cross * b1;
                s2 += cross * b0;
                s3 += ex * wx * (1.0 - dx * dx * wx) * b1;
            }
            let ey = t.ey[j];
            let dy = t.dy[j];
            let a = ey * wy * (1.0 - dy * dy * wy);
            let b = ey * dy * wy;
            u += a * s0 + b * s1;
            v += b * s2 + ey * s3;
        }
        [u, v]
    }
}

/// Continuous velocity field `u(x) = K(x, grid) β` for a fixed latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    kernel: GridKernel,
    beta: Vec<f64>,
}

impl LatentField {
    pub fn new(kernel: GridKernel, beta: DVector<f64>) -> Result<Self> {
        let n = 2 * kernel.grid().len();
        if beta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "latent vector has {} entries, grid needs {n}",
                beta.len()
            )));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        Ok(LatentField { kernel, beta: beta.as_slice().to_vec() })
    }

    pub fn grid(&self) -> &Grid3D {
        self.kernel.grid()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Evaluates anywhere, including outside the grid box.
    pub fn velocity_at(&self, x: &Point3) -> Velocity {
        self.kernel.apply(x, &self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgrid::build_grid;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / (b.abs() + floor)
    }

    #[test]
    fn zero_distance_gives_amplitude() {
        let cfg = KernelConfig::default();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(scalar_kernel(&x, &x, &cfg), cfg.sigma_k * cfg.sigma_k);
    }

    #[test]
    fn one_length_scale_offset() {
        let cfg = KernelConfig::default();
        let k = scalar_kernel(&[cfg.ell_x, 0.0, 0.0], &[0.0; 3], &cfg);
        let expected = cfg.sigma_k.powi(2) * (-0.5f64).exp();
        assert!(rel(k, expected, 0.0) < 1e-15);
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = KernelConfig::default();
        assert_eq!((cfg.ell_x, cfg.ell_y, cfg.ell_z, cfg.sigma_k), (1e4, 1e4, 100.0, 1718.9));
        assert!((KernelConfig::sigma_from_mean_speed(0.17189, 1e4) - 1718.9).abs() < 1e-9);
    }

    #[test]
    fn diagonal_at_zero_offset() {
        let cfg = KernelConfig::new(2e3, 5e3, 50.0, 3.0).unwrap();
        let x = [10.0, -4.0, 7.0];
        let k = incompressible_kernel(&x, &x, &cfg);
        assert!(rel(k[(0, 0)], 9.0 / 25e6, 0.0) < 1e-15);
        assert!(rel(k[(1, 1)], 9.0 / 4e6, 0.0) < 1e-15);
        assert_eq!(k[(0, 1)], 0.0);
        assert_eq!(k[(1, 0)], 0.0);
    }

    #[test]
    fn swap_transposes() {
        let cfg = KernelConfig::default();
        let a = [1200.0, -3400.0, 20.0];
        let b = [-500.0, 800.0, 140.0];
        let kab = incompressible_kernel(&a, &b, &cfg);
        let kba = incompressible_kernel(&b, &a, &cfg);
        assert!((kab - kba.transpose()).norm() <= 1e-15 * kab.norm());
    }

    #[test]
    fn single_block_matrix() {
        let cfg = KernelConfig::default();
        let x = [0.0, 0.0, 0.0];
        let m = kernel_matrix(&[x], &[x], &cfg).unwrap();
        assert_eq!(m.shape(), (2, 2));
        let s2 = cfg.sigma_k.powi(2);
        assert!(rel(m[(0, 0)], s2 / 1e8, 0.0) < 1e-15);
        assert!(rel(m[(1, 1)], s2 / 1e8, 0.0) < 1e-15);
        assert!(kernel_matrix(&[], &[x], &cfg).is_err());
    }

    #[test]
    fn sigma_scaling_quadruples_entries() {
        let cfg = KernelConfig::new(1e3, 2e3, 30.0, 2.0).unwrap();
        let cfg2 = KernelConfig { sigma_k: 4.0, ..cfg };
        let pts = [[0.0, 0.0, 0.0], [300.0, -200.0, 10.0], [900.0, 100.0, 40.0]];
        let a = kernel_matrix(&pts, &pts, &cfg).unwrap();
        let b = kernel_matrix(&pts, &pts, &cfg2).unwrap();
        assert!((b - a * 4.0).norm() < 1e-14);
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(nx, ny, nz) in &[(3, 3, 2), (4, 3, 3), (5, 5, 3)] {
            let cfg = KernelConfig::new(
                rng.random_range(500.0..3000.0),
                rng.random_range(500.0..3000.0),
                rng.random_range(10.0..100.0),
                1.0,
            )
            .unwrap();
            let g = build_grid((0.0, 4e3), (0.0, 4e3), (0.0, 100.0), nx, ny, nz).unwrap();
            let pts = g.points();
            let m = kernel_matrix(&pts, &pts, &cfg).unwrap();
            assert!((&m - m.transpose()).norm() < 1e-12 * m.norm());
            let eig = SymmetricEigen::new(m).eigenvalues;
            let max = eig.max();
            assert!(eig.min() >= -1e-8 * max, "min eig {} max {}", eig.min(), max);
        }
    }

    #[test]
    fn grid_kernel_matches_dense_assembly() {
        let cfg = KernelConfig::new(900.0, 1300.0, 40.0, 5.0).unwrap();
        let g = build_grid((0.0, 2e3), (100.0, 1600.0), (2.5, 102.5), 3, 4, 2).unwrap();
        let gk = GridKernel::new(g, cfg);
        let queries = [[150.0, 700.0, 30.0], [1999.0, 100.0, 2.5]];
        let dense = kernel_matrix(&queries, &g.points(), &cfg).unwrap();
        let fast = gk.matrix(&queries);
        assert!((&dense - &fast).norm() <= 1e-13 * dense.norm());

        let beta: Vec<f64> = (0..2 * g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        for q in &queries {
            let a = gk.apply(q, &beta);
            let b = evaluate_latent_field(q, &g.points(), &beta, &cfg).unwrap();
            assert!((a[0] - b[0]).abs() + (a[1] - b[1]).abs() <= 1e-12 * (b[0].abs() + b[1].abs()));
        }
    }

    #[test]
    fn latent_field_basics() {
        let cfg = KernelConfig::default();
        let data = [[0.0, 0.0, 0.0]];
        let x = [3000.0, -1000.0, 50.0];
        assert_eq!(evaluate_latent_field(&x, &data, &[0.0, 0.0], &cfg).unwrap(), [0.0, 0.0]);
        let f = evaluate_latent_field(&x, &data, &[1.0, 0.0], &cfg).unwrap();
        let k = incompressible_kernel(&x, &data[0], &cfg);
        assert_eq!(f, [k[(0, 0)], k[(1, 0)]]);
        assert!(evaluate_latent_field(&x, &data, &[1.0], &cfg).is_err());
    }
}
