//! Latent streamfunction coefficients of ensemble members, the `B` matrix,
//! a synthetic ensemble generator, and the nearest-member baseline.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::flowpack::{Flowpack, Header, Kind};
use crate::flowgrid::{EnsembleForecast, Grid3D, GriddedField};
use crate::kernel::{GridKernel, KernelConfig};
use crate::sensing::MeasurementSet;

/// Latent coefficients `β` of one member, so that `K(x, grid) β` reproduces
/// the member's velocities. Member indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMember {
    pub beta: DVector<f64>,
    pub member_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFit {
    pub latent: LatentMember,
    /// `‖u − Kβ‖₂` over all grid components, m/s.
    pub residual: f64,
}

/// Default ridge, relative to the largest Gram eigenvalue.
pub const DEFAULT_RIDGE: f64 = 1e-8;

enum GramSolver {
    Ridge(Cholesky<f64, Dyn>),
    Pseudo(SVD<f64, Dyn, Dyn>),
}

/// Solves `β = argmin ‖u − Kβ‖²` for members on one grid, sharing a single
/// factorization of the Gram matrix.
///
/// With `ridge > 0` the regularized system `(K + ridge·λ_max·I) β = u` is
/// solved by Cholesky. With `ridge = 0` the minimum-norm least-squares
/// solution comes from an SVD pseudo-inverse.
pub struct LatentFitter {
    grid: Grid3D,
    cfg: KernelConfig,
    ridge: f64,
    gram: DMatrix<f64>,
    lambda_max: f64,
    solver: GramSolver,
}

impl LatentFitter {
    pub fn new(grid: Grid3D, cfg: KernelConfig, ridge: f64) -> Result<Self> {
        cfg.validate()?;
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let gram = GridKernel::new(grid, cfg).matrix(&grid.points());
        let lambda_max = largest_eigenvalue(&gram);
        let solver = if ridge > 0.0 {
            let mut m = gram.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += ridge * lambda_max;
            }
            GramSolver::Ridge(Cholesky::new(m).ok_or_else(|| {
                Error::Numerical("regularized Gram matrix is not positive definite".into())
            })?)
        } else {
            GramSolver::Pseudo(SVD::new(gram.clone(), true, true))
        };
        Ok(LatentFitter {
            grid,
            cfg,
            ridge,
            gram,
            lambda_max,
            solver,
        })
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn fit(&self, member: &GriddedField, member_index: usize) -> Result<LatentFit> {
        if member.grid() != &self.grid {
            return Err(Error::DimensionMismatch(
                "member grid differs from the fitter's data grid".into(),
            ));
        }
        let u = DVector::from_vec(member.interleaved());
        let beta = match &self.solver {
            GramSolver::Ridge(chol) => chol.solve(&u),
            GramSolver::Pseudo(svd) => {
                let eps = f64::EPSILON * u.len() as f64 * svd.singular_values.max();
                svd.solve(&u, eps).map_err(|e| Error::Numerical(e.to_string()))?
            }
        };
        let residual = (&u - &self.gram * &beta).norm();
        Ok(LatentFit {
            latent: LatentMember { beta, member_index },
            residual,
        })
    }

    pub fn fit_ensemble(&self, ensemble: &EnsembleForecast) -> Result<Vec<LatentFit>> {
        ensemble
            .members()
            .iter()
            .enumerate()
            .map(|(i, m)| self.fit(m, i))
            .collect()
    }
}

/// Power iteration estimate of the largest eigenvalue of a symmetric PSD
/// matrix, from a fixed start vector.
fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// One-off fit of a single member.
pub fn fit_latent(member: &GriddedField, cfg: &KernelConfig, ridge: f64) -> Result<LatentFit> {
    LatentFitter::new(*member.grid(), *cfg, ridge)?.fit(member, 0)
}

/// `B = [β₀ … β_{E-1}]`, column `i` holding member `i`.
pub fn assemble_b(latents: &[LatentMember]) -> Result<DMatrix<f64>> {
    let e = latents.len();
    if e == 0 {
        return Err(Error::InvalidArgument("no latent members".into()));
    }
    let rows = latents[0].beta.len();
    let mut seen = vec![false; e];
    let mut b = DMatrix::zeros(rows, e);
    for l in latents {
        if l.beta.len() != rows {
            return Err(Error::DimensionMismatch("latent lengths differ".into()));
        }
        if l.member_index >= e || seen[l.member_index] {
            return Err(Error::InvalidArgument(format!(
                "member index {} is duplicated or outside 0..{e}",
                l.member_index
            )));
        }
        seen[l.member_index] = true;
        b.set_column(l.member_index, &l.beta);
    }
    Ok(b)
}

pub fn columns_of(b: &DMatrix<f64>) -> Vec<LatentMember> {
    b.column_iter()
        .enumerate()
        .map(|(i, c)| LatentMember {
            beta: c.into_owned(),
            member_index: i,
        })
        .collect()
}

/// Latent coefficients of a whole ensemble with the kernel used to fit them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub grid: Grid3D,
    pub kernel: KernelConfig,
    pub b: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

impl LatentSet {
    pub fn from_fits(grid: Grid3D, kernel: KernelConfig, fits: &[LatentFit]) -> Result<Self> {
        let latents: Vec<_> = fits.iter().map(|f| f.latent.clone()).collect();
        let b = assemble_b(&latents)?;
        let mut residuals = vec![0.0; fits.len()];
        for f in fits {
            residuals[f.latent.member_index] = f.residual;
        }
        Ok(LatentSet {
            grid,
            kernel,
            b,
            residuals,
        })
    }

    pub fn n_members(&self) -> usize {
        self.b.ncols()
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.b.column(i).into_owned()
    }

    /// Container layout: `e` columns of `B` (each `2|G|` values), then the
    /// `e` fit residuals.
    pub fn to_flowpack(&self) -> Flowpack {
        let mut header = Header::new(Kind::Latents).with_grid(self.grid);
        header.e = Some(self.n_members());
        header.set("kernel", self.kernel).expect("kernel serializes");
        let mut payload: Vec<f64> = self.b.as_slice().to_vec();
        payload.extend_from_slice(&self.residuals);
        Flowpack::new(header, payload)
    }

    pub fn from_flowpack(pack: &Flowpack) -> Result<Self> {
        pack.header.expect_kind(Kind::Latents)?;
        let grid = pack.header.require_grid()?;
        let kernel: KernelConfig = pack.header.get("kernel")?;
        kernel.validate()?;
        let e = pack
            .header
            .e
            .ok_or_else(|| Error::Format("latents header is missing 'e'".into()))?;
        let rows = 2 * grid.len();
        pack.expect_payload_len(rows * e + e)?;
        let b = DMatrix::from_column_slice(rows, e, &pack.payload[..rows * e]);
        Ok(LatentSet {
            grid,
            kernel,
            b,
            residuals: pack.payload[rows * e..].to_vec(),
        })
    }
}

/// Parameters of the synthetic ensemble generator. Missing fields take
/// their default values when deserialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_members: usize,
    /// Gaussian vortices per layer.
    pub n_gyres: usize,
    /// Mean speed every generated field is scaled to, m/s.
    pub speed_scale: f64,
    /// Correlation between adjacent depth layers, 0..=1.
    pub layer_correlation: f64,
    /// Also generate an out-of-ensemble member to serve as truth.
    pub outlier_member: bool,
    /// Spread of members around the shared forecast features, as a fraction
    /// of the domain size (center offsets) and of amplitude.
    pub member_jitter: f64,
    /// Jitter of the out-of-ensemble member relative to `member_jitter`.
    pub outlier_spread: f64,
    /// E-folding depth of the surface-intensified amplitude profile, m.
    /// Zero gives depth-uniform amplitude.
    pub decay_depth: f64,
}

fn default_jitter() -> f64 {
    0.05
}

fn default_outlier_spread() -> f64 {
    2.5
}

fn default_decay_depth() -> f64 {
    600.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_members: 10,
            n_gyres: 6,
            speed_scale: 0.228,
            layer_correlation: 0.6,
            outlier_member: true,
            member_jitter: default_jitter(),
            outlier_spread: default_outlier_spread(),
            decay_depth: default_decay_depth(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::InvalidArgument("n_members must be >= 2".into()));
        }
        if self.n_gyres == 0 {
            return Err(Error::InvalidArgument("n_gyres must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.layer_correlation) {
            return Err(Error::InvalidArgument("layer_correlation must be in [0, 1]".into()));
        }
        if !(self.speed_scale.is_finite() && self.speed_scale > 0.0) {
            return Err(Error::InvalidArgument("speed_scale must be positive".into()));
        }
        if !(self.member_jitter.is_finite() && self.member_jitter >= 0.0) {
            return Err(Error::InvalidArgument("member_jitter must be >= 0".into()));
        }
        if !(self.outlier_spread.is_finite() && self.outlier_spread >= 0.0) {
            return Err(Error::InvalidArgument("outlier_spread must be >= 0".into()));
        }
        if !(self.decay_depth.is_finite() && self.decay_depth >= 0.0) {
            return Err(Error::InvalidArgument("decay_depth must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Gyre {
    cx: f64,
    cy: f64,
    width: f64,
    amp: f64,
}

fn streamfunction(gyres: &[(f64, Gyre)], x: f64, y: f64) -> f64 {
    gyres
        .iter()
        .map(|(w, g)| {
            let r2 = (x - g.cx).powi(2) + (y - g.cy).powi(2);
            w * g.amp * (-0.5 * r2 / (g.width * g.width)).exp()
        })
        .sum()
}

struct Domain {
    x0: f64,
    y0: f64,
    lx: f64,
    ly: f64,
}

impl Domain {
    fn of(grid: &Grid3D) -> Self {
        let lx = (grid.x_max() - grid.x0).max(grid.dx).max(1.0);
        let ly = (grid.y_max() - grid.y0).max(grid.dy).max(1.0);
        Domain {
            x0: grid.x0,
            y0: grid.y0,
            lx,
            ly,
        }
    }

    fn random_gyre(&self, rng: &mut ChaCha8Rng) -> Gyre {
        let l = self.lx.min(self.ly);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Gyre {
            cx: self.x0 + rng.random_range(-0.1..1.1) * self.lx,
            cy: self.y0 + rng.random_range(-0.1..1.1) * self.ly,
            width: rng.random_range(0.12..0.3) * l,
            amp: sign * rng.random_range(0.5..1.5),
        }
    }
}

/// Per-layer gyre sets of a fresh (independently placed) forecast.
fn forecast_features(domain: &Domain, nz: usize, n_gyres: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Gyre>> {
    (0..nz)
        .map(|_| (0..n_gyres).map(|_| domain.random_gyre(rng)).collect())
        .collect()
}

fn jittered(features: &[Vec<Gyre>], domain: &Domain, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<Gyre>> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    features
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|g| Gyre {
                    cx: g.cx + jitter * domain.lx * n.sample(rng),
                    cy: g.cy + jitter * domain.ly * n.sample(rng),
                    width: g.width * (0.5 * jitter * n.sample(rng)).exp(),
                    amp: g.amp * (1.0 + jitter * n.sample(rng)),
                })
                .collect()
        })
        .collect()
}

/// Renders one member. Layer `k` blends the layer gyre sets with AR(1)
/// weights, so `layer_correlation = 1` copies the top layer all the way down,
/// and scales the blend by `exp(-depth / decay_depth)` below the top layer.
/// Velocities are centered differences of the streamfunction at the grid
/// spacing, which makes the discrete grid divergence vanish identically.
fn render(grid: &Grid3D, layers: &[Vec<Gyre>], rho: f64, speed_scale: f64, decay_depth: f64) -> Result<GriddedField> {
    let fresh = (1.0 - rho * rho).max(0.0).sqrt();
    let hx = if grid.nx > 1 { grid.dx } else { 1.0 };
    let hy = if grid.ny > 1 { grid.dy } else { 1.0 };
    let mut velocities = Vec::with_capacity(grid.len());
    for k in 0..grid.nz {
        let depth_gain = if decay_depth > 0.0 {
            (-(grid.dz * k as f64) / decay_depth).exp()
        } else {
            1.0
        };
        let mut terms = Vec::new();
        for (l, layer) in layers.iter().enumerate().take(k + 1) {
            let own = if l == 0 { 1.0 } else { fresh };
            let w = depth_gain * own * rho.powi((k - l) as i32);
            if w != 0.0 {
                terms.extend(layer.iter().map(|g| (w, *g)));
            }
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let x = grid.x0 + grid.dx * i as f64;
                let y = grid.y0 + grid.dy * j as f64;
                let u = (streamfunction(&terms, x, y + hy) - streamfunction(&terms, x, y - hy)) / (2.0 * hy);
                let v = -(streamfunction(&terms, x + hx, y) - streamfunction(&terms, x - hx, y)) / (2.0 * hx);
                velocities.push([u, v]);
            }
        }
    }
    let mean: f64 = velocities.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / velocities.len() as f64;
    if mean > 0.0 {
        let s = speed_scale / mean;
        for v in &mut velocities {
            v[0] *= s;
            v[1] *= s;
        }
    }
    GriddedField::new(*grid, velocities)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnsemble {
    pub ensemble: EnsembleForecast,
    /// Out-of-ensemble member, present when `outlier_member` is set.
    pub truth: Option<GriddedField>,
}

/// Builds a seeded synthetic ensemble.
///
/// Members are jittered copies of one set of per-layer forecast features. The
/// truth, when requested, is a copy jittered `outlier_spread` times harder on
/// its own random stream and is kept out of the ensemble.
pub fn generate_synthetic_ensemble(grid: &Grid3D, sc: &SynthConfig) -> Result<SyntheticEnsemble> {
    grid.validate()?;
    sc.validate()?;
    let domain = Domain::of(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let features = forecast_features(&domain, grid.nz, sc.n_gyres, &mut rng);
    let members = (0..sc.n_members)
        .map(|_| {
            let layers = jittered(&features, &domain, sc.member_jitter, &mut rng);
            render(grid, &layers, sc.layer_correlation, sc.speed_scale, sc.decay_depth)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = if sc.outlier_member {
        let mut truth_rng = ChaCha8Rng::seed_from_u64(sc.seed);
        truth_rng.set_stream(1);
        let own = jittered(&features, &domain, sc.member_jitter * sc.outlier_spread, &mut truth_rng);
        Some(render(grid, &own, sc.layer_correlation, sc.speed_scale, sc.decay_depth)?)
    } else {
        None
    };
    Ok(SyntheticEnsemble {
        ensemble: EnsembleForecast::new(members)?,
        truth,
    })
}

/// Index of the member whose kernel-fitted field is closest, in summed
/// squared error, to the measurements. Ties go to the lowest index.
pub fn nearest_latent(latents: &LatentSet, measurements: &MeasurementSet) -> Result<usize> {
    if measurements.is_empty() {
        return Err(Error::InvalidArgument("empty measurement set".into()));
    }
    let gk = GridKernel::new(latents.grid, latents.kernel);
    let e = latents.n_members();
    let mut sse = vec![0.0; e];
    for m in measurements.iter() {
        let pred = gk.row(&m.position) * &latents.b;
        for (i, s) in sse.iter_mut().enumerate() {
            *s += (m.velocity[0] - pred[(0, i)]).powi(2) + (m.velocity[1] - pred[(1, i)]).powi(2);
        }
    }
    let mut best = 0;
    for i in 1..e {
        if sse[i] < sse[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fits every member then picks the nearest one.
pub fn nearest_member(
    ensemble: &EnsembleForecast,
    measurements: &MeasurementSet,
    cfg: &KernelConfig,
    ridge: f64,
) -> Result<usize> {
    let fitter = LatentFitter::new(*ensemble.grid(), *cfg, ridge)?;
    let fits = fitter.fit_ensemble(ensemble)?;
    let set = LatentSet::from_fits(*ensemble.grid(), *cfg, &fits)?;
    nearest_latent(&set, measurements)
}
