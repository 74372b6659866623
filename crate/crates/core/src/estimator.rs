//! Kalman filtering of the basis weights `w`, ensemble-statistics
//! initialization, and the out-of-span least-squares bound.
//!
//! The flow is time-invariant, so the process model is the identity with no
//! process noise and the predict step leaves `(w, P)` untouched. Each
//! measurement is a 2-vector processed on its own:
//!
//! ```text
//! y = z − H w        S = H P Hᵀ + R        G = P Hᵀ S⁻¹
//! w ← w + G y        P ← (I − G H) P (I − G H)ᵀ + G R Gᵀ
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Vector2};

use crate::basis::{BasisModel, Variant};
use crate::error::{Error, Result};
use crate::flowgrid::flowpack::{Flowpack, Header, Kind};
use crate::flowgrid::{GriddedField, Point3, Velocity};
use crate::kernel::LatentField;
use crate::sensing::MeasurementSet;

/// Measurement covariance for noise-free runs, (1 cm/s)² I.
pub fn noise_free_r() -> Matrix2<f64> {
    Matrix2::identity() * 0.01f64.powi(2)
}

/// Measurement covariance for the noisy ADCP regime, (12 cm/s)² I.
pub fn noisy_r() -> Matrix2<f64> {
    Matrix2::identity() * 0.12f64.powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub w: DVector<f64>,
    pub p: DMatrix<f64>,
    r: Matrix2<f64>,
    /// Number of measurements absorbed.
    pub k: usize,
}

fn check_noise(r: &Matrix2<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) || (r - r.transpose()).norm() > 1e-12 * r.norm() {
        return Err(Error::InvalidArgument("R must be finite and symmetric".into()));
    }
    if Cholesky::new(*r).is_none() {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    Ok(())
}

impl EstimatorState {
    pub fn new(w: DVector<f64>, p: DMatrix<f64>, r: Matrix2<f64>) -> Result<Self> {
        check_noise(&r)?;
        if p.nrows() != w.len() || p.ncols() != w.len() {
            return Err(Error::DimensionMismatch(format!(
                "P is {}×{} for {} weights",
                p.nrows(),
                p.ncols(),
                w.len()
            )));
        }
        Ok(EstimatorState { w, p, r, k: 0 })
    }

    pub fn r(&self) -> &Matrix2<f64> {
        &self.r
    }

    pub fn set_r(&mut self, r: Matrix2<f64>) -> Result<()> {
        check_noise(&r)?;
        self.r = r;
        Ok(())
    }

    pub fn n_weights(&self) -> usize {
        self.w.len()
    }

    /// Identity process model, no process noise.
    pub fn predict(&mut self) {}

    /// Absorbs one measurement `z` observed through `h` (`2 × n`).
    pub fn update_with(&mut self, h: &DMatrix<f64>, z: &Vector2<f64>) -> Result<()> {
        let n = self.w.len();
        if h.nrows() != 2 || h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "H is {}×{}, expected 2×{n}",
                h.nrows(),
                h.ncols()
            )));
        }
        let hw = h * &self.w;
        let innovation = z - Vector2::new(hw[0], hw[1]);
        // M = P Hᵀ (n × 2)
        let m = &self.p * h.transpose();
        let hph = h * &m;
        let s = Matrix2::new(hph[(0, 0)], hph[(0, 1)], hph[(1, 0)], hph[(1, 1)]) + self.r;
        let s_inv = Cholesky::new(s)
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?
            .inverse();
        let s_inv_dyn = DMatrix::from_column_slice(2, 2, s_inv.as_slice());
        let gain = &m * &s_inv_dyn;
        self.w += &gain * DVector::from_column_slice(innovation.as_slice());

        // Joseph form expanded around the rank-2 structure:
        // (I − GH) P (I − GH)ᵀ + G R Gᵀ = P − G Mᵀ − M Gᵀ + G (H P Hᵀ + R) Gᵀ
        let s_dyn = DMatrix::from_column_slice(2, 2, s.as_slice());
        let gs = &gain * &s_dyn;
        self.p.gemm(-1.0, &gain, &m.transpose(), 1.0);
        self.p.gemm(-1.0, &m, &gain.transpose(), 1.0);
        self.p.gemm(1.0, &gs, &gain.transpose(), 1.0);
        symmetrize(&mut self.p);
        self.k += 1;
        Ok(())
    }

    /// Absorbs the measurement `z` taken at `x`.
    pub fn update(&mut self, model: &BasisModel, x: &Point3, z: &Velocity) -> Result<()> {
        let h = model.eval_basis(x);
        self.update_with(&h, &Vector2::new(z[0], z[1]))
    }

    /// Applies [`update`](Self::update) in measurement order.
    pub fn batch_update(&mut self, model: &BasisModel, measurements: &MeasurementSet) -> Result<()> {
        for m in measurements.iter() {
            self.update(model, &m.position, &m.velocity)?;
        }
        Ok(())
    }

    /// One joint update with all measurements stacked, the noise being
    /// block-diagonal with `R` blocks.
    pub fn update_stacked(&mut self, h: &DMatrix<f64>, z: &DVector<f64>) -> Result<()> {
        let n = self.w.len();
        let q = h.nrows();
        if !q.is_multiple_of(2) || h.ncols() != n || z.len() != q {
            return Err(Error::DimensionMismatch("stacked H / z shapes".into()));
        }
        let mut r_full = DMatrix::zeros(q, q);
        for b in 0..q / 2 {
            r_full
                .fixed_view_mut::<2, 2>(2 * b, 2 * b)
                .copy_from(&self.r);
        }
        let m = &self.p * h.transpose();
        let s = h * &m + &r_full;
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Numerical("stacked innovation covariance is singular".into()))?;
        let gain = chol.solve(&m.transpose()).transpose();
        let innovation = z - h * &self.w;
        self.w += &gain * innovation;
        let i_gh = DMatrix::identity(n, n) - &gain * h;
        self.p = &i_gh * &self.p * i_gh.transpose() + &gain * r_full * gain.transpose();
        symmetrize(&mut self.p);
        self.k += q / 2;
        Ok(())
    }

    /// Container layout: header keys `n_weights`, `k`, `covariance`
    /// (`"full"` or `"diagonal"`); payload `w`, then `P` (column-major, or
    /// its diagonal), then `R` column-major.
    pub fn to_flowpack(&self) -> Flowpack {
        let n = self.w.len();
        let mut header = Header::new(Kind::State);
        header.set("n_weights", n).expect("usize");
        header.set("k", self.k).expect("usize");
        header.set("covariance", "full").expect("str");
        let mut payload = self.w.as_slice().to_vec();
        payload.extend_from_slice(self.p.as_slice());
        payload.extend_from_slice(self.r.as_slice());
        Flowpack::new(header, payload)
    }

    pub fn from_flowpack(pack: &Flowpack) -> Result<Self> {
        pack.header.expect_kind(Kind::State)?;
        let n: usize = pack.header.get("n_weights")?;
        let k: usize = pack.header.get("k")?;
        let cov: String = pack.header.get("covariance")?;
        let p_len = match cov.as_str() {
            "full" => n * n,
            "diagonal" => n,
            other => return Err(Error::Format(format!("unknown covariance layout '{other}'"))),
        };
        pack.expect_payload_len(n + p_len + 4)?;
        let data = &pack.payload;
        let w = DVector::from_column_slice(&data[..n]);
        let p = if cov == "full" {
            DMatrix::from_column_slice(n, n, &data[n..n + p_len])
        } else {
            DMatrix::from_diagonal(&DVector::from_column_slice(&data[n..n + p_len]))
        };
        let r = Matrix2::from_column_slice(&data[n + p_len..]);
        let mut state = EstimatorState::new(w, p, r)?;
        state.k = k;
        Ok(state)
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
}

/// Ensemble weights regrouped to one column per member, rows following the
/// weight layout of [`BasisModel::eval_basis`].
///
/// For the layered model, member `i`'s `Z` contiguous columns of `Σ̃Ṽᵀ`
/// are stacked depth block by depth block into a length-`rZ` column.
pub fn member_weights(model: &BasisModel) -> DMatrix<f64> {
    let w = model.coefficients();
    match model.variant() {
        Variant::Naive3D => w.clone(),
        Variant::Layered25D => {
            let r = model.rank();
            let nz = model.grid().nz;
            let e = w.ncols() / nz;
            let mut out = DMatrix::zeros(r * nz, e);
            for i in 0..e {
                for z in 0..nz {
                    out.view_mut((z * r, i), (r, 1))
                        .copy_from(&w.column(i * nz + z));
                }
            }
            out
        }
    }
}

/// Initial state from the ensemble: `w₀` is the row-wise mean of the member
/// weight matrix and `P₀` the diagonal of its row-wise unbiased variances.
pub fn init_kf(model: &BasisModel, r: Matrix2<f64>) -> Result<EstimatorState> {
    let wp = member_weights(model);
    let e = wp.ncols();
    if e < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 ensemble members for a variance, got {e}"
        )));
    }
    let n = wp.nrows();
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for row in 0..n {
        let vals = wp.row(row);
        let mu = vals.sum() / e as f64;
        let ss: f64 = vals.iter().map(|v| (v - mu).powi(2)).sum();
        mean[row] = mu;
        var[row] = ss / (e - 1) as f64;
    }
    EstimatorState::new(mean, DMatrix::from_diagonal(&var), r)
}

/// Reconstructed field `f̂ = H w` as a continuous velocity field.
pub fn estimate_field(model: &BasisModel, w: &DVector<f64>) -> Result<LatentField> {
    let beta = model.latent_from_weights(w)?;
    LatentField::new(model.grid_kernel().clone(), beta)
}

/// `f̂(x) = H(x) w` at each query point.
pub fn reconstruct(model: &BasisModel, w: &DVector<f64>, queries: &[Point3]) -> Result<Vec<Velocity>> {
    let field = estimate_field(model, w)?;
    Ok(queries.iter().map(|q| field.velocity_at(q)).collect())
}

/// `f̂` sampled on the model grid.
pub fn reconstruct_grid(model: &BasisModel, w: &DVector<f64>) -> Result<GriddedField> {
    let grid = *model.grid();
    let v = reconstruct(model, w, &grid.points())?;
    GriddedField::new(grid, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub w_star: DVector<f64>,
    /// RMS residual over every grid point and component, cm/s.
    pub rmse: f64,
}

/// Least-squares weights `w★ = argmin Σ_g ‖u_true(x_g) − H(x_g) w‖²` and the
/// RMS of their residual. Rank deficiency yields the minimum-norm solution.
pub fn span_bound(model: &BasisModel, truth: &GriddedField) -> Result<BoundResult> {
    if truth.grid() != model.grid() {
        return Err(Error::DimensionMismatch("truth is not on the model grid".into()));
    }
    let h = model.eval_basis_many(&model.grid().points());
    let t = DVector::from_vec(truth.interleaved());
    let svd = h.clone().svd(true, true);
    let eps = f64::EPSILON * h.nrows().max(h.ncols()) as f64 * svd.singular_values.max();
    let w_star = svd
        .solve(&t, eps)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let resid = &t - &h * &w_star;
    let rmse = 100.0 * (resid.norm_squared() / t.len() as f64).sqrt();
    Ok(BoundResult { w_star, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build, full_rank};
    use crate::flowgrid::build_grid;
    use crate::kernel::KernelConfig;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_state(n: usize, seed: u64) -> EstimatorState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        EstimatorState::new(w, p, Matrix2::new(0.3, 0.05, 0.05, 0.2)).unwrap()
    }

    fn random_h(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn scalar_toy_posterior() {
        // one weight observed directly in the first component, second row
        // carries no information
        let mut s = EstimatorState::new(
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            Matrix2::identity(),
        )
        .unwrap();
        let h = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        s.update_with(&h, &Vector2::new(1.0, 0.0)).unwrap();
        assert!((s.w[0] - 0.5).abs() <= 1e-12);
        assert!((s.p[(0, 0)] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let mut s = toy_state(5, 1);
        s.set_r(Matrix2::identity() * 1e12).unwrap();
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        s.update_with(&random_h(5, &mut rng), &Vector2::new(0.4, -0.7)).unwrap();
        assert!((&s.w - &before.w).norm() <= 1e-6 * before.w.norm());
        assert!((&s.p - &before.p).norm() <= 1e-6 * before.p.norm());
    }

    #[test]
    fn predict_is_identity() {
        let mut s = toy_state(4, 3);
        let before = s.clone();
        for _ in 0..1000 {
            s.predict();
        }
        assert_eq!(s, before);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_h(4, &mut rng);
        let z = Vector2::new(0.1, 0.2);
        let mut a = before.clone();
        a.predict();
        a.update_with(&h, &z).unwrap();
        let mut b = before;
        b.update_with(&h, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_matches_stacked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let hs: Vec<_> = (0..7).map(|_| random_h(n, &mut rng)).collect();
        let zs: Vec<_> = (0..7)
            .map(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut seq = toy_state(n, 6);
        let mut bat = seq.clone();
        for (h, z) in hs.iter().zip(&zs) {
            seq.update_with(h, z).unwrap();
        }
        let mut h_all = DMatrix::zeros(14, n);
        let mut z_all = DVector::zeros(14);
        for (b, (h, z)) in hs.iter().zip(&zs).enumerate() {
            h_all.rows_mut(2 * b, 2).copy_from(h);
            z_all[2 * b] = z[0];
            z_all[2 * b + 1] = z[1];
        }
        bat.update_stacked(&h_all, &z_all).unwrap();
        assert!((&seq.w - &bat.w).norm() <= 1e-8 * bat.w.norm());
        assert!((&seq.p - &bat.p).norm() <= 1e-8 * bat.p.norm());
        assert_eq!(seq.k, bat.k);
    }

    #[test]
    fn covariance_trace_never_grows() {
        let mut s = toy_state(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut trace = s.p.trace();
        for _ in 0..50 {
            s.update_with(&random_h(8, &mut rng), &Vector2::new(0.0, 1.0)).unwrap();
            let t = s.p.trace();
            assert!(t <= trace * (1.0 + 1e-12));
            trace = t;
        }
    }

    #[test]
    fn posterior_residual_shrinks() {
        let mut s = toy_state(5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random_h(5, &mut rng);
        let z = Vector2::new(2.0, -1.0);
        let prior = &h * &s.w;
        let big_s = &h * &s.p * h.transpose() + DMatrix::from_column_slice(2, 2, s.r().as_slice());
        let s_inv = big_s.try_inverse().unwrap();
        let prior_res = DVector::from_vec(vec![z[0] - prior[0], z[1] - prior[1]]);
        s.update_with(&h, &z).unwrap();
        let post = &h * &s.w;
        let post_res = DVector::from_vec(vec![z[0] - post[0], z[1] - post[1]]);
        let q = |v: &DVector<f64>| (v.transpose() * &s_inv * v)[0];
        assert!(q(&post_res) <= q(&prior_res));
    }

    #[test]
    fn rejects_singular_noise() {
        let w = DVector::zeros(2);
        let p = DMatrix::identity(2, 2);
        assert!(EstimatorState::new(w.clone(), p.clone(), Matrix2::zeros()).is_err());
        assert!(EstimatorState::new(w, p, Matrix2::new(1.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn joseph_form_stays_psd() {
        let n = 10;
        let mut s = toy_state(n, 11);
        s.set_r(Matrix2::identity() * 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let h = random_h(n, &mut rng);
            let z = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            s.update_with(&h, &z).unwrap();
        }
        let trace = s.p.trace();
        let eig = SymmetricEigen::new(s.p.clone()).eigenvalues;
        assert!(eig.min() >= -1e-8 * trace);
        assert_eq!(s.p, s.p.transpose());
    }

    fn layered_model(members: &DMatrix<f64>) -> BasisModel {
        let g = build_grid((0.0, 2e4), (0.0, 2e4), (2.5, 302.5), 3, 3, 2).unwrap();
        let kernel = KernelConfig::new(1e4, 1e4, 300.0, 1000.0).unwrap();
        let r = full_rank(Variant::Layered25D, &g, members.ncols());
        build(Variant::Layered25D, members, &g, &kernel, r).unwrap()
    }

    #[test]
    fn identical_members_give_zero_covariance() {
        let col = DVector::from_fn(36, |i, _| (i as f64 * 0.7).sin());
        let b = DMatrix::from_columns(&[col.clone(), col.clone(), col.clone()]);
        let model = layered_model(&b);
        let s = init_kf(&model, noise_free_r()).unwrap();
        assert!(s.p.iter().all(|v| v.abs() < 1e-20));
        let back = model.latent_from_weights(&s.w).unwrap();
        assert!((back - col).norm() < 1e-12);
    }

    #[test]
    fn mirrored_members_give_zero_mean() {
        let col = DVector::from_fn(36, |i, _| (i as f64 * 0.3).cos());
        let b = DMatrix::from_columns(&[col.clone(), -col]);
        let model = layered_model(&b);
        let s = init_kf(&model, noise_free_r()).unwrap();
        let wp = member_weights(&model);
        for i in 0..s.n_weights() {
            assert!(s.w[i].abs() < 1e-12);
            let a = wp[(i, 0)];
            assert!((s.p[(i, i)] - 2.0 * a * a).abs() <= 1e-12 * (1.0 + a * a));
        }
    }

    #[test]
    fn initial_state_is_ensemble_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = DMatrix::from_fn(36, 5, |_, _| rng.random_range(-1.0..1.0));
        for variant in [Variant::Layered25D, Variant::Naive3D] {
            let g = build_grid((0.0, 2e4), (0.0, 2e4), (2.5, 302.5), 3, 3, 2).unwrap();
            let kernel = KernelConfig::new(1e4, 1e4, 300.0, 1000.0).unwrap();
            let model = build(variant, &b, &g, &kernel, full_rank(variant, &g, 5)).unwrap();
            let s = init_kf(&model, noise_free_r()).unwrap();
            let mean = b.column_mean();
            let back = model.latent_from_weights(&s.w).unwrap();
            assert!((back - &mean).norm() <= 1e-10 * mean.norm());
            // each member reconstructs from its own regrouped column
            let wp = member_weights(&model);
            for i in 0..5 {
                let beta = model.latent_from_weights(&wp.column(i).into_owned()).unwrap();
                assert!((beta - b.column(i)).norm() <= 1e-10 * b.column(i).norm());
            }
        }
    }

    #[test]
    fn init_needs_two_members() {
        let b = DMatrix::from_fn(36, 1, |i, _| i as f64);
        let model = layered_model(&b);
        assert!(init_kf(&model, noise_free_r()).is_err());
    }

    #[test]
    fn reconstruct_is_linear_and_zero_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = DMatrix::from_fn(36, 3, |_, _| rng.random_range(-1.0..1.0));
        let model = layered_model(&b);
        let n = model.n_weights();
        let q = [[100.0, 200.0, 5.0], [15000.0, 3000.0, 250.0]];
        let zero = reconstruct(&model, &DVector::zeros(n), &q).unwrap();
        assert!(zero.iter().all(|v| *v == [0.0, 0.0]));
        let w1 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let w2 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let a = reconstruct(&model, &w1, &q).unwrap();
        let b2 = reconstruct(&model, &w2, &q).unwrap();
        let c = reconstruct(&model, &(&w1 + &w2), &q).unwrap();
        for i in 0..q.len() {
            for d in 0..2 {
                assert!((c[i][d] - a[i][d] - b2[i][d]).abs() <= 1e-12 * (a[i][d].abs() + b2[i][d].abs() + 1e-30));
            }
        }
        assert!(reconstruct(&model, &DVector::zeros(n + 1), &q).is_err());
    }

    #[test]
    fn bound_of_in_span_truth_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = DMatrix::from_fn(36, 3, |_, _| rng.random_range(-1.0..1.0) * 1e-6);
        let model = layered_model(&b);
        let w = DVector::from_fn(model.n_weights(), |_, _| rng.random_range(-1.0..1.0) * 1e-6);
        let truth = reconstruct_grid(&model, &w).unwrap();
        let bound = span_bound(&model, &truth).unwrap();
        assert!(bound.rmse <= 1e-6, "rmse {}", bound.rmse);
    }

    #[test]
    fn state_flowpack_roundtrip() {
        let s = toy_state(4, 16);
        let back = EstimatorState::from_flowpack(&s.to_flowpack()).unwrap();
        assert_eq!(back, s);
    }
}
