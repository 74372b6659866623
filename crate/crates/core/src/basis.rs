//! Basis flow models built from the latent matrix `B`.
//!
//! The layered (2.5D) model slices every member's latent vector into its
//! depth layers, pools all `Z·E` slices into `A` (`2XY × ZE`) and keeps the
//! left singular vectors `Ũ` as a library of 2D modes shared by every depth.
//! Each depth gets its own weights over that library, so the implied basis is
//! `H(x) = K(x, grid) · diag(Ũ, …, Ũ)`. The block-diagonal matrix is never
//! formed; block `z` of the weight vector only multiplies the kernel columns
//! of depth layer `z`.
//!
//! The naive 3D model takes the SVD of `B` directly and has at most `E`
//! modes.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::flowpack::{Flowpack, Header, Kind};
use crate::flowgrid::{Grid3D, Point3};
use crate::kernel::{GridKernel, KernelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "layered")]
    Layered25D,
    #[serde(rename = "naive3d")]
    Naive3D,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Layered25D => "layered",
            Variant::Naive3D => "naive3d",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layered" | "2.5d" => Ok(Variant::Layered25D),
            "naive3d" | "naive" | "3d" => Ok(Variant::Naive3D),
            other => Err(Error::InvalidArgument(format!("unknown basis variant '{other}'"))),
        }
    }
}

/// Number of modes `S` a variant produces.
pub fn mode_count(variant: Variant, nx: usize, ny: usize, nz: usize, e: usize) -> usize {
    match variant {
        Variant::Layered25D => (nz * e).min(2 * nx * ny),
        Variant::Naive3D => e.min(2 * nx * ny * nz),
    }
}

/// Thin SVD `A = U diag(σ) Vᵀ` with non-increasing `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> Result<ThinSvd> {
        if r == 0 || r > self.rank() {
            return Err(Error::OutOfRange(format!(
                "rank {r} outside 1..={}",
                self.rank()
            )));
        }
        Ok(ThinSvd {
            u: self.u.columns(0, r).into_owned(),
            singular_values: self.singular_values.rows(0, r).into_owned(),
            v: self.v.columns(0, r).into_owned(),
        })
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }

    /// `diag(σ) Vᵀ`.
    pub fn sigma_vt(&self) -> DMatrix<f64> {
        let mut w = self.v.transpose();
        for (mut row, s) in w.row_iter_mut().zip(self.singular_values.iter()) {
            row *= *s;
        }
        w
    }
}

/// Thin SVD sorted by decreasing singular value. Each left singular vector is
/// signed so its largest-magnitude entry is positive.
pub fn thin_svd(a: &DMatrix<f64>) -> ThinSvd {
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let s = svd.singular_values;
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut uu = DMatrix::zeros(u.nrows(), n);
    let mut vv = DMatrix::zeros(vt.ncols(), n);
    let mut ss = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        uu.set_column(dst, &(col * sign));
        vv.set_column(dst, &(vt.row(src).transpose() * sign));
        ss[dst] = s[src];
    }
    ThinSvd {
        u: uu,
        singular_values: ss,
        v: vv,
    }
}

/// Reshapes `B` (`2XYZ × E`) into `A` (`2XY × ZE`). Column `i·Z + z` of `A`
/// is depth slice `z` of member `i`.
pub fn reshape_layers(b: &DMatrix<f64>, nx: usize, ny: usize, nz: usize) -> Result<DMatrix<f64>> {
    let layer = 2 * nx * ny;
    if b.nrows() != layer * nz {
        return Err(Error::DimensionMismatch(format!(
            "B has {} rows, expected 2·{nx}·{ny}·{nz} = {}",
            b.nrows(),
            layer * nz
        )));
    }
    let e = b.ncols();
    let mut a = DMatrix::zeros(layer, nz * e);
    for i in 0..e {
        for z in 0..nz {
            a.column_mut(i * nz + z)
                .copy_from(&b.view((z * layer, i), (layer, 1)));
        }
    }
    Ok(a)
}

/// Inverse of [`reshape_layers`].
pub fn unreshape_layers(a: &DMatrix<f64>, nx: usize, ny: usize, nz: usize) -> Result<DMatrix<f64>> {
    let layer = 2 * nx * ny;
    if a.nrows() != layer || nz == 0 || !a.ncols().is_multiple_of(nz) {
        return Err(Error::DimensionMismatch(format!(
            "A is {}×{}, incompatible with layers of {layer} rows and Z = {nz}",
            a.nrows(),
            a.ncols()
        )));
    }
    let e = a.ncols() / nz;
    let mut b = DMatrix::zeros(layer * nz, e);
    for i in 0..e {
        for z in 0..nz {
            b.view_mut((z * layer, i), (layer, 1))
                .copy_from(&a.column(i * nz + z));
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// Fraction of `Σσ²` captured by the leading `s + 1` modes.
    pub cumulative_energy: Vec<f64>,
    pub mode_count: usize,
}

impl SpectrumReport {
    pub fn from_singular_values(sv: &[f64]) -> Self {
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let cumulative_energy = sv
            .iter()
            .map(|s| {
                acc += s * s;
                if total > 0.0 {
                    (acc / total).min(1.0)
                } else {
                    0.0
                }
            })
            .collect();
        SpectrumReport {
            singular_values: sv.to_vec(),
            cumulative_energy,
            mode_count: sv.len(),
        }
    }

    /// `mode,singular_value,cumulative_energy` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,singular_value,cumulative_energy\n");
        for (i, (sv, e)) in self
            .singular_values
            .iter()
            .zip(&self.cumulative_energy)
            .enumerate()
        {
            s.push_str(&format!("{},{},{}\n", i + 1, sv, e));
        }
        s
    }
}

/// A truncated basis ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisModel {
    variant: Variant,
    grid: Grid3D,
    kernel: KernelConfig,
    /// `Ũ`: `2XY × r` (layered) or `2XYZ × r` (naive).
    modes: DMatrix<f64>,
    /// Full pre-truncation spectrum.
    singular_values: Vec<f64>,
    /// `Σ̃Ṽᵀ`: `r × ZE` (layered) or `r × E` (naive).
    coefficients: DMatrix<f64>,
    gk: GridKernel,
}

impl BasisModel {
    /// Assembles a model from its parts, checking shapes.
    pub fn from_parts(
        variant: Variant,
        grid: Grid3D,
        kernel: KernelConfig,
        modes: DMatrix<f64>,
        singular_values: Vec<f64>,
        coefficients: DMatrix<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        kernel.validate()?;
        let rows = match variant {
            Variant::Layered25D => 2 * grid.layer_len(),
            Variant::Naive3D => 2 * grid.len(),
        };
        let r = modes.ncols();
        if modes.nrows() != rows {
            return Err(Error::DimensionMismatch(format!(
                "{variant} modes need {rows} rows, got {}",
                modes.nrows()
            )));
        }
        if r == 0 || r > singular_values.len() {
            return Err(Error::OutOfRange(format!(
                "rank {r} outside 1..={}",
                singular_values.len()
            )));
        }
        if coefficients.nrows() != r {
            return Err(Error::DimensionMismatch(format!(
                "coefficient matrix has {} rows for rank {r}",
                coefficients.nrows()
            )));
        }
        if variant == Variant::Layered25D && !coefficients.ncols().is_multiple_of(grid.nz) {
            return Err(Error::DimensionMismatch(
                "layered coefficients must have Z·E columns".into(),
            ));
        }
        Ok(BasisModel {
            variant,
            grid,
            kernel,
            modes,
            singular_values,
            coefficients,
            gk: GridKernel::new(grid, kernel),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn grid_kernel(&self) -> &GridKernel {
        &self.gk
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    /// Ensemble size the model was built from.
    pub fn n_members(&self) -> usize {
        match self.variant {
            Variant::Layered25D => self.coefficients.ncols() / self.grid.nz,
            Variant::Naive3D => self.coefficients.ncols(),
        }
    }

    pub fn n_weights(&self) -> usize {
        match self.variant {
            Variant::Layered25D => self.rank() * self.grid.nz,
            Variant::Naive3D => self.rank(),
        }
    }

    /// Stored entries of `Ũ`, the size measure used to compare variants.
    pub fn mode_elements(&self) -> usize {
        self.modes.len()
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(Error::DimensionMismatch(format!(
                "weight vector has {} entries, model has {}",
                w.len(),
                self.n_weights()
            )));
        }
        Ok(())
    }

    /// Latent coefficients `β = 𝗨 w` over the whole grid.
    pub fn latent_from_weights(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_weights(w.as_slice())?;
        Ok(match self.variant {
            Variant::Naive3D => &self.modes * w,
            Variant::Layered25D => {
                let r = self.rank();
                let layer = self.modes.nrows();
                let mut beta = DVector::zeros(layer * self.grid.nz);
                for z in 0..self.grid.nz {
                    let block = &self.modes * w.rows(z * r, r);
                    beta.rows_mut(z * layer, layer).copy_from(&block);
                }
                beta
            }
        })
    }

    /// Projects latent coefficients onto the weight space: `w = 𝗨ᵀ β`.
    pub fn weights_from_latent(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != 2 * self.grid.len() {
            return Err(Error::DimensionMismatch("latent vector length".into()));
        }
        Ok(match self.variant {
            Variant::Naive3D => self.modes.tr_mul(beta),
            Variant::Layered25D => {
                let r = self.rank();
                let layer = self.modes.nrows();
                let mut w = DVector::zeros(self.n_weights());
                for z in 0..self.grid.nz {
                    let block = self.modes.tr_mul(&beta.rows(z * layer, layer));
                    w.rows_mut(z * r, r).copy_from(&block);
                }
                w
            }
        })
    }

    /// Right-multiplies a kernel block against the grid by `𝗨`.
    fn apply_modes(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        match self.variant {
            Variant::Naive3D => k * &self.modes,
            Variant::Layered25D => {
                let r = self.rank();
                let layer = self.modes.nrows();
                let mut h = DMatrix::zeros(k.nrows(), self.n_weights());
                for z in 0..self.grid.nz {
                    let block = k.columns(z * layer, layer) * &self.modes;
                    h.columns_mut(z * r, r).copy_from(&block);
                }
                h
            }
        }
    }

    /// `H(x) = K(x, grid) 𝗨`, a `2 × n_weights` matrix.
    pub fn eval_basis(&self, x: &Point3) -> DMatrix<f64> {
        self.apply_modes(&self.gk.row(x))
    }

    /// `H` stacked over many query points (`2Q × n_weights`).
    pub fn eval_basis_many(&self, queries: &[Point3]) -> DMatrix<f64> {
        self.apply_modes(&self.gk.matrix(queries))
    }

    pub fn spectrum(&self) -> SpectrumReport {
        SpectrumReport::from_singular_values(&self.singular_values)
    }

    /// Container layout: `Ũ` column-major, then the full spectrum, then
    /// `Σ̃Ṽᵀ` column-major.
    pub fn to_flowpack(&self) -> Flowpack {
        let mut header = Header::new(Kind::Basis).with_grid(self.grid);
        header.e = Some(self.n_members());
        let set = |h: &mut Header, k: &str, v: serde_json::Value| {
            h.extra.insert(k.to_string(), v);
        };
        set(&mut header, "variant", serde_json::json!(self.variant));
        set(&mut header, "r", serde_json::json!(self.rank()));
        set(&mut header, "kernel", serde_json::json!(self.kernel));
        set(&mut header, "n_singular", serde_json::json!(self.singular_values.len()));
        let mut payload = self.modes.as_slice().to_vec();
        payload.extend_from_slice(&self.singular_values);
        payload.extend_from_slice(self.coefficients.as_slice());
        Flowpack::new(header, payload)
    }

    pub fn from_flowpack(pack: &Flowpack) -> Result<Self> {
        pack.header.expect_kind(Kind::Basis)?;
        let grid = pack.header.require_grid()?;
        let variant: Variant = pack.header.get("variant")?;
        let r: usize = pack.header.get("r")?;
        let kernel: KernelConfig = pack.header.get("kernel")?;
        let n_sv: usize = pack.header.get("n_singular")?;
        let e = pack
            .header
            .e
            .ok_or_else(|| Error::Format("basis header is missing 'e'".into()))?;
        let (rows, cols) = match variant {
            Variant::Layered25D => (2 * grid.layer_len(), grid.nz * e),
            Variant::Naive3D => (2 * grid.len(), e),
        };
        pack.expect_payload_len(rows * r + n_sv + r * cols)?;
        let p = &pack.payload;
        let modes = DMatrix::from_column_slice(rows, r, &p[..rows * r]);
        let sv = p[rows * r..rows * r + n_sv].to_vec();
        let coefficients = DMatrix::from_column_slice(r, cols, &p[rows * r + n_sv..]);
        Self::from_parts(variant, grid, kernel, modes, sv, coefficients)
    }
}

fn check_b(b: &DMatrix<f64>, grid: &Grid3D) -> Result<()> {
    if b.nrows() != 2 * grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "B has {} rows, grid needs {}",
            b.nrows(),
            2 * grid.len()
        )));
    }
    if b.ncols() == 0 {
        return Err(Error::InvalidArgument("B has no members".into()));
    }
    Ok(())
}

/// Layered (2.5D) model: reshape, thin SVD, truncate to rank `r`.
pub fn build_layered(b: &DMatrix<f64>, grid: &Grid3D, kernel: &KernelConfig, r: usize) -> Result<BasisModel> {
    check_b(b, grid)?;
    let a = reshape_layers(b, grid.nx, grid.ny, grid.nz)?;
    let svd = thin_svd(&a);
    let t = svd.truncate(r)?;
    BasisModel::from_parts(
        Variant::Layered25D,
        *grid,
        *kernel,
        t.u.clone(),
        svd.singular_values.iter().copied().collect(),
        t.sigma_vt(),
    )
}

/// Naive 3D model: thin SVD of `B` itself.
pub fn build_naive3d(b: &DMatrix<f64>, grid: &Grid3D, kernel: &KernelConfig, r: usize) -> Result<BasisModel> {
    check_b(b, grid)?;
    let svd = thin_svd(b);
    let t = svd.truncate(r)?;
    BasisModel::from_parts(
        Variant::Naive3D,
        *grid,
        *kernel,
        t.u.clone(),
        svd.singular_values.iter().copied().collect(),
        t.sigma_vt(),
    )
}

pub fn build(variant: Variant, b: &DMatrix<f64>, grid: &Grid3D, kernel: &KernelConfig, r: usize) -> Result<BasisModel> {
    match variant {
        Variant::Layered25D => build_layered(b, grid, kernel, r),
        Variant::Naive3D => build_naive3d(b, grid, kernel, r),
    }
}

/// Full rank `S` for a variant given `B`'s shape.
pub fn full_rank(variant: Variant, grid: &Grid3D, e: usize) -> usize {
    mode_count(variant, grid.nx, grid.ny, grid.nz, e)
}
