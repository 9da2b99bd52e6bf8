//! Exact application of A^{-(ν+1)/2} through the Kronecker structure
//! A = I + T₁ ⊕ T₂ of the tensor-grid operator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::operator::one_d_operator;
use super::{AmplitudeScaling, GridField, GridGeometry, WmHyper};
use crate::error::{EkiError, Result};

fn one_d_eigen(n: usize, h: f64, l: f64, zeta_r: f64) -> (DVector<f64>, DMatrix<f64>) {
    let (d, o) = one_d_operator(n, h, l, zeta_r);
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = d[i];
        if i + 1 < n {
            t[(i, i + 1)] = o[i];
            t[(i + 1, i)] = o[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (eig.eigenvalues, eig.eigenvectors)
}

/// The linear map ω ↦ Ψ = c/√(h₁h₂) · A^{-(ν+1)/2} ω.
///
/// Immutable once built, so one instance can serve many threads.
#[derive(Debug, Clone)]
pub struct WmTransform {
    grid: GridGeometry,
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    /// Spectral multipliers scale·(1 + μ₁ᵢ + μ₂ⱼ)^{-p}, laid out like the grid.
    weights: DMatrix<f64>,
}

impl WmTransform {
    pub fn new(hyper: &WmHyper, grid: &GridGeometry, scaling: AmplitudeScaling) -> Result<Self> {
        hyper.validate()?;
        let (mu1, q1) = one_d_eigen(grid.n1, grid.h1, hyper.l1, hyper.zeta_r);
        let (mu2, q2) = one_d_eigen(grid.n2, grid.h2, hyper.l2, hyper.zeta_r);
        let p = hyper.exponent();
        let scale = scaling.constant(hyper) / (grid.h1 * grid.h2).sqrt();
        let mut weights = DMatrix::zeros(grid.n1, grid.n2);
        for j in 0..grid.n2 {
            for i in 0..grid.n1 {
                let lam = 1.0 + mu1[i] + mu2[j];
                if !(lam > 0.0) {
                    return Err(EkiError::Factorisation(format!(
                        "operator eigenvalue {lam} is not positive"
                    )));
                }
                weights[(i, j)] = scale * lam.powf(-p);
            }
        }
        Ok(WmTransform {
            grid: *grid,
            q1,
            q2,
            weights,
        })
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    pub fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        if omega.len() != self.grid.len() {
            return Err(EkiError::DimensionMismatch(format!(
                "white noise has {} values, grid has {} cells",
                omega.len(),
                self.grid.len()
            )));
        }
        let w = DMatrix::from_column_slice(self.grid.n1, self.grid.n2, omega);
        let mut s = self.q1.tr_mul(&w) * &self.q2;
        s.component_mul_assign(&self.weights);
        let psi = &self.q1 * s * self.q2.transpose();
        Ok(psi.as_slice().to_vec())
    }

    /// Exact marginal variance of Ψ in every cell for ω ~ N(0, I).
    pub fn marginal_variance(&self) -> Vec<f64> {
        let (n1, n2) = (self.grid.n1, self.grid.n2);
        let w2 = self.weights.map(|w| w * w);
        let a = self.q1.map(|q| q * q);
        let b = self.q2.map(|q| q * q);
        let v = &a * w2 * b.transpose();
        debug_assert_eq!(v.shape(), (n1, n2));
        v.as_slice().to_vec()
    }

    /// Exact covariance between cell `k` and every cell.
    pub fn covariance_row(&self, k: usize) -> Vec<f64> {
        let (n1, _) = (self.grid.n1, self.grid.n2);
        let (a, b) = (k % n1, k / n1);
        let mut s = self.weights.map(|w| w * w);
        for j in 0..s.ncols() {
            for i in 0..s.nrows() {
                s[(i, j)] *= self.q1[(a, i)] * self.q2[(b, j)];
            }
        }
        let c = &self.q1 * s * self.q2.transpose();
        c.as_slice().to_vec()
    }

    /// Dense covariance of Ψ; only sensible for small grids.
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut c = DMatrix::zeros(n, n);
        for k in 0..n {
            c.set_column(k, &DVector::from_vec(self.covariance_row(k)));
        }
        c
    }
}

/// Ψ = W_Θ ω for a single field.
pub fn wm_transform(omega: &GridField, hyper: &WmHyper, scaling: AmplitudeScaling) -> Result<GridField> {
    let t = WmTransform::new(hyper, omega.geometry(), scaling)?;
    GridField::new(*omega.geometry(), t.apply(omega.values())?)
}

/// Ratio of the exact variance in the cell at the middle of the left edge
/// to the variance in the central cell.
pub fn robin_variance_ratio(hyper: &WmHyper, grid: &GridGeometry) -> Result<f64> {
    let v = WmTransform::new(hyper, grid, AmplitudeScaling::MaternVariance)?.marginal_variance();
    let (mi, mj) = (grid.n1 / 2, grid.n2 / 2);
    Ok(v[grid.index(0, mj)] / v[grid.index(mi, mj)])
}

/// Bisection in log ζ_R for a unit edge-to-centre variance ratio at the
/// given isotropic lengthscale.
pub fn calibrate_robin(nu: f64, grid: &GridGeometry, lengthscale: f64) -> Result<f64> {
    let ratio = |z: f64| {
        robin_variance_ratio(
            &WmHyper {
                lambda: 1.0,
                nu,
                sigma: 1.0,
                l1: lengthscale,
                l2: lengthscale,
                zeta_r: z,
            },
            grid,
        )
    };
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    if ratio(lo.exp())? > 1.0 || ratio(hi.exp())? < 1.0 {
        return Err(EkiError::InvalidParameter(
            "Robin calibration bracket does not straddle a unit ratio".into(),
        ));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid.exp())? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}
