//! Cell-centred finite-difference discretisation of
//! I − ∇·diag(L₁², L₂²)∇ with Robin boundary conditions.

use nalgebra::DMatrix;

use super::{GridGeometry, WmHyper};
use crate::error::{EkiError, Result};

/// Minimal CSR matrix used for the assembled operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Sums duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .position(|&k| k == c)
            .map(|p| self.values[range.start + p])
            .unwrap_or(0.0)
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[(r, c)] += v;
            }
        }
        d
    }
}

/// Coefficient of the boundary face of an end cell, in units of L²/h².
///
/// The Robin condition Ψ + ζ L² ∂ₙΨ = 0 is imposed at the face with a
/// one-sided half-cell difference, giving a face conductance 2/(1 + β) with
/// β = 2ζL²/h. ζ = 0 is Dirichlet at the face; ζ → ∞ is Neumann.
pub(crate) fn robin_face_coefficient(zeta_r: f64, l: f64, h: f64) -> f64 {
    if zeta_r.is_infinite() {
        return 0.0;
    }
    let beta = 2.0 * zeta_r * l * l / h;
    2.0 / (1.0 + beta)
}

/// Symmetric tridiagonal 1D operator −d/dx(L² d/dx) on `n` cells, returned as
/// (diagonal, off-diagonal).
pub(crate) fn one_d_operator(n: usize, h: f64, l: f64, zeta_r: f64) -> (Vec<f64>, Vec<f64>) {
    let s = l * l / (h * h);
    let boundary = robin_face_coefficient(zeta_r, l, h);
    let mut diag = vec![2.0 * s; n];
    diag[0] = s * (1.0 + boundary);
    diag[n - 1] = s * (1.0 + boundary);
    (diag, vec![-s; n - 1])
}

/// Assembles the sparse SPD matrix A ≈ I − ∇·diag(L₁², L₂²)∇ with the Robin
/// condition folded into the boundary rows.
pub fn assemble_wm_operator(hyper: &WmHyper, grid: &GridGeometry) -> Result<SparseMatrix> {
    hyper.validate_lengths()?;
    if !(hyper.zeta_r >= 0.0) {
        return Err(EkiError::InvalidParameter(format!(
            "Robin parameter must be nonnegative, got {}",
            hyper.zeta_r
        )));
    }
    let (n1, n2) = (grid.n1, grid.n2);
    let (dx, ox) = one_d_operator(n1, grid.h1, hyper.l1, hyper.zeta_r);
    let (dy, oy) = one_d_operator(n2, grid.h2, hyper.l2, hyper.zeta_r);
    let mut trips = Vec::with_capacity(5 * grid.len());
    for j in 0..n2 {
        for i in 0..n1 {
            let k = grid.index(i, j);
            trips.push((k, k, 1.0 + dx[i] + dy[j]));
            if i + 1 < n1 {
                trips.push((k, grid.index(i + 1, j), ox[i]));
                trips.push((grid.index(i + 1, j), k, ox[i]));
            }
            if j + 1 < n2 {
                trips.push((k, grid.index(i, j + 1), oy[j]));
                trips.push((grid.index(i, j + 1), k, oy[j]));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(grid.len(), trips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(l1: f64, l2: f64, zeta_r: f64) -> WmHyper {
        WmHyper {
            lambda: 1.0,
            nu: 3.0,
            sigma: 1.0,
            l1,
            l2,
            zeta_r,
        }
    }

    fn tridiag_dense(d: &[f64], o: &[f64]) -> DMatrix<f64> {
        let n = d.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = d[i];
            if i + 1 < n {
                m[(i, i + 1)] = o[i];
                m[(i + 1, i)] = o[i];
            }
        }
        m
    }

    #[test]
    fn matches_kronecker_assembly() {
        let g = GridGeometry::unit_square(5).unwrap();
        let h = hyper(1.0, 1.0, 0.7);
        let a = assemble_wm_operator(&h, &g).unwrap().to_dense();
        // Independent route: A = I + I⊗T₁ + T₂⊗I with x fastest.
        let (dx, ox) = one_d_operator(5, g.h1, 1.0, 0.7);
        let (dy, oy) = one_d_operator(5, g.h2, 1.0, 0.7);
        let t1 = tridiag_dense(&dx, &ox);
        let t2 = tridiag_dense(&dy, &oy);
        let eye = DMatrix::<f64>::identity(5, 5);
        let kron = DMatrix::<f64>::identity(25, 25) + eye.kronecker(&t1) + t2.kronecker(&eye);
        assert!((&a - &kron).amax() < 1e-12);

        // Hand-checked entries with h = 0.4: L²/h² = 6.25, β = 2·0.7/0.4 = 3.5.
        let s = 6.25;
        assert!((a[(12, 12)] - (1.0 + 4.0 * s)).abs() < 1e-12);
        assert!((a[(12, 13)] + s).abs() < 1e-12);
        assert!((a[(12, 17)] + s).abs() < 1e-12);
        let corner = 1.0 + 2.0 * s * (1.0 + 2.0 / 4.5);
        assert!((a[(0, 0)] - corner).abs() < 1e-12);
        assert_eq!(a[(0, 6)], 0.0);
    }

    #[test]
    fn symmetric_and_diagonally_dominant() {
        let g = GridGeometry::new(6, 4, -1.0, -1.0, 2.0 / 6.0, 0.5).unwrap();
        for &z in &[0.0, 0.3, 10.0] {
            let a = assemble_wm_operator(&hyper(0.3, 0.8, z), &g).unwrap();
            let d = a.to_dense();
            assert!((&d - d.transpose()).amax() < 1e-14);
            for r in 0..a.dim() {
                let off: f64 = a.row(r).filter(|(c, _)| *c != r).map(|(_, v)| v.abs()).sum();
                assert!(a.get(r, r) > off);
            }
        }
    }

    #[test]
    fn neumann_limit_preserves_constants() {
        let g = GridGeometry::unit_square(8).unwrap();
        let a = assemble_wm_operator(&hyper(0.4, 0.25, f64::INFINITY), &g).unwrap();
        let ones = vec![1.0; g.len()];
        for v in a.mul_vec(&ones) {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // Large but finite ζ approaches the same limit.
        let a = assemble_wm_operator(&hyper(0.4, 0.25, 1e12), &g).unwrap();
        for v in a.mul_vec(&ones) {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn tiny_lengthscales_give_identity() {
        let g = GridGeometry::unit_square(6).unwrap();
        let a = assemble_wm_operator(&hyper(1e-9, 1e-9, 1.0), &g).unwrap().to_dense();
        assert!((a - DMatrix::<f64>::identity(36, 36)).amax() < 1e-15);
    }

    #[test]
    fn rejects_bad_lengths() {
        let g = GridGeometry::unit_square(4).unwrap();
        assert!(assemble_wm_operator(&hyper(0.0, 1.0, 1.0), &g).is_err());
        assert!(assemble_wm_operator(&hyper(1.0, -1.0, 1.0), &g).is_err());
        assert!(assemble_wm_operator(&hyper(1.0, 1.0, -1.0), &g).is_err());
    }
}
