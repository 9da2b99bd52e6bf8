//! Galerkin discretisation of the complete electrode model with P1 elements
//! and elementwise-constant conductivity.

use std::f64::consts::PI;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{Pair, SparseColMat, SymbolicSparseColMat};
use faer::{Conj, Mat, Side};
use nalgebra::DMatrix;

use super::{CurrentPatterns, DiscMesh, ElectrodeLayout};
use crate::error::{EkiError, Result};

/// Nodal potential and electrode voltages for one current pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct CemSolution {
    pub potential: Vec<f64>,
    pub voltages: Vec<f64>,
}

/// Boundary integrals of one electrode over the polygonal boundary.
#[derive(Debug, Clone, Default)]
struct ElectrodeIntegrals {
    length: f64,
    /// (node, ∫φ_node) pairs.
    load: Vec<(usize, f64)>,
    /// (node_a, node_b, ∫φ_a φ_b), with both orders present for a ≠ b.
    mass: Vec<(usize, usize, f64)>,
}

fn electrode_integrals(mesh: &DiscMesh, arc: [f64; 2]) -> ElectrodeIntegrals {
    let mut out = ElectrodeIntegrals::default();
    for e in &mesh.boundary {
        let [ta, tb] = e.theta;
        let [a, b] = e.nodes;
        let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
        let chord = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
        for shift in [-2.0 * PI, 0.0, 2.0 * PI] {
            let lo = ta.max(arc[0] + shift);
            let hi = tb.min(arc[1] + shift);
            if hi <= lo {
                continue;
            }
            // Edge parameter s ∈ [0, 1] is linear in angle; φ_a = 1 − s, φ_b = s.
            let s0 = (lo - ta) / (tb - ta);
            let s1 = (hi - ta) / (tb - ta);
            let d1 = s1 - s0;
            let d2 = (s1 * s1 - s0 * s0) / 2.0;
            let d3 = (s1.powi(3) - s0.powi(3)) / 3.0;
            let aa = ((1.0 - s0).powi(3) - (1.0 - s1).powi(3)) / 3.0;
            out.length += chord * d1;
            out.load.push((a, chord * (d1 - d2)));
            out.load.push((b, chord * d2));
            out.mass.push((a, a, chord * aa));
            out.mass.push((b, b, chord * d3));
            out.mass.push((a, b, chord * (d2 - d3)));
            out.mass.push((b, a, chord * (d2 - d3)));
        }
    }
    out
}

/// Gradient-product matrix of the P1 basis on one triangle (unit conductivity).
fn unit_stiffness(mesh: &DiscMesh, t: usize) -> [[f64; 3]; 3] {
    let tri = mesh.triangles[t];
    let p = tri.map(|v| mesh.nodes[v]);
    let area = mesh.area(t);
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    k
}

/// Mesh- and layout-dependent data for repeated CEM solves.
///
/// The sparsity pattern and its symbolic Cholesky factorisation are built
/// once; each solve only refills values and refactorises numerically.
#[derive(Debug, Clone)]
pub struct CemSolver {
    mesh: DiscMesh,
    layout: ElectrodeLayout,
    electrodes: Vec<ElectrodeIntegrals>,
    local: Vec<[[f64; 3]; 3]>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: faer::sparse::Argsort<usize>,
    llt_symbolic: SymbolicLlt<usize>,
    /// Values of the conductivity-independent entries, in pattern order
    /// after the 6 entries of every triangle.
    fixed: Vec<f64>,
}

impl CemSolver {
    pub fn new(mesh: DiscMesh, layout: ElectrodeLayout) -> Result<Self> {
        mesh.validate()?;
        layout.validate()?;
        let n = mesh.n_nodes();
        let m = layout.count();
        let electrodes: Vec<ElectrodeIntegrals> = layout.arcs.iter().map(|a| electrode_integrals(&mesh, *a)).collect();
        if let Some(k) = electrodes.iter().position(|e| e.length <= 0.0) {
            return Err(EkiError::Mesh(format!("electrode {k} does not touch the boundary")));
        }
        let local: Vec<_> = (0..mesh.n_triangles()).map(|t| unit_stiffness(&mesh, t)).collect();

        let mut pairs = Vec::with_capacity(6 * mesh.n_triangles() + 4 * n);
        let lower = |i: usize, j: usize| Pair::new(i.max(j), i.min(j));
        for tri in &mesh.triangles {
            for a in 0..3 {
                for b in 0..=a {
                    pairs.push(lower(tri[a], tri[b]));
                }
            }
        }
        let mut fixed = Vec::new();
        // Rank-one grounding term g gᵀ on the electrode block, weighted to
        // match the size of the electrode diagonal.
        let ground = electrodes.iter().zip(&layout.impedances).map(|(e, z)| e.length / z).sum::<f64>() / m as f64;
        for (k, (e, z)) in electrodes.iter().zip(&layout.impedances).enumerate() {
            for &(a, b, v) in &e.mass {
                if a >= b {
                    pairs.push(lower(a, b));
                    fixed.push(v / z);
                }
            }
            for &(a, v) in &e.load {
                pairs.push(lower(n + k, a));
                fixed.push(-v / z);
            }
            pairs.push(lower(n + k, n + k));
            fixed.push(e.length / z + ground);
            for l in 0..k {
                pairs.push(lower(n + k, n + l));
                fixed.push(ground);
            }
        }
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n + m, n + m, &pairs)
            .map_err(|e| EkiError::Factorisation(format!("sparsity pattern: {e:?}")))?;
        let llt_symbolic = SymbolicLlt::try_new(symbolic.as_ref(), Side::Lower)
            .map_err(|e| EkiError::Factorisation(format!("symbolic Cholesky: {e:?}")))?;
        Ok(CemSolver {
            mesh,
            layout,
            electrodes,
            local,
            symbolic,
            argsort,
            llt_symbolic,
            fixed,
        })
    }

    pub fn mesh(&self) -> &DiscMesh {
        &self.mesh
    }

    pub fn layout(&self) -> &ElectrodeLayout {
        &self.layout
    }

    fn check_kappa(&self, kappa: &[f64]) -> Result<()> {
        if kappa.len() != self.mesh.n_triangles() {
            return Err(EkiError::DimensionMismatch(format!(
                "{} conductivity values for {} elements",
                kappa.len(),
                self.mesh.n_triangles()
            )));
        }
        if kappa.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return Err(EkiError::Forward("conductivity must be positive and finite".into()));
        }
        Ok(())
    }

    /// Grounded system matrix (lower triangle stored).
    pub fn assemble(&self, kappa: &[f64]) -> Result<SparseColMat<usize, f64>> {
        self.check_kappa(kappa)?;
        let mut vals = Vec::with_capacity(6 * kappa.len() + self.fixed.len());
        for (k, loc) in kappa.iter().zip(&self.local) {
            for a in 0..3 {
                for b in 0..=a {
                    vals.push(k * loc[a][b]);
                }
            }
        }
        vals.extend_from_slice(&self.fixed);
        SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, &vals)
            .map_err(|e| EkiError::Factorisation(format!("assembly: {e:?}")))
    }

    /// The ungrounded CEM matrix, assembled densely with both triangles
    /// written out independently. Intended for small meshes.
    pub fn dense_system(&self, kappa: &[f64]) -> Result<DMatrix<f64>> {
        self.check_kappa(kappa)?;
        let n = self.mesh.n_nodes();
        let m = self.layout.count();
        let mut a = DMatrix::zeros(n + m, n + m);
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    a[(tri[i], tri[j])] += kappa[t] * self.local[t][i][j];
                }
            }
        }
        for (k, (e, z)) in self.electrodes.iter().zip(&self.layout.impedances).enumerate() {
            for &(p, q, v) in &e.mass {
                a[(p, q)] += v / z;
            }
            for &(p, v) in &e.load {
                a[(n + k, p)] -= v / z;
                a[(p, n + k)] -= v / z;
            }
            a[(n + k, n + k)] += e.length / z;
        }
        Ok(a)
    }

    fn factorise(&self, kappa: &[f64]) -> Result<Llt<usize, f64>> {
        let mat = self.assemble(kappa)?;
        Llt::try_new_with_symbolic(self.llt_symbolic.clone(), mat.as_ref(), Side::Lower)
            .map_err(|e| EkiError::Factorisation(format!("CEM Cholesky: {e:?}")))
    }

    /// Solves every pattern with a single factorisation.
    pub fn solve(&self, kappa: &[f64], patterns: &CurrentPatterns) -> Result<Vec<CemSolution>> {
        let x = self.solve_raw(kappa, patterns)?;
        let n = self.mesh.n_nodes();
        let m = self.layout.count();
        Ok((0..patterns.len())
            .map(|p| CemSolution {
                potential: (0..n).map(|i| x[(i, p)]).collect(),
                voltages: (0..m).map(|k| x[(n + k, p)]).collect(),
            })
            .collect())
    }

    /// Electrode voltages only, pattern-major.
    pub fn voltages(&self, kappa: &[f64], patterns: &CurrentPatterns) -> Result<Vec<f64>> {
        let x = self.solve_raw(kappa, patterns)?;
        let n = self.mesh.n_nodes();
        let m = self.layout.count();
        let mut out = Vec::with_capacity(m * patterns.len());
        for p in 0..patterns.len() {
            out.extend((0..m).map(|k| x[(n + k, p)]));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::Forward("non-finite electrode voltage".into()));
        }
        Ok(out)
    }

    fn solve_raw(&self, kappa: &[f64], patterns: &CurrentPatterns) -> Result<Mat<f64>> {
        let n = self.mesh.n_nodes();
        let m = self.layout.count();
        if patterns.electrodes() != m {
            return Err(EkiError::DimensionMismatch(format!(
                "patterns address {} electrodes, layout has {m}",
                patterns.electrodes()
            )));
        }
        let llt = self.factorise(kappa)?;
        let mut rhs = Mat::<f64>::zeros(n + m, patterns.len());
        for (p, pat) in patterns.iter().enumerate() {
            for (k, v) in pat.iter().enumerate() {
                rhs[(n + k, p)] = *v;
            }
        }
        llt.solve_in_place_with_conj(Conj::No, rhs.as_mut());
        Ok(rhs)
    }

    /// Currents (1/z_k)∫_{e_k}(V_k − v) ds leaving through each electrode.
    pub fn electrode_currents(&self, sol: &CemSolution) -> Vec<f64> {
        self.electrodes
            .iter()
            .zip(&self.layout.impedances)
            .zip(&sol.voltages)
            .map(|((e, z), vk)| {
                let integral: f64 = e.load.iter().map(|(a, w)| w * sol.potential[*a]).sum();
                (e.length * vk - integral) / z
            })
            .collect()
    }

    /// Polygonal length of each electrode.
    pub fn electrode_lengths(&self) -> Vec<f64> {
        self.electrodes.iter().map(|e| e.length).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::adjacent_patterns;
    use super::*;

    fn solver(rings: usize) -> CemSolver {
        CemSolver::new(DiscMesh::polar(rings).unwrap(), ElectrodeLayout::equispaced(8, 0.5, 0.05).unwrap()).unwrap()
    }

    #[test]
    fn electrode_lengths_follow_arcs() {
        let s = CemSolver::new(DiscMesh::polar(30).unwrap(), ElectrodeLayout::equispaced(16, 0.5, 0.01).unwrap()).unwrap();
        for len in s.electrode_lengths() {
            assert!((len / (PI / 16.0) - 1.0).abs() < 1e-3);
        }
        // Partial-edge integrals: ∫φ over the electrode sums to its length.
        for e in &s.electrodes {
            let sum: f64 = e.load.iter().map(|p| p.1).sum();
            assert!((sum - e.length).abs() < 1e-14);
            let msum: f64 = e.mass.iter().map(|p| p.2).sum();
            assert!((msum - e.length).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_system_is_symmetric_with_constant_kernel() {
        let s = solver(4);
        let kappa: Vec<f64> = (0..s.mesh().n_triangles()).map(|t| 1.0 + (t % 5) as f64 * 0.3).collect();
        let a = s.dense_system(&kappa).unwrap();
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        let ones = nalgebra::DVector::from_element(a.nrows(), 1.0);
        assert!((&a * ones).amax() < 1e-12 * a.amax());
    }

    #[test]
    fn grounded_solution_matches_bordered_system() {
        let s = solver(5);
        let nt = s.mesh().n_triangles();
        let kappa: Vec<f64> = (0..nt).map(|t| 0.5 + ((t * 7) % 11) as f64 / 10.0).collect();
        let pats = adjacent_patterns(8, 0.1).unwrap();
        let sols = s.solve(&kappa, &pats).unwrap();
        let a = s.dense_system(&kappa).unwrap();
        let (n, m) = (s.mesh().n_nodes(), 8);
        // Lagrange multiplier enforcing Σ V_k = 0.
        let mut big = DMatrix::zeros(n + m + 1, n + m + 1);
        big.view_mut((0, 0), (n + m, n + m)).copy_from(&a);
        for k in 0..m {
            big[(n + k, n + m)] = 1.0;
            big[(n + m, n + k)] = 1.0;
        }
        let lu = big.lu();
        for (p, sol) in sols.iter().enumerate() {
            let mut b = nalgebra::DVector::zeros(n + m + 1);
            for k in 0..m {
                b[n + k] = pats.pattern(p)[k];
            }
            let x = lu.solve(&b).unwrap();
            for k in 0..m {
                assert!((x[n + k] - sol.voltages[k]).abs() < 1e-10);
            }
            assert!(x[n + m].abs() < 1e-10);
            assert!(sol.voltages.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_conductivity() {
        let s = solver(3);
        let pats = adjacent_patterns(8, 0.1).unwrap();
        assert!(s.voltages(&vec![1.0; 5], &pats).is_err());
        let mut k = vec![1.0; s.mesh().n_triangles()];
        k[0] = 0.0;
        assert!(s.voltages(&k, &pats).is_err());
    }
}
