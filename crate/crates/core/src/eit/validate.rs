//! Physical consistency checks for the CEM solver.

use serde::{Deserialize, Serialize};

use super::{adjacent_patterns, CemSolver, DiscMesh, ElectrodeLayout};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemValidationSettings {
    /// Rings of the polar mesh; the refinement check doubles this.
    pub rings: usize,
    pub electrodes: usize,
    pub coverage: f64,
    pub contact_impedance: f64,
    pub current: f64,
    pub reciprocity_tol: f64,
    pub kirchhoff_tol: f64,
    pub refinement_tol: f64,
}

impl Default for CemValidationSettings {
    /// Rings = 48 is the 9216-element data mesh.
    fn default() -> Self {
        CemValidationSettings {
            rings: 48,
            electrodes: 16,
            coverage: 0.5,
            contact_impedance: 0.01,
            current: 0.1,
            reciprocity_tol: 1e-8,
            kirchhoff_tol: 1e-10,
            refinement_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemValidationReport {
    pub settings: CemValidationSettings,
    /// max |I_qᵀU_p − I_pᵀU_q| / max |I_pᵀU_q| over pattern pairs.
    pub reciprocity: f64,
    /// max over patterns of ‖I_computed − I_applied‖∞ / ‖I_applied‖∞.
    pub kirchhoff: f64,
    /// max over patterns of |Σ_k I_k| / ‖I_applied‖∞.
    pub current_sum: f64,
    /// ‖U_h − U_{h/2}‖ / ‖U_{h/2}‖ for κ ≡ 1.
    pub refinement: f64,
    pub elements: usize,
    pub refined_elements: usize,
    pub pass: bool,
}

/// A smooth, strongly heterogeneous test conductivity.
fn test_conductivity(x: f64, y: f64) -> f64 {
    (0.8 * (3.0 * x).sin() * (2.0 * y + 0.3).cos() + 0.5 * x * y - 0.4 * y).exp()
}

pub fn validate_cem(s: &CemValidationSettings) -> Result<CemValidationReport> {
    let layout = ElectrodeLayout::equispaced(s.electrodes, s.coverage, s.contact_impedance)?;
    let patterns = adjacent_patterns(s.electrodes, s.current)?;
    let mesh = DiscMesh::polar(s.rings)?;
    let kappa: Vec<f64> = (0..mesh.n_triangles())
        .map(|t| {
            let c = mesh.centroid(t);
            test_conductivity(c[0], c[1])
        })
        .collect();
    let elements = mesh.n_triangles();
    let solver = CemSolver::new(mesh, layout.clone())?;
    let sols = solver.solve(&kappa, &patterns)?;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut worst_asym: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for p in 0..patterns.len() {
        for q in 0..patterns.len() {
            let a = dot(patterns.pattern(q), &sols[p].voltages);
            let b = dot(patterns.pattern(p), &sols[q].voltages);
            worst_asym = worst_asym.max((a - b).abs());
            scale = scale.max(a.abs());
        }
    }

    let mut kirchhoff: f64 = 0.0;
    let mut current_sum: f64 = 0.0;
    for (p, sol) in sols.iter().enumerate() {
        let applied = patterns.pattern(p);
        let imax = applied.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let computed = solver.electrode_currents(sol);
        let err = computed.iter().zip(applied).fold(0.0f64, |m, (c, a)| m.max((c - a).abs()));
        kirchhoff = kirchhoff.max(err / imax);
        current_sum = current_sum.max(computed.iter().sum::<f64>().abs() / imax);
    }

    let coarse = solver.voltages(&vec![1.0; elements], &patterns)?;
    let fine_solver = CemSolver::new(DiscMesh::polar(2 * s.rings)?, layout)?;
    let refined_elements = fine_solver.mesh().n_triangles();
    let fine = fine_solver.voltages(&vec![1.0; refined_elements], &patterns)?;
    let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let refinement = diff / dot(&fine, &fine).sqrt();

    let reciprocity = worst_asym / scale;
    let pass = reciprocity <= s.reciprocity_tol
        && kirchhoff <= s.kirchhoff_tol
        && current_sum <= s.kirchhoff_tol
        && refinement <= s.refinement_tol;
    Ok(CemValidationReport {
        settings: s.clone(),
        reciprocity,
        kirchhoff,
        current_sum,
        refinement,
        elements,
        refined_elements,
        pass,
    })
}
