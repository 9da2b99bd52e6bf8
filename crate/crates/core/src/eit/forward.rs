use std::io::{BufRead, BufReader, Read, Write};

use super::{CemSolver, CurrentPatterns};
use crate::error::{EkiError, Result};
use crate::fields::{GridField, GridGeometry};
use crate::param::Parameterisation;

/// Conductivity floor applied at element centroids.
pub const KAPPA_FLOOR: f64 = 1e-6;

/// Parameter-to-measurement map: grid conductivity → element conductivity
/// → electrode voltages for every pattern.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    solver: CemSolver,
    patterns: CurrentPatterns,
    grid: GridGeometry,
    stencils: Vec<[(usize, f64); 4]>,
}

impl ForwardModel {
    pub fn new(solver: CemSolver, patterns: CurrentPatterns, grid: GridGeometry) -> Result<Self> {
        if patterns.electrodes() != solver.layout().count() {
            return Err(EkiError::DimensionMismatch("patterns and electrode layout disagree".into()));
        }
        let mesh = solver.mesh();
        let stencils = (0..mesh.n_triangles())
            .map(|t| {
                let c = mesh.centroid(t);
                grid.bilinear_stencil(c[0], c[1])
            })
            .collect();
        Ok(ForwardModel {
            solver,
            patterns,
            grid,
            stencils,
        })
    }

    pub fn solver(&self) -> &CemSolver {
        &self.solver
    }

    pub fn patterns(&self) -> &CurrentPatterns {
        &self.patterns
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    pub fn output_dim(&self) -> usize {
        self.patterns.len() * self.solver.layout().count()
    }

    /// Bilinear samples of the grid field at element centroids, floored.
    pub fn element_conductivity(&self, kappa: &GridField) -> Result<Vec<f64>> {
        if kappa.geometry() != &self.grid {
            return Err(EkiError::DimensionMismatch("conductivity grid differs from the forward grid".into()));
        }
        let v = kappa.values();
        Ok(self
            .stencils
            .iter()
            .map(|s| s.iter().map(|(k, w)| w * v[*k]).sum::<f64>().max(KAPPA_FLOOR))
            .collect())
    }

    pub fn from_grid(&self, kappa: &GridField) -> Result<Vec<f64>> {
        let elem = self.element_conductivity(kappa)?;
        self.from_elements(&elem)
    }

    pub fn from_elements(&self, kappa: &[f64]) -> Result<Vec<f64>> {
        self.solver.voltages(kappa, &self.patterns)
    }

    /// G(u) = F(P(u)).
    pub fn evaluate(&self, param: &dyn Parameterisation, u: &[f64]) -> Result<Vec<f64>> {
        self.from_grid(&param.conductivity(u)?)
    }
}

/// `pattern,electrode,value` rows for a pattern-major measurement vector.
pub fn write_measurements_csv<W: Write>(values: &[f64], electrodes: usize, mut w: W) -> Result<()> {
    if electrodes == 0 || values.len() % electrodes != 0 {
        return Err(EkiError::DimensionMismatch(format!(
            "{} values do not split into {electrodes} electrodes",
            values.len()
        )));
    }
    writeln!(w, "pattern,electrode,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{},{},{:e}", i / electrodes, i % electrodes, v)?;
    }
    Ok(())
}

pub fn read_measurements_csv<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let v = line
            .rsplit(',')
            .next()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| EkiError::Format(format!("bad measurement line {}: {line}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}
