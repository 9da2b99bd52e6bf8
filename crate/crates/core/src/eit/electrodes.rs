use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{EkiError, Result};

/// Electrode arcs on the unit circle, as (start, end) angles with
/// end > start, and their contact impedances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub arcs: Vec<[f64; 2]>,
    pub impedances: Vec<f64>,
    pub coverage: f64,
}

impl ElectrodeLayout {
    /// `count` equal electrodes, electrode k centred at angle 2πk/count and
    /// covering the fraction `coverage` of its sector.
    pub fn equispaced(count: usize, coverage: f64, impedance: f64) -> Result<Self> {
        if !(coverage > 0.0 && coverage < 1.0) {
            return Err(EkiError::InvalidParameter(format!("electrode coverage must lie in (0, 1), got {coverage}")));
        }
        let sector = 2.0 * PI / count.max(1) as f64;
        let half = 0.5 * coverage * sector;
        let layout = ElectrodeLayout {
            arcs: (0..count)
                .map(|k| {
                    let c = k as f64 * sector;
                    [c - half, c + half]
                })
                .collect(),
            impedances: vec![impedance; count],
            coverage,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn count(&self) -> usize {
        self.arcs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.arcs.len();
        if m < 2 {
            return Err(EkiError::InvalidParameter("need at least two electrodes".into()));
        }
        if self.impedances.len() != m {
            return Err(EkiError::DimensionMismatch(format!("{m} electrodes but {} impedances", self.impedances.len())));
        }
        if self.impedances.iter().any(|z| !(*z > 0.0) || !z.is_finite()) {
            return Err(EkiError::InvalidParameter("contact impedances must be positive".into()));
        }
        let mut arcs: Vec<[f64; 2]> = self
            .arcs
            .iter()
            .map(|a| {
                let s = a[0].rem_euclid(2.0 * PI);
                [s, s + (a[1] - a[0])]
            })
            .collect();
        if arcs.iter().any(|a| !(a[1] > a[0])) {
            return Err(EkiError::InvalidParameter("electrode arcs must have positive length".into()));
        }
        arcs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for k in 0..m {
            let next = if k + 1 < m { arcs[k + 1][0] } else { arcs[0][0] + 2.0 * PI };
            if arcs[k][1] >= next {
                return Err(EkiError::InvalidParameter("electrode arcs overlap".into()));
            }
        }
        Ok(())
    }
}

/// Injected current vectors, one per pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPatterns {
    patterns: Vec<Vec<f64>>,
}

impl CurrentPatterns {
    pub fn new(patterns: Vec<Vec<f64>>) -> Result<Self> {
        let m = patterns.first().map(|p| p.len()).unwrap_or(0);
        if m < 2 {
            return Err(EkiError::InvalidParameter("current patterns need at least two electrodes".into()));
        }
        for (i, p) in patterns.iter().enumerate() {
            if p.len() != m {
                return Err(EkiError::DimensionMismatch(format!("pattern {i} has length {}", p.len())));
            }
            let scale: f64 = p.iter().map(|v| v.abs()).sum();
            if p.iter().sum::<f64>().abs() > 1e-12 * scale.max(1.0) {
                return Err(EkiError::InvalidParameter(format!("pattern {i} does not sum to zero")));
            }
        }
        Ok(CurrentPatterns { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn electrodes(&self) -> usize {
        self.patterns[0].len()
    }

    pub fn pattern(&self, i: usize) -> &[f64] {
        &self.patterns[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.patterns.iter().map(|p| p.as_slice())
    }

    pub fn scaled(&self, c: f64) -> Self {
        CurrentPatterns {
            patterns: self.patterns.iter().map(|p| p.iter().map(|v| c * v).collect()).collect(),
        }
    }
}

/// Pattern k drives +`amplitude` into electrode k and draws it out of
/// electrode k+1 (mod count).
pub fn adjacent_patterns(count: usize, amplitude: f64) -> Result<CurrentPatterns> {
    CurrentPatterns::new(
        (0..count)
            .map(|k| {
                let mut p = vec![0.0; count];
                p[k] += amplitude;
                p[(k + 1) % count] -= amplitude;
                p
            })
            .collect(),
    )
}
