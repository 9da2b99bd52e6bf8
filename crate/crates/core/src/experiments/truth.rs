//! Synthetic ground-truth conductivities, evaluated analytically.

use super::config::{Ellipse, PhaseTruth, SmoothTruth};
use crate::eit::DiscMesh;
use crate::error::{EkiError, Result};

impl SmoothTruth {
    pub fn log_value(&self, x: f64, y: f64) -> f64 {
        self.base
            + self
                .bumps
                .iter()
                .map(|&[cx, cy, sx, sy, amp]| {
                    let dx = (x - cx) / sx;
                    let dy = (y - cy) / sy;
                    amp * (-0.5 * (dx * dx + dy * dy)).exp()
                })
                .sum::<f64>()
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.log_value(x, y).exp()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bumps.iter().any(|b| !(b[2] > 0.0 && b[3] > 0.0)) || !self.base.is_finite() {
            return Err(EkiError::Config("truth bumps need positive widths".into()));
        }
        Ok(())
    }
}

fn inside(e: &Ellipse, x: f64, y: f64) -> bool {
    let dx = (x - e[0]) / e[2];
    let dy = (y - e[1]) / e[3];
    dx * dx + dy * dy <= 1.0
}

impl PhaseTruth {
    /// High inclusions take precedence where they overlap low ones.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        if self.high.iter().any(|e| inside(e, x, y)) {
            self.kappa_h
        } else if self.low.iter().any(|e| inside(e, x, y)) {
            self.kappa_l
        } else {
            self.kappa_b
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_l > 0.0 && self.kappa_b > 0.0 && self.kappa_h > 0.0) {
            return Err(EkiError::Config("phase values must be positive".into()));
        }
        if self.low.iter().chain(&self.high).any(|e| !(e[2] > 0.0 && e[3] > 0.0)) {
            return Err(EkiError::Config("ellipse semi-axes must be positive".into()));
        }
        Ok(())
    }
}

/// Samples `f` at every element centroid.
pub fn on_elements(mesh: &DiscMesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..mesh.n_triangles())
        .map(|t| {
            let c = mesh.centroid(t);
            f(c[0], c[1])
        })
        .collect()
}
