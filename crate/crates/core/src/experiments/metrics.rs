use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::NoiseConfig;
use crate::ensemble::{ensemble_mean, Ensemble, EvaluationBatch, Observation};
use crate::error::{EkiError, Result};
use crate::fields::GridField;
use crate::param::Parameterisation;

/// γ_m = (rel·|V_m|)² + (floor·(max V − min V))².
pub fn noise_variances(clean: &[f64], noise: &NoiseConfig) -> Vec<f64> {
    let hi = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = clean.iter().cloned().fold(f64::INFINITY, f64::min);
    let fl = (noise.floor * (hi - lo).abs()).powi(2);
    clean.iter().map(|v| (noise.relative * v.abs()).powi(2) + fl).collect()
}

/// y = V† + η with η ~ N(0, Γ). With both noise factors zero, y = V† and
/// Γ is set to the identity so the observation stays well defined.
pub fn generate_data<R: Rng + ?Sized>(clean: &[f64], noise: &NoiseConfig, rng: &mut R) -> Result<Observation> {
    let gamma = noise_variances(clean, noise);
    if gamma.iter().all(|g| *g == 0.0) {
        return Observation::new(clean.to_vec(), vec![1.0; clean.len()]);
    }
    if gamma.iter().any(|g| *g <= 0.0) {
        return Err(EkiError::InvalidParameter(
            "noise variance vanishes for some measurements; use a positive floor".into(),
        ));
    }
    let y = clean
        .iter()
        .zip(&gamma)
        .map(|(v, g)| v + g.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Observation::new(y, gamma)
}

/// ‖a − b‖ / ‖b‖ in the area-weighted discrete L² norm.
pub fn relative_l2_error(a: &[f64], b: &[f64], areas: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != areas.len() {
        return Err(EkiError::DimensionMismatch("error norm inputs differ in length".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(areas) {
        num += w * (x - y) * (x - y);
        den += w * y * y;
    }
    if den == 0.0 {
        return Err(EkiError::InvalidParameter("reference field has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// κ_n = P(ū_n), plus the level-set field for thresholded parameterisations.
pub fn estimate(e: &Ensemble, param: &dyn Parameterisation) -> Result<(GridField, Option<GridField>)> {
    let mean = ensemble_mean(e);
    Ok((param.conductivity(mean.as_slice())?, param.level_set(mean.as_slice())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataMisfits {
    pub dm1: f64,
    pub dm2: f64,
    pub dm3: f64,
}

/// DM₁ = ‖Γ^{-1/2}(y − mean G)‖, DM₂ = ‖Γ^{-1/2}(y − G(ū))‖, and DM₃ the
/// root mean square of the per-particle norms.
pub fn data_misfits(batch: &EvaluationBatch, g_of_mean: &[f64], obs: &Observation) -> DataMisfits {
    let dm3 = (batch.rows().iter().map(|g| obs.whitened_sq(g)).sum::<f64>() / batch.size() as f64).sqrt();
    DataMisfits {
        dm1: obs.whitened_norm(batch.mean()),
        dm2: obs.whitened_norm(g_of_mean),
        dm3,
    }
}
