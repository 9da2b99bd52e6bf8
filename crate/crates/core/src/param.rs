use rand::RngCore;

use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::fields::{GridField, GridGeometry};

/// Map from a flat particle to a conductivity field on a grid.
pub trait Parameterisation: Send + Sync {
    /// Total length of a particle.
    fn dim(&self) -> usize;

    fn grid(&self) -> &GridGeometry;

    /// Names of the leading scalar coordinates; the grid values follow them.
    fn scalar_names(&self) -> &'static [&'static str];

    fn conductivity(&self, u: &[f64]) -> Result<GridField>;

    /// Projects the scalar coordinates back onto the prior support.
    fn clamp(&self, u: &mut [f64]);

    fn sample_prior(&self, j: usize, rng: &mut dyn RngCore) -> Result<Ensemble>;

    /// The underlying smooth field, for parameterisations that threshold one.
    fn level_set(&self, _u: &[f64]) -> Result<Option<GridField>> {
        Ok(None)
    }
}

/// Uniform prior interval.
pub(crate) fn check_interval(name: &str, iv: [f64; 2]) -> Result<()> {
    if !(iv[0] < iv[1]) || !iv[0].is_finite() || !iv[1].is_finite() {
        return Err(crate::error::EkiError::InvalidParameter(format!(
            "prior interval for {name} is empty: [{}, {}]",
            iv[0], iv[1]
        )));
    }
    Ok(())
}
