use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AmplitudeScaling, GridField, GridGeometry, WmHyper, WmTransform, ZETA_R_NU3};
use crate::ensemble::{Ensemble, Particle};
use crate::error::{EkiError, Result};
use crate::param::{check_interval, Parameterisation};

/// Uniform hyperprior on (λ, L₁, L₂).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P1Prior {
    pub lambda: [f64; 2],
    pub l1: [f64; 2],
    pub l2: [f64; 2],
}

impl Default for P1Prior {
    fn default() -> Self {
        P1Prior {
            lambda: [5e-3, 1.0],
            l1: [0.15, 0.6],
            l2: [0.15, 0.6],
        }
    }
}

/// κ = λ exp(W_Θ ω) with particles laid out as (λ, L₁, L₂, ω).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P1Param {
    pub grid: GridGeometry,
    pub nu: f64,
    pub sigma: f64,
    pub zeta_r: f64,
    pub amplitude: AmplitudeScaling,
    pub prior: P1Prior,
}

impl P1Param {
    pub const SCALARS: usize = 3;

    pub fn new(grid: GridGeometry) -> Self {
        P1Param {
            grid,
            nu: 3.0,
            sigma: 1.5,
            zeta_r: ZETA_R_NU3,
            amplitude: AmplitudeScaling::default(),
            prior: P1Prior::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_interval("lambda", self.prior.lambda)?;
        check_interval("l1", self.prior.l1)?;
        check_interval("l2", self.prior.l2)?;
        if self.prior.lambda[0] <= 0.0 || self.prior.l1[0] <= 0.0 || self.prior.l2[0] <= 0.0 {
            return Err(EkiError::InvalidParameter("P1 prior supports must be positive".into()));
        }
        self.hyper(1.0, 1.0, 1.0).validate()
    }

    pub fn hyper(&self, lambda: f64, l1: f64, l2: f64) -> WmHyper {
        WmHyper {
            lambda,
            nu: self.nu,
            sigma: self.sigma,
            l1,
            l2,
            zeta_r: self.zeta_r,
        }
    }

    /// The log-field W_Θ ω after clamping the scalars.
    pub fn log_field(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        if u.len() != self.dim() {
            return Err(EkiError::DimensionMismatch(format!(
                "P1 particle has length {}, expected {}",
                u.len(),
                self.dim()
            )));
        }
        let mut s = [u[0], u[1], u[2]];
        clamp_scalars(&self.prior, &mut s);
        let t = WmTransform::new(&self.hyper(s[0], s[1], s[2]), &self.grid, self.amplitude)?;
        Ok((s[0], t.apply(&u[Self::SCALARS..])?))
    }
}

fn clamp_scalars(p: &P1Prior, s: &mut [f64]) {
    s[0] = s[0].clamp(p.lambda[0], p.lambda[1]);
    s[1] = s[1].clamp(p.l1[0], p.l1[1]);
    s[2] = s[2].clamp(p.l2[0], p.l2[1]);
}

impl Parameterisation for P1Param {
    fn dim(&self) -> usize {
        Self::SCALARS + self.grid.len()
    }

    fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    fn scalar_names(&self) -> &'static [&'static str] {
        &["lambda", "l1", "l2"]
    }

    fn conductivity(&self, u: &[f64]) -> Result<GridField> {
        let (lambda, psi) = self.log_field(u)?;
        let kappa: Vec<f64> = psi.iter().map(|p| lambda * p.exp()).collect();
        if kappa.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return Err(EkiError::Forward("conductivity overflowed or underflowed".into()));
        }
        GridField::new(self.grid, kappa)
    }

    fn clamp(&self, u: &mut [f64]) {
        clamp_scalars(&self.prior, &mut u[..Self::SCALARS]);
    }

    fn sample_prior(&self, j: usize, rng: &mut dyn RngCore) -> Result<Ensemble> {
        sample_p1_prior(self, j, rng)
    }
}

/// Draws λ, L₁, L₂ uniformly and ω as i.i.d. standard normals per cell.
pub fn sample_p1_prior(p: &P1Param, j: usize, rng: &mut dyn RngCore) -> Result<Ensemble> {
    p.validate()?;
    let mut particles = Vec::with_capacity(j);
    for _ in 0..j {
        let mut u = Vec::with_capacity(p.dim());
        u.push(rng.gen_range(p.prior.lambda[0]..=p.prior.lambda[1]));
        u.push(rng.gen_range(p.prior.l1[0]..=p.prior.l1[1]));
        u.push(rng.gen_range(p.prior.l2[0]..=p.prior.l2[1]));
        u.extend((0..p.grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        particles.push(Particle::new(u)?);
    }
    Ensemble::new(particles)
}
