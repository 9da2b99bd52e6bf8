//! Three-phase piecewise-constant conductivity from a thresholded
//! Whittle–Matérn level-set function.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, Particle};
use crate::error::{EkiError, Result};
use crate::fields::{AmplitudeScaling, GridField, GridGeometry, WmHyper, WmTransform, ZETA_R_NU2};
use crate::param::{check_interval, Parameterisation};

/// Phase values and thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSetParams {
    pub kappa_l: f64,
    pub kappa_b: f64,
    pub kappa_h: f64,
    pub zeta1: f64,
    pub zeta2: f64,
}

impl LevelSetParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta1 < self.zeta2) {
            return Err(EkiError::InvalidParameter(format!(
                "thresholds must satisfy zeta1 < zeta2, got {} and {}",
                self.zeta1, self.zeta2
            )));
        }
        if !(self.kappa_l > 0.0 && self.kappa_b > 0.0 && self.kappa_h > 0.0) {
            return Err(EkiError::InvalidParameter("phase conductivities must be positive".into()));
        }
        Ok(())
    }

    pub fn phase_value(&self, f: f64) -> f64 {
        if f <= self.zeta1 {
            self.kappa_l
        } else if f <= self.zeta2 {
            self.kappa_b
        } else {
            self.kappa_h
        }
    }
}

/// f = log λ_f + W_Θ ω_f.
pub fn level_set_function(omega: &GridField, wm: &WmHyper, scaling: AmplitudeScaling) -> Result<GridField> {
    let t = WmTransform::new(wm, omega.geometry(), scaling)?;
    let shift = wm.lambda.ln();
    let f = t.apply(omega.values())?.into_iter().map(|v| v + shift).collect();
    GridField::new(*omega.geometry(), f)
}

/// Pointwise thresholding of f into κ_l, κ_b, κ_h.
pub fn threshold(f: &GridField, p: &LevelSetParams) -> Result<GridField> {
    p.validate()?;
    Ok(f.map(|v| p.phase_value(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P2Prior {
    pub kappa_l: [f64; 2],
    pub kappa_b: [f64; 2],
    pub kappa_h: [f64; 2],
    pub l1: [f64; 2],
    pub l2: [f64; 2],
}

impl Default for P2Prior {
    fn default() -> Self {
        P2Prior {
            kappa_l: [0.015, 0.075],
            kappa_b: [0.1, 0.4],
            kappa_h: [0.65, 1.1],
            l1: [0.15, 0.6],
            l2: [0.15, 0.6],
        }
    }
}

/// Level-set parameterisation with particles laid out as
/// (κ_l, κ_b, κ_h, L₁_f, L₂_f, ω_f).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Param {
    pub grid: GridGeometry,
    pub lambda_f: f64,
    pub nu_f: f64,
    pub sigma_f: f64,
    pub zeta_r: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub amplitude: AmplitudeScaling,
    pub prior: P2Prior,
}

impl P2Param {
    pub const SCALARS: usize = 5;

    /// Defaults: λ_f = 1, ν_f = 2, σ_f = 0.5 and thresholds ±σ_f.
    pub fn new(grid: GridGeometry) -> Self {
        let sigma_f = 0.5;
        P2Param {
            grid,
            lambda_f: 1.0,
            nu_f: 2.0,
            sigma_f,
            zeta_r: ZETA_R_NU2,
            zeta1: -sigma_f,
            zeta2: sigma_f,
            amplitude: AmplitudeScaling::default(),
            prior: P2Prior::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.prior;
        for (name, iv) in [
            ("kappa_l", p.kappa_l),
            ("kappa_b", p.kappa_b),
            ("kappa_h", p.kappa_h),
            ("l1", p.l1),
            ("l2", p.l2),
        ] {
            check_interval(name, iv)?;
            if iv[0] <= 0.0 {
                return Err(EkiError::InvalidParameter(format!("prior support of {name} must be positive")));
            }
        }
        self.wm(1.0, 1.0).validate()?;
        self.phases(&[1.0, 1.0, 1.0]).validate()
    }

    pub fn wm(&self, l1: f64, l2: f64) -> WmHyper {
        WmHyper {
            lambda: self.lambda_f,
            nu: self.nu_f,
            sigma: self.sigma_f,
            l1,
            l2,
            zeta_r: self.zeta_r,
        }
    }

    fn phases(&self, k: &[f64]) -> LevelSetParams {
        LevelSetParams {
            kappa_l: k[0],
            kappa_b: k[1],
            kappa_h: k[2],
            zeta1: self.zeta1,
            zeta2: self.zeta2,
        }
    }

    fn clamped_scalars(&self, u: &[f64]) -> Result<[f64; 5]> {
        if u.len() != self.dim() {
            return Err(EkiError::DimensionMismatch(format!(
                "P2 particle has length {}, expected {}",
                u.len(),
                self.dim()
            )));
        }
        let mut s = [u[0], u[1], u[2], u[3], u[4]];
        clamp_scalars(&self.prior, &mut s);
        Ok(s)
    }

    pub fn level_set_values(&self, u: &[f64]) -> Result<GridField> {
        let s = self.clamped_scalars(u)?;
        let omega = GridField::new(self.grid, u[Self::SCALARS..].to_vec())?;
        level_set_function(&omega, &self.wm(s[3], s[4]), self.amplitude)
    }
}

fn clamp_scalars(p: &P2Prior, s: &mut [f64]) {
    for (v, iv) in s.iter_mut().zip([p.kappa_l, p.kappa_b, p.kappa_h, p.l1, p.l2]) {
        *v = v.clamp(iv[0], iv[1]);
    }
}

impl Parameterisation for P2Param {
    fn dim(&self) -> usize {
        Self::SCALARS + self.grid.len()
    }

    fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    fn scalar_names(&self) -> &'static [&'static str] {
        &["kappa_l", "kappa_b", "kappa_h", "l1_f", "l2_f"]
    }

    fn conductivity(&self, u: &[f64]) -> Result<GridField> {
        let s = self.clamped_scalars(u)?;
        let f = self.level_set_values(u)?;
        threshold(&f, &self.phases(&s[..3]))
    }

    fn clamp(&self, u: &mut [f64]) {
        clamp_scalars(&self.prior, &mut u[..Self::SCALARS]);
    }

    fn sample_prior(&self, j: usize, rng: &mut dyn RngCore) -> Result<Ensemble> {
        sample_p2_prior(self, j, rng)
    }

    fn level_set(&self, u: &[f64]) -> Result<Option<GridField>> {
        self.level_set_values(u).map(Some)
    }
}

pub fn sample_p2_prior(p: &P2Param, j: usize, rng: &mut dyn RngCore) -> Result<Ensemble> {
    p.validate()?;
    let pr = &p.prior;
    let mut particles = Vec::with_capacity(j);
    for _ in 0..j {
        let mut u = Vec::with_capacity(p.dim());
        for iv in [pr.kappa_l, pr.kappa_b, pr.kappa_h, pr.l1, pr.l2] {
            u.push(rng.gen_range(iv[0]..=iv[1]));
        }
        u.extend((0..p.grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        particles.push(Particle::new(u)?);
    }
    Ensemble::new(particles)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params() -> LevelSetParams {
        LevelSetParams {
            kappa_l: 0.025,
            kappa_b: 0.125,
            kappa_h: 1.0,
            zeta1: -0.5,
            zeta2: 0.5,
        }
    }

    #[test]
    fn zero_noise_and_log_shift() {
        let g = GridGeometry::unit_square(8).unwrap();
        let p = P2Param::new(g);
        let omega = GridField::constant(g, 0.0);
        let f = level_set_function(&omega, &p.wm(0.3, 0.3), p.amplitude).unwrap();
        assert!(f.values().iter().all(|v| *v == 0.0));

        let w = GridField::new(g, (0..64).map(|k| (k as f64).sin()).collect()).unwrap();
        let f1 = level_set_function(&w, &p.wm(0.3, 0.4), p.amplitude).unwrap();
        let fe = level_set_function(&w, &WmHyper { lambda: std::f64::consts::E, ..p.wm(0.3, 0.4) }, p.amplitude).unwrap();
        for (a, b) in f1.values().iter().zip(fe.values()) {
            assert!((b - a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mid_band_field_is_background() {
        let g = GridGeometry::unit_square(5).unwrap();
        let k = threshold(&GridField::constant(g, 0.0), &params()).unwrap();
        assert!(k.values().iter().all(|v| *v == 0.125));
    }

    #[test]
    fn ramp_gives_three_ordered_bands() {
        let g = GridGeometry::unit_square(9).unwrap();
        let f: Vec<f64> = (0..81).map(|k| g.centre(k % 9, k / 9).0).collect();
        let k = threshold(&GridField::new(g, f).unwrap(), &params()).unwrap();
        for j in 0..9 {
            for i in 0..9 {
                let x = g.centre(i, j).0;
                let want = if x <= -0.5 {
                    0.025
                } else if x <= 0.5 {
                    0.125
                } else {
                    1.0
                };
                assert_eq!(k.get(i, j), want);
            }
        }
    }

    #[test]
    fn bad_thresholds_rejected() {
        let g = GridGeometry::unit_square(3).unwrap();
        let p = LevelSetParams { zeta1: 0.5, zeta2: 0.5, ..params() };
        assert!(threshold(&GridField::constant(g, 0.0), &p).is_err());
    }

    #[test]
    fn dimension_and_prior_supports() {
        let p = P2Param::new(GridGeometry::unit_square(100).unwrap());
        assert_eq!(p.dim(), 10_005);
        let pr = p.prior;
        assert!(pr.kappa_l[1] < pr.kappa_b[0] && pr.kappa_b[1] < pr.kappa_h[0]);
        for (t, iv) in [(0.025, pr.kappa_l), (0.125, pr.kappa_b), (1.0, pr.kappa_h)] {
            assert!(iv[0] < t && t < iv[1]);
        }
        assert_eq!((p.zeta1, p.zeta2), (-0.5, 0.5));
    }

    #[test]
    fn prior_draws_are_reproducible_and_three_valued() {
        let p = P2Param::new(GridGeometry::unit_square(16).unwrap());
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let e = sample_p2_prior(&p, 4, &mut a).unwrap();
        assert_eq!(e, sample_p2_prior(&p, 4, &mut b).unwrap());
        for q in e.particles() {
            let u = q.as_slice();
            let k = p.conductivity(u).unwrap();
            let mut distinct: Vec<f64> = k.values().to_vec();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            assert!(distinct.len() <= 3);
            assert!(distinct.iter().all(|v| u[..3].contains(v)));
        }
    }
}
