//! Regularisation controllers: the data misfit controller (DMC), the
//! Levenberg–Marquardt discrepancy rule, and the constant ES-MDA schedule.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ensemble::{regularised_factor, EvaluationBatch, Observation};
use crate::error::{EkiError, Result};

/// Per-particle least-squares misfits Φ(u⁽ʲ⁾; y) = ½‖Γ^{-1/2}(y − G(u⁽ʲ⁾))‖²
/// with their empirical mean and unbiased variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisfitStats {
    pub phis: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl MisfitStats {
    /// Mean and variance by Welford's recurrence.
    pub fn from_phis(phis: Vec<f64>) -> Result<Self> {
        if phis.len() < 2 {
            return Err(EkiError::InvalidEnsemble("misfit statistics need J >= 2".into()));
        }
        if phis.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(EkiError::InvalidParameter("misfits must be finite and nonnegative".into()));
        }
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, &p) in phis.iter().enumerate() {
            let delta = p - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (p - mean);
        }
        let variance = (m2 / (phis.len() - 1) as f64).max(0.0);
        Ok(MisfitStats {
            phis,
            mean,
            variance,
        })
    }
}

pub fn compute_misfits(ev: &EvaluationBatch, obs: &Observation) -> Result<MisfitStats> {
    if ev.output_dim() != obs.len() {
        return Err(EkiError::DimensionMismatch(format!(
            "forward output has length {} but y has length {}",
            ev.output_dim(),
            obs.len()
        )));
    }
    let phis = ev.rows().iter().map(|g| 0.5 * obs.whitened_sq(g)).collect();
    MisfitStats::from_phis(phis)
}

/// Tempering clock t_n = Σ α_k⁻¹.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemperingState {
    t: f64,
    alpha_inv_history: Vec<f64>,
    finished: bool,
}

impl TemperingState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn history(&self) -> &[f64] {
        &self.alpha_inv_history
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Advances by `alpha_inv`, capping at the remaining budget. Returns the
    /// increment actually taken and whether the clock reached 1.
    pub fn advance(&mut self, alpha_inv: f64) -> Result<(f64, bool)> {
        if self.finished {
            return Err(EkiError::InvalidParameter("tempering schedule already finished".into()));
        }
        if !(alpha_inv > 0.0) {
            return Err(EkiError::InvalidParameter(format!(
                "tempering increment must be positive, got {alpha_inv}"
            )));
        }
        let remaining = 1.0 - self.t;
        if alpha_inv >= remaining {
            let step = closing_increment(self.t);
            self.t += step;
            debug_assert_eq!(self.t, 1.0);
            self.alpha_inv_history.push(step);
            self.finished = true;
            Ok((step, true))
        } else {
            self.t += alpha_inv;
            self.alpha_inv_history.push(alpha_inv);
            Ok((alpha_inv, false))
        }
    }
}

/// The positive increment `a` closest to 1 − t with `t + a == 1.0` exactly in
/// floating point.
fn closing_increment(t: f64) -> f64 {
    let mut a = 1.0 - t;
    // fl(1 − t) can be off by an ulp for t < 1/2; walk towards the exact sum.
    for _ in 0..8 {
        let s = t + a;
        if s == 1.0 {
            return a;
        }
        a = if s > 1.0 { next_down(a) } else { next_up(a) };
    }
    a
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Uncapped DMC proposal max{M/(2Φ̄), √(M/(2σ²_Φ))}; +∞ for an exact fit.
pub fn dmc_proposal(stats: &MisfitStats, m: usize) -> f64 {
    let m = m as f64;
    let mean_term = if stats.mean > 0.0 { m / (2.0 * stats.mean) } else { f64::INFINITY };
    let var_term = if stats.variance > 0.0 {
        (m / (2.0 * stats.variance)).sqrt()
    } else {
        f64::INFINITY
    };
    mean_term.max(var_term)
}

/// Data misfit controller:
/// α⁻¹ = min{ max{ M/(2Φ̄), √(M/(2σ²_Φ)) }, 1 − t }.
///
/// Advances `state` and reports whether this step closes the schedule.
pub fn dmc_step(stats: &MisfitStats, m: usize, state: &mut TemperingState) -> Result<(f64, bool)> {
    if m == 0 {
        return Err(EkiError::InvalidParameter("M must be at least 1".into()));
    }
    state.advance(dmc_proposal(stats, m))
}

/// Tuning of the LM-type α selection and discrepancy stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub rho: f64,
    pub tau: f64,
    pub alpha0: f64,
    pub growth: f64,
    pub max_doublings: usize,
}

impl LmConfig {
    /// ρ with the default τ = 1/ρ + 10⁻⁶ and geometric search α₀ = 1, ×2, 60 trials.
    pub fn with_rho(rho: f64) -> Result<Self> {
        Self::new(rho, 1.0 / rho + 1e-6, 1.0, 2.0, 60)
    }

    pub fn new(rho: f64, tau: f64, alpha0: f64, growth: f64, max_doublings: usize) -> Result<Self> {
        let cfg = LmConfig {
            rho,
            tau,
            alpha0,
            growth,
            max_doublings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(EkiError::InvalidParameter(format!("rho must lie in (0,1), got {}", self.rho)));
        }
        if !(self.tau > 1.0 / self.rho) {
            return Err(EkiError::InvalidParameter(format!(
                "tau must exceed 1/rho = {}, got {}",
                1.0 / self.rho,
                self.tau
            )));
        }
        if !(self.alpha0 > 0.0) || !(self.growth > 1.0) {
            return Err(EkiError::InvalidParameter(
                "alpha0 must be positive and growth must exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// First α = α₀·growthⁱ with
/// ρ‖Γ^{-1/2}(y − Ḡ)‖ ≤ α‖Γ^{1/2}(C^{GG} + αΓ)⁻¹(y − Ḡ)‖.
pub fn lm_alpha(
    ev_mean: &[f64],
    obs: &Observation,
    cgg: &DMatrix<f64>,
    cfg: &LmConfig,
) -> Result<f64> {
    cfg.validate()?;
    let m = obs.len();
    if ev_mean.len() != m || cgg.nrows() != m || cgg.ncols() != m {
        return Err(EkiError::DimensionMismatch("LM inputs do not match M".into()));
    }
    let r = nalgebra::DVector::from_iterator(m, obs.y().iter().zip(ev_mean).map(|(y, g)| y - g));
    let lhs = cfg.rho * obs.whitened_norm(ev_mean);
    let mut alpha = cfg.alpha0;
    for _ in 0..=cfg.max_doublings {
        let chol = regularised_factor(cgg, obs, alpha)?;
        let x = chol.solve(&r);
        let rhs = alpha
            * x.iter()
                .zip(obs.gamma_diag())
                .map(|(xi, g)| xi * xi * g)
                .sum::<f64>()
                .sqrt();
        if lhs <= rhs {
            return Ok(alpha);
        }
        alpha *= cfg.growth;
    }
    Err(EkiError::AlphaSearchExhausted {
        trials: cfg.max_doublings + 1,
        last_alpha: alpha / cfg.growth,
    })
}

/// Discrepancy stop: ‖Γ^{-1/2}(y − Ḡ)‖ ≤ τδ.
pub fn lm_stop(dm1: f64, cfg: &LmConfig, delta: f64) -> bool {
    dm1 <= cfg.tau * delta
}

/// Constant ES-MDA inflation α = n_total.
pub fn esmda_alpha(n_total: usize) -> Result<f64> {
    if n_total == 0 {
        return Err(EkiError::InvalidParameter("ES-MDA needs at least one step".into()));
    }
    Ok(n_total as f64)
}

/// One line of the per-iteration schedule log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub n: usize,
    pub alpha_inv: f64,
    pub t: f64,
    pub phi_mean: f64,
    pub phi_var: f64,
    pub dm1: f64,
    pub dm2: f64,
    pub dm3: f64,
}

pub const SCHEDULE_CSV_HEADER: &str = "n,alpha_inv,t,phi_mean,phi_var,dm1,dm2,dm3";

pub fn write_schedule_csv<W: Write>(records: &[ScheduleRecord], mut w: W) -> Result<()> {
    writeln!(w, "{SCHEDULE_CSV_HEADER}")?;
    for r in records {
        write_schedule_row(r, &mut w)?;
    }
    Ok(())
}

/// One CSV row without the header, for logs written as the run proceeds.
pub fn write_schedule_row<W: Write>(r: &ScheduleRecord, mut w: W) -> Result<()> {
    // {:?} prints the shortest representation that round-trips exactly.
    writeln!(
        w,
        "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
        r.n, r.alpha_inv, r.t, r.phi_mean, r.phi_var, r.dm1, r.dm2, r.dm3
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: f64, variance: f64) -> MisfitStats {
        MisfitStats {
            phis: vec![mean, mean],
            mean,
            variance,
        }
    }

    #[test]
    fn perfect_fit_has_zero_misfit() {
        let obs = Observation::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let ev = EvaluationBatch::new(vec![vec![1.0, 2.0]; 3]).unwrap();
        let s = compute_misfits(&ev, &obs).unwrap();
        assert_eq!(s.phis, vec![0.0; 3]);
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.variance, 0.0);
    }

    #[test]
    fn scalar_misfits_by_hand() {
        let obs = Observation::new(vec![2.0], vec![4.0]).unwrap();
        let ev = EvaluationBatch::new(vec![vec![0.0], vec![4.0]]).unwrap();
        let s = compute_misfits(&ev, &obs).unwrap();
        assert_eq!(s.phis, vec![0.5, 0.5]);
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!(s.variance.abs() < 1e-15);
    }

    #[test]
    fn welford_matches_two_pass() {
        let phis: Vec<f64> = (0..37).map(|k| ((k * 7919) % 101) as f64 * 0.37 + 1e3).collect();
        let s = MisfitStats::from_phis(phis.clone()).unwrap();
        let n = phis.len() as f64;
        let mean = phis.iter().sum::<f64>() / n;
        let var = phis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((s.mean - mean).abs() <= 1e-12 * mean);
        assert!((s.variance - var).abs() <= 1e-12 * var);
    }

    #[test]
    fn dmc_takes_variance_branch() {
        let mut st = TemperingState::new();
        let (a, fin) = dmc_step(&stats(12800.0, 1e5), 256, &mut st).unwrap();
        assert!((a - (128.0f64 / 1e5).sqrt()).abs() < 1e-12);
        assert!((a - 0.035777).abs() < 1e-6);
        assert!(!fin);
        assert_eq!(st.t(), a);

        // With σ² = 1e8 the variance term is only 1.13e-3 and the mean term wins.
        let mut st = TemperingState::new();
        let (a, _) = dmc_step(&stats(12800.0, 1e8), 256, &mut st).unwrap();
        assert_eq!(a, 0.01);
    }

    #[test]
    fn dmc_single_step_at_discrepancy_level() {
        let mut st = TemperingState::new();
        let (a, fin) = dmc_step(&stats(128.0, 3.0), 256, &mut st).unwrap();
        assert_eq!(a, 1.0);
        assert!(fin);
        assert!(st.finished());
    }

    #[test]
    fn dmc_cap_terminates() {
        let mut st = TemperingState::new();
        st.advance(0.95).unwrap();
        // M/(2Φ̄) = 0.5 and √(M/(2σ²)) = 0.2 with M = 2.
        let s = stats(2.0, 25.0);
        assert!((dmc_proposal(&s, 2) - 0.5).abs() < 1e-15);
        let (a, fin) = dmc_step(&s, 2, &mut st).unwrap();
        assert!(fin);
        assert!((a - 0.05).abs() < 1e-12);
        assert_eq!(st.t(), 1.0);
        assert!(dmc_step(&s, 2, &mut st).is_err());
    }

    #[test]
    fn dmc_exact_fit_closes_schedule() {
        let mut st = TemperingState::new();
        st.advance(0.3).unwrap();
        let (a, fin) = dmc_step(&stats(0.0, 0.0), 10, &mut st).unwrap();
        assert!(fin);
        assert_eq!(0.3 + a, 1.0);
    }

    #[test]
    fn lm_zero_covariance_accepts_alpha0() {
        let obs = Observation::new(vec![3.0], vec![1.0]).unwrap();
        let cgg = DMatrix::zeros(1, 1);
        let cfg = LmConfig::with_rho(0.9).unwrap();
        assert_eq!(lm_alpha(&[1.0], &obs, &cgg, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn lm_scalar_threshold() {
        // ρ ≤ αγ/(c + αγ)  ⟺  α ≥ ρc/(γ(1 − ρ)).
        for &(c, gamma, rho) in &[(5.0, 0.5, 0.7), (100.0, 2.0, 0.8), (0.3, 1.0, 0.5), (1e4, 1e-2, 0.6)] {
            let obs = Observation::new(vec![1.0], vec![gamma]).unwrap();
            let cgg = DMatrix::from_element(1, 1, c);
            let cfg = LmConfig::with_rho(rho).unwrap();
            let alpha = lm_alpha(&[0.0], &obs, &cgg, &cfg).unwrap();
            let threshold = rho * c / (gamma * (1.0 - rho));
            let mut expected = 1.0;
            while expected < threshold {
                expected *= 2.0;
            }
            assert_eq!(alpha, expected, "c={c} gamma={gamma} rho={rho}");
        }
    }

    #[test]
    fn lm_search_exhaustion_is_reported() {
        let obs = Observation::new(vec![1.0], vec![1.0]).unwrap();
        let cgg = DMatrix::from_element(1, 1, 1e30);
        let cfg = LmConfig::new(0.9, 2.0, 1.0, 2.0, 5).unwrap();
        assert!(matches!(
            lm_alpha(&[0.0], &obs, &cgg, &cfg),
            Err(EkiError::AlphaSearchExhausted { trials: 6, .. })
        ));
    }

    #[test]
    fn lm_config_requires_tau_above_inverse_rho() {
        assert!(LmConfig::new(0.5, 2.0, 1.0, 2.0, 10).is_err());
        assert!(LmConfig::new(0.5, 2.1, 1.0, 2.0, 10).is_ok());
        assert!(LmConfig::new(1.2, 5.0, 1.0, 2.0, 10).is_err());
        let cfg = LmConfig::with_rho(0.6).unwrap();
        assert!((cfg.tau - (1.0 / 0.6 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn lm_stop_threshold() {
        let cfg = LmConfig::new(0.6, 1.67, 1.0, 2.0, 60).unwrap();
        assert!(lm_stop(15.0, &cfg, 16.0));
        assert!(!lm_stop(40.0, &cfg, 16.0));
    }

    #[test]
    fn esmda_schedule_sums_to_one() {
        assert_eq!(esmda_alpha(4).unwrap(), 4.0);
        assert_eq!(esmda_alpha(1).unwrap(), 1.0);
        assert!(esmda_alpha(0).is_err());
        let total: f64 = (0..4).map(|_| 1.0 / esmda_alpha(4).unwrap()).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn schedule_csv_layout() {
        let rec = ScheduleRecord {
            n: 0,
            alpha_inv: 0.25,
            t: 0.25,
            phi_mean: 1.0,
            phi_var: 2.0,
            dm1: 3.0,
            dm2: 4.0,
            dm3: 5.0,
        };
        let mut buf = Vec::new();
        write_schedule_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SCHEDULE_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0.25,0.25,1.0,2.0,3.0,4.0,5.0");
    }

    proptest! {
        #[test]
        fn dmc_schedule_closes_exactly(
            seq in prop::collection::vec((1e-6f64..1e6, 0.0f64..1e9), 1..60),
            m in 1usize..400,
        ) {
            let mut st = TemperingState::new();
            let mut prev_t = 0.0;
            for &(mean, var) in seq.iter().cycle().take(100_000) {
                let s = stats(mean, var);
                let (a, fin) = dmc_step(&s, m, &mut st).unwrap();
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert!(st.t() >= prev_t);
                prev_t = st.t();
                // At least one statistical discrepancy condition holds.
                let accuracy = 2.0 * a * mean <= m as f64 * (1.0 + 1e-12);
                let uncertainty = 4.0 * a * a * var <= 2.0 * m as f64 * (1.0 + 1e-12);
                prop_assert!(accuracy || uncertainty);
                if fin {
                    break;
                }
            }
            prop_assert!(st.finished());
            let mut sum = 0.0;
            for a in st.history() {
                sum += a;
            }
            prop_assert_eq!(sum, 1.0);
        }

        #[test]
        fn closing_increment_is_exact(t in 0.0f64..1.0) {
            let a = closing_increment(t);
            prop_assert_eq!(t + a, 1.0);
            prop_assert!((a - (1.0 - t)).abs() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn lm_alpha_monotone_in_rho(
            c in 1e-3f64..1e4, gamma in 1e-2f64..10.0, r in -5.0f64..5.0,
            rho_lo in 0.05f64..0.9, bump in 0.0f64..0.09,
        ) {
            let obs = Observation::new(vec![r, 0.5 * r], vec![gamma, 2.0 * gamma]).unwrap();
            let cgg = DMatrix::from_row_slice(2, 2, &[c, 0.3 * c, 0.3 * c, c]);
            let lo = lm_alpha(&[0.0, 0.0], &obs, &cgg, &LmConfig::with_rho(rho_lo).unwrap()).unwrap();
            let hi = lm_alpha(&[0.0, 0.0], &obs, &cgg, &LmConfig::with_rho(rho_lo + bump).unwrap()).unwrap();
            prop_assert!(hi >= lo);
        }
    }
}
