//! Tempered measures μ_t ∝ exp(−tΦ) μ₀ on small problems where everything
//! can be computed exactly: linear-Gaussian families in closed form and a
//! scalar cubic model by adaptive quadrature.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::driver::{run_eki, Controller, DriverSettings};
use crate::ensemble::{eki_update, ensemble_mean, Ensemble, EvaluationBatch, Observation, PerturbMode};
use crate::error::{EkiError, Result};
use crate::schedules::TemperingState;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(EkiError::DimensionMismatch(format!("mean has length {d}, covariance is {}x{}", cov.nrows(), cov.ncols())));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(EkiError::InvalidParameter("covariance is not symmetric".into()));
        }
        if cov.clone().cholesky().is_none() {
            return Err(EkiError::Factorisation("covariance is not positive definite".into()));
        }
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn precision(&self) -> DMatrix<f64> {
        self.cov.clone().cholesky().expect("validated at construction").inverse()
    }
}

/// Prior N(m₀, C₀), linear map G and data y with diagonal noise Γ.
#[derive(Debug, Clone)]
pub struct TemperedFamily {
    prior: GaussianMeasure,
    g: DMatrix<f64>,
    y: DVector<f64>,
    gamma: DVector<f64>,
}

impl TemperedFamily {
    pub fn new(prior: GaussianMeasure, g: DMatrix<f64>, y: DVector<f64>, gamma: DVector<f64>) -> Result<Self> {
        if g.ncols() != prior.dim() || g.nrows() != y.len() || gamma.len() != y.len() {
            return Err(EkiError::DimensionMismatch("forward matrix, data and noise disagree".into()));
        }
        if gamma.iter().any(|v| !(*v > 0.0)) {
            return Err(EkiError::InvalidParameter("noise variances must be positive".into()));
        }
        Ok(TemperedFamily { prior, g, y, gamma })
    }

    /// Prior N(m₀, c₀), G = g, Γ = γ.
    pub fn scalar(m0: f64, c0: f64, g: f64, gamma: f64, y: f64) -> Result<Self> {
        Self::new(
            GaussianMeasure::scalar(m0, c0)?,
            DMatrix::from_element(1, 1, g),
            DVector::from_element(1, y),
            DVector::from_element(1, gamma),
        )
    }

    pub fn prior(&self) -> &GaussianMeasure {
        &self.prior
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    /// Γ^{-1/2}G and Γ^{-1/2}y.
    fn whitened(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut wg = self.g.clone();
        let mut wy = self.y.clone();
        for i in 0..self.m() {
            let s = 1.0 / self.gamma[i].sqrt();
            wg.row_mut(i).scale_mut(s);
            wy[i] *= s;
        }
        (wg, wy)
    }

    pub fn observation(&self) -> Result<Observation> {
        Observation::new(self.y.iter().copied().collect(), self.gamma.iter().copied().collect())
    }

    /// ⟨Φ⟩ and ⟨Φ,Φ⟩ under a Gaussian measure. With B = Γ^{-1/2}GCGᵀΓ^{-1/2}
    /// and a = Γ^{-1/2}(y − Gm): ⟨Φ⟩ = ½(|a|² + tr B), ⟨Φ,Φ⟩ = ½tr B² + aᵀBa.
    pub fn misfit_moments(&self, mu: &GaussianMeasure) -> (f64, f64) {
        let (wg, wy) = self.whitened();
        let a = &wy - &wg * mu.mean();
        let b = &wg * mu.cov() * wg.transpose();
        let mean = 0.5 * (a.norm_squared() + b.trace());
        let var = 0.5 * (&b * &b).trace() + a.dot(&(&b * &a));
        (mean, var)
    }

    /// log N_t with N_t = ∫exp(−tΦ)dμ₀
    /// = −½ log det(I + tB₀) − ½ t a₀ᵀ(I + tB₀)⁻¹a₀.
    pub fn log_normaliser(&self, t: f64) -> f64 {
        let (wg, wy) = self.whitened();
        let a0 = &wy - &wg * self.prior.mean();
        let b0 = &wg * self.prior.cov() * wg.transpose();
        let k = DMatrix::<f64>::identity(self.m(), self.m()) + b0 * t;
        let chol = k.cholesky().expect("I + tB is positive definite for t >= 0");
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * logdet - 0.5 * t * a0.dot(&chol.solve(&a0))
    }
}

/// Closed-form μ_t: C_t = (C₀⁻¹ + tGᵀΓ⁻¹G)⁻¹, m_t = C_t(C₀⁻¹m₀ + tGᵀΓ⁻¹y).
pub fn tempered_gaussian(fam: &TemperedFamily, t: f64) -> Result<GaussianMeasure> {
    if !(0.0..=1.0).contains(&t) {
        return Err(EkiError::InvalidParameter(format!("tempering parameter must lie in [0,1], got {t}")));
    }
    update_gaussian(&fam.prior, fam, t)
}

/// Conditions `mu` on the data with likelihood weight `w`.
fn update_gaussian(mu: &GaussianMeasure, fam: &TemperedFamily, w: f64) -> Result<GaussianMeasure> {
    let (wg, wy) = fam.whitened();
    let p0 = mu.precision();
    let p = &p0 + wg.transpose() * &wg * w;
    let chol = p
        .cholesky()
        .ok_or_else(|| EkiError::Factorisation("tempered precision is singular".into()))?;
    let rhs = &p0 * mu.mean() + wg.transpose() * &wy * w;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianMeasure::new(mean, cov)
}

/// D_KL(a‖b) + D_KL(b‖a)
/// = ½tr(C_b⁻¹C_a + C_a⁻¹C_b) − d + ½Δmᵀ(C_a⁻¹ + C_b⁻¹)Δm.
pub fn jeffreys_divergence(a: &GaussianMeasure, b: &GaussianMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EkiError::DimensionMismatch(format!("measures of dimension {} and {}", a.dim(), b.dim())));
    }
    let pa = a.precision();
    let pb = b.precision();
    let dm = a.mean() - b.mean();
    let tr = (&pb * a.cov()).trace() + (&pa * b.cov()).trace();
    let quad = dm.dot(&((&pa + &pb) * &dm));
    Ok((0.5 * tr - a.dim() as f64 + 0.5 * quad).max(0.0))
}

/// Adaptive Gauss–Kronrod (7/15) quadrature. Panels are bisected until
/// each local error estimate is below its share of max(abs_tol, rel_tol·|I|).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    const XK: [f64; 8] = [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.0,
    ];
    const WK: [f64; 8] = [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ];
    const WG: [f64; 4] = [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ];
    let rule = |lo: f64, hi: f64| -> (f64, f64) {
        let c = 0.5 * (lo + hi);
        let h = 0.5 * (hi - lo);
        let fc = f(c);
        let mut k = WK[7] * fc;
        let mut g = WG[3] * fc;
        for i in 0..7 {
            let s = f(c - h * XK[i]) + f(c + h * XK[i]);
            k += WK[i] * s;
            if i % 2 == 1 {
                g += WG[i / 2] * s;
            }
        }
        (k * h, ((k - g) * h).abs())
    };

    // Start from a uniform partition so that a narrow peak cannot fall
    // between the nodes of a single panel.
    const PANELS: usize = 64;
    let width = b - a;
    let mut stack = Vec::with_capacity(2 * PANELS);
    let mut estimate = 0.0;
    for k in 0..PANELS {
        let lo = a + width * k as f64 / PANELS as f64;
        let hi = if k + 1 == PANELS { b } else { a + width * (k + 1) as f64 / PANELS as f64 };
        let (v, e) = rule(lo, hi);
        estimate += v;
        stack.push((lo, hi, v, e, 0u32));
    }
    let mut done = 0.0;
    while let Some((lo, hi, val, err, depth)) = stack.pop() {
        let tol = abs_tol.max(rel_tol * estimate.abs());
        if err <= tol * (hi - lo) / width || depth >= 60 {
            if depth >= 60 && err > tol * (hi - lo) / width {
                return Err(EkiError::InvalidParameter(format!("quadrature did not converge near {lo}")));
            }
            done += val;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (l, le) = rule(lo, mid);
        let (r, re) = rule(mid, hi);
        estimate += l + r - val;
        stack.push((lo, mid, l, le, depth + 1));
        stack.push((mid, hi, r, re, depth + 1));
    }
    Ok(done)
}

/// Scalar model G(u) = u³ with prior N(m₀, s₀²), one datum y, noise γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicToy {
    pub m0: f64,
    pub s0: f64,
    pub gamma: f64,
    pub y: f64,
}

impl Default for CubicToy {
    fn default() -> Self {
        CubicToy {
            m0: 0.5,
            s0: 0.5,
            gamma: 0.05 * 0.05,
            y: 1.0,
        }
    }
}

/// Quadrature tolerance for the cubic model.
const QUAD_TOL: f64 = 1e-10;

impl CubicToy {
    pub fn phi(&self, u: f64) -> f64 {
        let r = self.y - u * u * u;
        0.5 * r * r / self.gamma
    }

    fn prior_density(&self, u: f64) -> f64 {
        let z = (u - self.m0) / self.s0;
        (-0.5 * z * z).exp() / (self.s0 * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn range(&self) -> (f64, f64) {
        (self.m0 - 10.0 * self.s0, self.m0 + 10.0 * self.s0)
    }

    fn quad<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let (a, b) = self.range();
        integrate(f, a, b, 1e-300, QUAD_TOL)
    }

    /// N_t = ∫exp(−tΦ)dμ₀.
    pub fn normaliser(&self, t: f64) -> Result<f64> {
        self.quad(|u| (-t * self.phi(u)).exp() * self.prior_density(u))
    }

    /// (⟨Φ⟩_t, ⟨Φ,Φ⟩_t).
    pub fn misfit_moments(&self, t: f64) -> Result<(f64, f64)> {
        let z = self.normaliser(t)?;
        let w = |u: f64| (-t * self.phi(u)).exp() * self.prior_density(u) / z;
        let m1 = self.quad(|u| self.phi(u) * w(u))?;
        let c2 = self.quad(|u| (self.phi(u) - m1).powi(2) * w(u))?;
        Ok((m1, c2))
    }

    /// ∫(p₂ − p₁)(log p₂ − log p₁) evaluated pointwise from the two
    /// normalised densities.
    pub fn jeffreys(&self, t1: f64, t2: f64) -> Result<f64> {
        let z1 = self.normaliser(t1)?;
        let z2 = self.normaliser(t2)?;
        self.quad(|u| {
            let p0 = self.prior_density(u);
            if p0 == 0.0 {
                return 0.0;
            }
            let phi = self.phi(u);
            let p1 = (-t1 * phi).exp() * p0 / z1;
            let p2 = (-t2 * phi).exp() * p0 / z2;
            let log_ratio = -(t2 - t1) * phi - z2.ln() + z1.ln();
            (p2 - p1) * log_ratio
        })
    }
}

/// One line of a validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when the relative error (against |rhs|, or absolute when rhs
    /// vanishes) is within `tol`.
    pub fn relative(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let abs_err = (lhs - rhs).abs();
        let rel_err = if rhs != 0.0 { abs_err / rhs.abs() } else { abs_err };
        Check {
            name: name.into(),
            lhs,
            rhs,
            abs_err,
            rel_err,
            tol,
            pass: rel_err <= tol,
        }
    }
}

/// D_{KL,2}(μ_{t₀}, μ_{t₁}) against (t₁ − t₀)(⟨Φ⟩_{t₀} − ⟨Φ⟩_{t₁}), all in closed form.
pub fn verify_divergence_identity(fam: &TemperedFamily, t0: f64, t1: f64, tol: f64) -> Result<Check> {
    let a = tempered_gaussian(fam, t0)?;
    let b = tempered_gaussian(fam, t1)?;
    let lhs = jeffreys_divergence(&a, &b)?;
    let rhs = (t1 - t0) * (fam.misfit_moments(&a).0 - fam.misfit_moments(&b).0);
    Ok(Check::relative(format!("divergence_identity_linear[{t0},{t1}]"), lhs, rhs, tol))
}

/// The same identity for the cubic model, both sides by quadrature.
pub fn verify_divergence_identity_cubic(toy: &CubicToy, t0: f64, t1: f64, tol: f64) -> Result<Check> {
    let lhs = toy.jeffreys(t0, t1)?;
    let rhs = (t1 - t0) * (toy.misfit_moments(t0)?.0 - toy.misfit_moments(t1)?.0);
    Ok(Check::relative(format!("divergence_identity_cubic[{t0},{t1}]"), lhs, rhs, tol))
}

/// Central difference of ⟨Φ⟩_t against −⟨Φ,Φ⟩_t.
pub fn verify_corollary_derivative(fam: &TemperedFamily, t: f64, dt: f64, tol: f64) -> Result<Check> {
    let m = |s: f64| -> Result<f64> { Ok(fam.misfit_moments(&tempered_gaussian(fam, s)?).0) };
    let fd = (m(t + dt)? - m(t - dt)?) / (2.0 * dt);
    let var = fam.misfit_moments(&tempered_gaussian(fam, t)?).1;
    Ok(Check::relative(format!("mean_misfit_derivative_linear[t={t}]"), fd, -var, tol))
}

pub fn verify_corollary_derivative_cubic(toy: &CubicToy, t: f64, dt: f64, tol: f64) -> Result<Check> {
    let fd = (toy.misfit_moments(t + dt)?.0 - toy.misfit_moments(t - dt)?.0) / (2.0 * dt);
    let var = toy.misfit_moments(t)?.1;
    Ok(Check::relative(format!("mean_misfit_derivative_cubic[t={t}]"), fd, -var, tol))
}

/// Central difference of log N_t against −⟨Φ⟩_t.
pub fn verify_normaliser_derivative(fam: &TemperedFamily, t: f64, dt: f64, tol: f64) -> Result<Check> {
    let fd = (fam.log_normaliser(t + dt) - fam.log_normaliser(t - dt)) / (2.0 * dt);
    let mean = fam.misfit_moments(&tempered_gaussian(fam, t)?).0;
    Ok(Check::relative(format!("log_normaliser_derivative_linear[t={t}]"), fd, -mean, tol))
}

pub fn verify_normaliser_derivative_cubic(toy: &CubicToy, t: f64, dt: f64, tol: f64) -> Result<Check> {
    let fd = (toy.normaliser(t + dt)?.ln() - toy.normaliser(t - dt)?.ln()) / (2.0 * dt);
    let mean = toy.misfit_moments(t)?.0;
    Ok(Check::relative(format!("log_normaliser_derivative_cubic[t={t}]"), fd, -mean, tol))
}

/// DMC run with exact moments in place of ensemble estimates.
pub fn exact_dmc_schedule(fam: &TemperedFamily, max_steps: usize) -> Result<Vec<f64>> {
    let theta = 0.5 * fam.m() as f64;
    let mut clock = TemperingState::new();
    while !clock.finished() {
        if clock.history().len() >= max_steps {
            return Err(EkiError::InvalidParameter(format!("exact DMC schedule exceeded {max_steps} steps")));
        }
        let (mean, var) = fam.misfit_moments(&tempered_gaussian(fam, clock.t())?);
        clock.advance(dmc_candidate(theta, mean, var).0)?;
    }
    Ok(clock.history().to_vec())
}

/// Which term of max{θ/⟨Φ⟩, √(θ/⟨Φ,Φ⟩)} is larger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmcBranch {
    Mean,
    Variance,
    /// The remaining budget 1 − t was smaller than both.
    Cap,
}

fn dmc_candidate(theta: f64, mean: f64, var: f64) -> (f64, DmcBranch) {
    let a = if mean > 0.0 { theta / mean } else { f64::INFINITY };
    let b = if var > 0.0 { (theta / var).sqrt() } else { f64::INFINITY };
    if a >= b {
        (a, DmcBranch::Mean)
    } else {
        (b, DmcBranch::Variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmcBoundStep {
    pub n: usize,
    pub t: f64,
    pub alpha_inv: f64,
    /// Exact Jeffreys divergence between μ_{t_n} and μ_{t_{n+1}}.
    pub exact: f64,
    /// min{α⁻¹⟨Φ⟩, α⁻²⟨Φ,Φ⟩} at t_n.
    pub approx: f64,
    pub branch: DmcBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmcBoundReport {
    pub theta: f64,
    pub steps: Vec<DmcBoundStep>,
    /// max over steps of (exact/approx − 1)⁺: how far the approximation
    /// under-reports the divergence.
    pub epsilon: f64,
    /// max over steps of exact/θ.
    pub max_ratio: f64,
    pub epsilon_tol: f64,
    pub pass: bool,
}

/// Exact per-step divergence along a schedule, against θ = M/2.
pub fn verify_dmc_bound(fam: &TemperedFamily, schedule: &[f64], epsilon_tol: f64) -> Result<DmcBoundReport> {
    let theta = 0.5 * fam.m() as f64;
    let mut t = 0.0;
    let mut steps = Vec::with_capacity(schedule.len());
    for (n, &a) in schedule.iter().enumerate() {
        let mu = tempered_gaussian(fam, t)?;
        let next = tempered_gaussian(fam, (t + a).min(1.0))?;
        let (mean, var) = fam.misfit_moments(&mu);
        let (cand, branch) = dmc_candidate(theta, mean, var);
        steps.push(DmcBoundStep {
            n,
            t,
            alpha_inv: a,
            exact: jeffreys_divergence(&mu, &next)?,
            approx: (a * mean).min(a * a * var),
            branch: if a < cand { DmcBranch::Cap } else { branch },
        });
        t += a;
    }
    let epsilon = steps.iter().map(|s| (s.exact / s.approx - 1.0).max(0.0)).fold(0.0, f64::max);
    let max_ratio = steps.iter().map(|s| s.exact / theta).fold(0.0, f64::max);
    let bounded = steps.iter().all(|s| s.exact <= theta * (1.0 + epsilon) * (1.0 + 1e-12));
    Ok(DmcBoundReport {
        theta,
        steps,
        epsilon,
        max_ratio,
        epsilon_tol,
        pass: bounded && epsilon <= epsilon_tol && t == 1.0,
    })
}

/// Draws J particles from a Gaussian measure.
pub fn sample_gaussian(mu: &GaussianMeasure, j: usize, seed: u64) -> Result<Ensemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = mu.cov().clone().cholesky().expect("validated").l();
    let nd = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = (0..j)
        .map(|_| {
            let z = DVector::from_iterator(mu.dim(), (0..mu.dim()).map(|_| nd.sample(&mut rng)));
            (mu.mean() + &l * z).iter().copied().collect()
        })
        .collect();
    Ensemble::from_rows(rows)
}

fn linear_forward(fam: &TemperedFamily) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + '_ {
    move |u: &[f64]| Ok((fam.forward() * DVector::from_column_slice(u)).iter().copied().collect())
}

/// Largest componentwise relative error ‖a − b‖∞ / ‖b‖∞.
fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax()
}

/// EKI driven by the DMC on a linear-Gaussian family: final ensemble mean
/// against the t = 1 posterior mean.
pub fn verify_eki_dmc_posterior(fam: &TemperedFamily, j: usize, seed: u64) -> Result<(Check, usize)> {
    let prior = sample_gaussian(fam.prior(), j, seed)?;
    let obs = fam.observation()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut settings = DriverSettings::new(Controller::Dmc);
    settings.track_dm2 = false;
    let out = run_eki(prior, &obs, &settings, &mut rng, &linear_forward(fam), |_| {}, |_| Ok(()))?;
    let est = DVector::from_column_slice(ensemble_mean(&out.ensemble).as_slice());
    let post = tempered_gaussian(fam, 1.0)?;
    let rel = rel_vec(&est, post.mean());
    let tol = 5.0 / (j as f64).sqrt();
    let mut check = Check::relative(format!("eki_dmc_posterior_mean[J={j}]"), est.amax(), post.mean().amax(), tol);
    check.rel_err = rel;
    check.abs_err = (&est - post.mean()).amax();
    check.pass = rel <= tol;
    Ok((check, out.n_star))
}

/// One perturbed-observation step with α = 1 from a prior ensemble, against
/// the Kalman mean and covariance.
pub fn verify_one_step_kalman(fam: &TemperedFamily, j: usize, seed: u64) -> Result<[Check; 2]> {
    let prior = sample_gaussian(fam.prior(), j, seed)?;
    let obs = fam.observation()?;
    let g = linear_forward(fam);
    let rows: Result<Vec<Vec<f64>>> = prior.particles().iter().map(|p| g(p.as_slice())).collect();
    let ev = EvaluationBatch::new(rows?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a1);
    let next = eki_update(&prior, &ev, &obs, 1.0, &mut rng, PerturbMode::PerParticle)?;
    let post = tempered_gaussian(fam, 1.0)?;
    let mean = DVector::from_column_slice(ensemble_mean(&next).as_slice());
    let d = fam.prior().dim();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in next.particles() {
        let dv = DVector::from_column_slice(p.as_slice()) - &mean;
        cov += &dv * dv.transpose();
    }
    cov /= (j - 1) as f64;
    let tol = 5.0 / (j as f64).sqrt();
    let mut cm = Check::relative(format!("one_step_kalman_mean[J={j}]"), mean.amax(), post.mean().amax(), tol);
    cm.abs_err = (&mean - post.mean()).amax();
    cm.rel_err = rel_vec(&mean, post.mean());
    cm.pass = cm.rel_err <= tol;
    let mut cc = Check::relative(format!("one_step_kalman_cov[J={j}]"), cov.amax(), post.cov().amax(), tol);
    cc.abs_err = (&cov - post.cov()).amax();
    cc.rel_err = cc.abs_err / post.cov().amax();
    cc.pass = cc.rel_err <= tol;
    Ok([cm, cc])
}

/// Settings of the full validation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperingSettings {
    pub ensemble_size: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub identity_tol: f64,
    pub derivative_tol: f64,
    pub quadrature_identity_tol: f64,
    pub epsilon_tol: f64,
}

impl Default for TemperingSettings {
    fn default() -> Self {
        TemperingSettings {
            ensemble_size: 10_000,
            seed: 2024,
            fd_step: 1e-4,
            identity_tol: 1e-8,
            derivative_tol: 1e-6,
            quadrature_identity_tol: 1e-6,
            epsilon_tol: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperingReport {
    pub settings: TemperingSettings,
    pub checks: Vec<Check>,
    pub dmc_bound: DmcBoundReport,
    pub eki_iterations: usize,
    pub pass: bool,
}

impl TemperingReport {
    pub fn check(&self, prefix: &str) -> impl Iterator<Item = &Check> {
        let prefix = prefix.to_string();
        self.checks.iter().filter(move |c| c.name.starts_with(&prefix))
    }
}

/// 1D family used throughout: prior N(0.5, 1), G = 1, γ = 0.1, y = 2.
pub fn scalar_family() -> TemperedFamily {
    TemperedFamily::scalar(0.5, 1.0, 1.0, 0.1, 2.0).expect("valid constants")
}

/// A 3-parameter, 4-observation family with correlated prior.
pub fn vector_family() -> TemperedFamily {
    let prior = GaussianMeasure::new(
        DVector::from_vec(vec![0.2, -0.4, 1.0]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, -0.5, 0.0, -0.5, 0.8]),
    )
    .expect("valid constants");
    let g = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, 0.0, -0.3, 1.0, 2.0, 0.7, 0.0, 1.0, 1.5, -1.0, 0.2]);
    TemperedFamily::new(
        prior,
        g,
        DVector::from_vec(vec![1.0, 2.5, -0.3, 0.8]),
        DVector::from_vec(vec![0.05, 0.1, 0.02, 0.08]),
    )
    .expect("valid constants")
}

/// Runs every check on the standard toys.
pub fn validate_tempering(s: &TemperingSettings) -> Result<TemperingReport> {
    let scalar = scalar_family();
    let vector = vector_family();
    let cubic = CubicToy::default();
    let mut checks = Vec::new();

    for fam in [&scalar, &vector] {
        for (t0, t1) in [(0.0, 0.1), (0.1, 0.35), (0.35, 1.0)] {
            checks.push(verify_divergence_identity(fam, t0, t1, s.identity_tol)?);
        }
        // Central differences lose accuracy as t → 0 with informative data
        // (the third derivative of ⟨Φ⟩_t grows), so the grid starts at 1/4.
        for t in [0.25, 0.5, 0.9] {
            checks.push(verify_corollary_derivative(fam, t, s.fd_step, s.derivative_tol)?);
            checks.push(verify_normaliser_derivative(fam, t, s.fd_step, s.derivative_tol)?);
        }
    }
    for (t0, t1) in [(0.0, 0.2), (0.2, 0.6)] {
        checks.push(verify_divergence_identity_cubic(&cubic, t0, t1, s.quadrature_identity_tol)?);
    }
    // Quadrature error (1e-10 relative) is amplified by 1/dt, hence the looser tolerance.
    for t in [0.25, 0.5] {
        checks.push(verify_corollary_derivative_cubic(&cubic, t, s.fd_step, 1e-5)?);
        checks.push(verify_normaliser_derivative_cubic(&cubic, t, s.fd_step, 1e-5)?);
    }

    let schedule = exact_dmc_schedule(&scalar, 1000)?;
    let dmc_bound = verify_dmc_bound(&scalar, &schedule, s.epsilon_tol)?;

    let (eki, eki_iterations) = verify_eki_dmc_posterior(&scalar, s.ensemble_size, s.seed)?;
    checks.push(eki);
    checks.extend(verify_one_step_kalman(&scalar, s.ensemble_size, s.seed)?);

    let pass = checks.iter().all(|c| c.pass) && dmc_bound.pass;
    Ok(TemperingReport {
        settings: s.clone(),
        checks,
        dmc_bound,
        eki_iterations,
        pass,
    })
}
