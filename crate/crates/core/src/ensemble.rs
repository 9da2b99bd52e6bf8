//! Perturbed-observation ensemble Kalman inversion: ensemble statistics,
//! the Kalman-type particle update, and ensemble snapshot I/O.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EkiError, Result};

/// A single parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle(Vec<f64>);

impl Particle {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(EkiError::InvalidEnsemble(format!(
                "particle entry {i} is not finite"
            )));
        }
        Ok(Particle(coeffs))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// J particles of a common dimension plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<Particle>,
    iteration: usize,
}

impl Ensemble {
    pub fn new(particles: Vec<Particle>) -> Result<Self> {
        Self::with_iteration(particles, 0)
    }

    pub fn with_iteration(particles: Vec<Particle>, iteration: usize) -> Result<Self> {
        if particles.len() < 2 {
            return Err(EkiError::InvalidEnsemble(format!(
                "an ensemble needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        let d = particles[0].dim();
        if d == 0 {
            return Err(EkiError::InvalidEnsemble("zero-dimensional particles".into()));
        }
        if let Some(j) = particles.iter().position(|p| p.dim() != d) {
            return Err(EkiError::InvalidEnsemble(format!(
                "particle {j} has dimension {} but particle 0 has {d}",
                particles[j].dim()
            )));
        }
        Ok(Ensemble {
            particles,
            iteration,
        })
    }

    /// Builds an ensemble from raw rows, validating finiteness.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let particles = rows.into_iter().map(Particle::new).collect::<Result<Vec<_>>>()?;
        Ensemble::new(particles)
    }

    pub fn size(&self) -> usize {
        self.particles.len()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].dim()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particle(&self, j: usize) -> &Particle {
        &self.particles[j]
    }

    /// Applies `f` to every particle in place (used for support clamping).
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for p in &mut self.particles {
            f(p.as_mut_slice());
        }
    }

    /// Mean of coordinate `k` over the ensemble.
    pub fn component_mean(&self, k: usize) -> f64 {
        self.particles.iter().map(|p| p.0[k]).sum::<f64>() / self.size() as f64
    }
}

/// Measurements and the diagonal of their noise covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    y: Vec<f64>,
    gamma_diag: Vec<f64>,
}

impl Observation {
    pub fn new(y: Vec<f64>, gamma_diag: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(EkiError::InvalidParameter("observation vector is empty".into()));
        }
        if y.len() != gamma_diag.len() {
            return Err(EkiError::DimensionMismatch(format!(
                "y has length {} but the noise diagonal has length {}",
                y.len(),
                gamma_diag.len()
            )));
        }
        if let Some(m) = gamma_diag.iter().position(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(EkiError::InvalidParameter(format!(
                "noise variance {m} must be strictly positive and finite, got {}",
                gamma_diag[m]
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::InvalidParameter("observation contains non-finite values".into()));
        }
        Ok(Observation { y, gamma_diag })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn gamma_diag(&self) -> &[f64] {
        &self.gamma_diag
    }

    /// ‖Γ^{-1/2}(y − g)‖.
    pub fn whitened_norm(&self, g: &[f64]) -> f64 {
        self.whitened_sq(g).sqrt()
    }

    /// ‖Γ^{-1/2}(y − g)‖².
    pub fn whitened_sq(&self, g: &[f64]) -> f64 {
        self.y
            .iter()
            .zip(g)
            .zip(&self.gamma_diag)
            .map(|((y, g), gm)| (y - g) * (y - g) / gm)
            .sum()
    }
}

/// Forward evaluations of every particle: row j is G(u⁽ʲ⁾).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationBatch {
    values: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl EvaluationBatch {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(EkiError::DimensionMismatch("empty evaluation batch".into()));
        }
        let m = values[0].len();
        if m == 0 || values.iter().any(|r| r.len() != m) {
            return Err(EkiError::DimensionMismatch(
                "evaluation rows must share a positive length".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EkiError::Forward("forward map returned non-finite values".into()));
        }
        let mut mean = vec![0.0; m];
        for row in &values {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / values.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        Ok(EvaluationBatch { values, mean })
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// How the data perturbation ξ is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// A fresh ξ⁽ʲ⁾ ~ N(0, Γ) for each particle.
    #[default]
    PerParticle,
    /// One ξ shared by the whole ensemble.
    Shared,
}

/// (1/J) Σ_j u⁽ʲ⁾.
pub fn ensemble_mean(e: &Ensemble) -> Particle {
    let d = e.dim();
    let mut mean = vec![0.0; d];
    for p in e.particles() {
        for (acc, v) in mean.iter_mut().zip(p.as_slice()) {
            *acc += v;
        }
    }
    let inv = 1.0 / e.size() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    Particle(mean)
}

fn check_batch(e: &Ensemble, ev: &EvaluationBatch) -> Result<()> {
    if e.size() != ev.size() {
        return Err(EkiError::DimensionMismatch(format!(
            "{} particles but {} forward evaluations",
            e.size(),
            ev.size()
        )));
    }
    Ok(())
}

/// Output-space covariance C^{GG} accumulated sequentially over particles.
pub fn output_covariance(ev: &EvaluationBatch) -> DMatrix<f64> {
    let m = ev.output_dim();
    let j_count = ev.size();
    let mut cgg = DMatrix::<f64>::zeros(m, m);
    let mut dev = vec![0.0; m];
    for row in ev.rows() {
        for ((d, g), gbar) in dev.iter_mut().zip(row).zip(ev.mean()) {
            *d = g - gbar;
        }
        for b in 0..m {
            let db = dev[b];
            let col = cgg.column_mut(b);
            for (c, da) in col.into_iter().zip(&dev) {
                *c += da * db;
            }
        }
    }
    cgg /= (j_count - 1) as f64;
    cgg
}

/// Empirical cross-covariance C^{uG} (d×M) and output covariance C^{GG} (M×M).
pub fn empirical_covariances(
    e: &Ensemble,
    ev: &EvaluationBatch,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_batch(e, ev)?;
    let d = e.dim();
    let m = ev.output_dim();
    let ubar = ensemble_mean(e);
    let mut cug = DMatrix::<f64>::zeros(d, m);
    for (p, row) in e.particles().iter().zip(ev.rows()) {
        for b in 0..m {
            let dg = row[b] - ev.mean()[b];
            let mut col = cug.column_mut(b);
            for (a, (u, ub)) in p.as_slice().iter().zip(ubar.as_slice()).enumerate() {
                col[a] += (u - ub) * dg;
            }
        }
    }
    cug /= (e.size() - 1) as f64;
    Ok((cug, output_covariance(ev)))
}

/// Cholesky factor of C^{GG} + αΓ.
pub(crate) fn regularised_factor(
    cgg: &DMatrix<f64>,
    obs: &Observation,
    alpha: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut c = cgg.clone();
    for (i, g) in obs.gamma_diag().iter().enumerate() {
        c[(i, i)] += alpha * g;
    }
    c.cholesky().ok_or_else(|| {
        EkiError::Factorisation(format!(
            "C^GG + alpha*Gamma is not numerically positive definite (alpha = {alpha:e})"
        ))
    })
}

/// One perturbed-observation Kalman step
/// u⁽ʲ⁾ ← u⁽ʲ⁾ + C^{uG}(C^{GG} + αΓ)⁻¹(y + √α ξ⁽ʲ⁾ − G(u⁽ʲ⁾)).
///
/// C^{uG} is never formed: with deviations ΔU and ΔG the gain applied to a
/// residual w is ΔUᵀ(ΔG w)/(J−1), which costs O(J²(d+M)) instead of O(dMJ).
pub fn eki_update<R: Rng + ?Sized>(
    e: &Ensemble,
    ev: &EvaluationBatch,
    obs: &Observation,
    alpha: f64,
    rng: &mut R,
    mode: PerturbMode,
) -> Result<Ensemble> {
    let explicit = e.dim() * obs.len() < e.size() * (e.dim() + obs.len()) / 4;
    update_impl(e, ev, obs, alpha, rng, mode, explicit)
}

fn update_impl<R: Rng + ?Sized>(
    e: &Ensemble,
    ev: &EvaluationBatch,
    obs: &Observation,
    alpha: f64,
    rng: &mut R,
    mode: PerturbMode,
    explicit_gain: bool,
) -> Result<Ensemble> {
    check_batch(e, ev)?;
    if ev.output_dim() != obs.len() {
        return Err(EkiError::DimensionMismatch(format!(
            "forward output has length {} but y has length {}",
            ev.output_dim(),
            obs.len()
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(EkiError::InvalidParameter(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let j_count = e.size();
    let m = obs.len();
    let d = e.dim();

    let cgg = output_covariance(ev);
    let chol = regularised_factor(&cgg, obs, alpha)?;

    let sqrt_alpha = alpha.sqrt();
    let noise_sd: Vec<f64> = obs.gamma_diag().iter().map(|g| g.sqrt()).collect();
    let draw = |rng: &mut R| -> Vec<f64> {
        noise_sd
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let shared = match mode {
        PerturbMode::Shared => Some(draw(rng)),
        PerturbMode::PerParticle => None,
    };

    // Whitened residuals w_j = (C^GG + αΓ)⁻¹ (y + √α ξ_j − G_j), one column each.
    let mut residuals = DMatrix::<f64>::zeros(m, j_count);
    for j in 0..j_count {
        let xi = match &shared {
            Some(xi) => xi.clone(),
            None => draw(rng),
        };
        let row = ev.row(j);
        let mut col = residuals.column_mut(j);
        for a in 0..m {
            col[a] = obs.y()[a] + sqrt_alpha * xi[a] - row[a];
        }
    }
    chol.solve_mut(&mut residuals);

    let ubar = ensemble_mean(e);
    let inv = 1.0 / (j_count - 1) as f64;

    // Large ensembles in low dimension: form C^{uG} and apply it directly
    // rather than building the J×J coefficient matrix.
    if explicit_gain {
        let (cug, _) = empirical_covariances(e, ev)?;
        let incr = &cug * &residuals;
        let mut updated = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let u: Vec<f64> = e.particle(j).as_slice().iter().enumerate().map(|(a, v)| v + incr[(a, j)]).collect();
            updated.push(Particle::new(u)?);
        }
        return Ensemble::with_iteration(updated, e.iteration() + 1);
    }

    // S[k, j] = ΔG_k · w_j / (J − 1)
    let mut dg = DMatrix::<f64>::zeros(j_count, m);
    for (k, row) in ev.rows().iter().enumerate() {
        for a in 0..m {
            dg[(k, a)] = row[a] - ev.mean()[a];
        }
    }
    let s = (&dg * &residuals) * inv;

    let devs: Vec<Vec<f64>> = e
        .particles()
        .iter()
        .map(|p| p.as_slice().iter().zip(ubar.as_slice()).map(|(u, b)| u - b).collect())
        .collect();

    let mut updated = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let mut u = e.particle(j).as_slice().to_vec();
        for (k, dev) in devs.iter().enumerate() {
            let w = s[(k, j)];
            if w == 0.0 {
                continue;
            }
            for (ui, di) in u.iter_mut().zip(dev) {
                *ui += w * di;
            }
        }
        debug_assert_eq!(u.len(), d);
        updated.push(Particle::new(u)?);
    }
    Ensemble::with_iteration(updated, e.iteration() + 1)
}

/// Solves (C^{GG} + αΓ) x = r for a single right-hand side.
pub fn regularised_solve(
    cgg: &DMatrix<f64>,
    obs: &Observation,
    alpha: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let chol = regularised_factor(cgg, obs, alpha)?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    Ok(x.iter().copied().collect())
}

const ENSEMBLE_MAGIC: &[u8; 4] = b"EKI1";

/// Writes the flat little-endian snapshot: magic, J, d, n (u64), then J·d f64
/// values particle by particle.
pub fn write_ensemble_binary<W: Write>(e: &Ensemble, mut w: W) -> Result<()> {
    w.write_all(ENSEMBLE_MAGIC)?;
    for v in [e.size() as u64, e.dim() as u64, e.iteration() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in e.particles() {
        for v in p.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_ensemble_binary<R: Read>(mut r: R) -> Result<Ensemble> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ENSEMBLE_MAGIC {
        return Err(EkiError::Format(format!("bad ensemble magic {magic:?}")));
    }
    let mut word = [0u8; 8];
    let mut header = [0u64; 3];
    for h in &mut header {
        r.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    let [j_count, d, n] = header;
    let mut rows = Vec::with_capacity(j_count as usize);
    for _ in 0..j_count {
        let mut row = Vec::with_capacity(d as usize);
        for _ in 0..d {
            r.read_exact(&mut word)?;
            row.push(f64::from_le_bytes(word));
        }
        rows.push(Particle::new(row)?);
    }
    Ensemble::with_iteration(rows, n as usize)
}

/// One particle per row, comma separated, full round-trip precision.
pub fn write_ensemble_csv<W: Write>(e: &Ensemble, mut w: W) -> Result<()> {
    for p in e.particles() {
        let line: Vec<String> = p.as_slice().iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
