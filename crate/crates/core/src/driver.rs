//! The iterative EKI loop, shared by every controller.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{eki_update, ensemble_mean, output_covariance, Ensemble, EvaluationBatch, Observation, Particle, PerturbMode};
use crate::error::{EkiError, Result};
use crate::schedules::{compute_misfits, dmc_step, esmda_alpha, lm_alpha, lm_stop, LmConfig, MisfitStats, ScheduleRecord, TemperingState};

/// How α_n is chosen and when the iteration stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    /// Data misfit controller; stops when Σα⁻¹ reaches 1.
    Dmc,
    /// LM discrepancy rule. With `sum_stop` the increments are capped so that
    /// Σα⁻¹ = 1 ends the run instead of the discrepancy test.
    Lm {
        #[serde(flatten)]
        config: LmConfig,
        #[serde(default)]
        sum_stop: bool,
    },
    /// Constant α = steps for a fixed number of steps.
    EsMda { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverSettings {
    pub controller: Controller,
    pub perturb_mode: PerturbMode,
    pub max_iterations: usize,
    /// δ in the LM stop; √M when absent.
    pub noise_level: Option<f64>,
    /// Evaluate G(ū_n) every iteration for DM₂.
    pub track_dm2: bool,
}

impl DriverSettings {
    pub fn new(controller: Controller) -> Self {
        DriverSettings {
            controller,
            perturb_mode: PerturbMode::PerParticle,
            max_iterations: 200,
            noise_level: None,
            track_dm2: true,
        }
    }
}

/// Everything known about iteration n before its update.
pub struct StepView<'a> {
    pub n: usize,
    pub ensemble: &'a Ensemble,
    pub mean: &'a Particle,
    pub batch: &'a EvaluationBatch,
    pub misfits: &'a MisfitStats,
    pub record: &'a ScheduleRecord,
}

#[derive(Debug, Clone)]
pub struct EkiOutcome {
    pub ensemble: Ensemble,
    pub n_star: usize,
    /// One record per iteration 0..=n*. Row n carries the increment used to
    /// leave iteration n, so the last row has α⁻¹ = 0.
    pub records: Vec<ScheduleRecord>,
    /// False when `max_iterations` ran out first.
    pub converged: bool,
}

impl EkiOutcome {
    pub fn alpha_inv_sum(&self) -> f64 {
        self.records.iter().fold(0.0, |acc, r| acc + r.alpha_inv)
    }
}

/// Evaluates `g` on every particle in parallel, keeping particle order.
pub fn evaluate_batch<G>(e: &Ensemble, g: &G) -> Result<EvaluationBatch>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let rows: Result<Vec<Vec<f64>>> = e.particles().par_iter().map(|p| g(p.as_slice())).collect();
    EvaluationBatch::new(rows?)
}

/// Runs EKI from `initial` until the controller stops it.
///
/// `clamp` is applied to every particle after each update; `observer` sees
/// each iteration (including the final one) before any update.
pub fn run_eki<R, G, C, O>(
    initial: Ensemble,
    obs: &Observation,
    settings: &DriverSettings,
    rng: &mut R,
    forward: &G,
    clamp: C,
    mut observer: O,
) -> Result<EkiOutcome>
where
    R: Rng + ?Sized,
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    C: Fn(&mut [f64]),
    O: FnMut(&StepView) -> Result<()>,
{
    let m = obs.len();
    let delta = settings.noise_level.unwrap_or((m as f64).sqrt());
    if let Controller::EsMda { steps } = settings.controller {
        esmda_alpha(steps)?;
    }
    if let Controller::Lm { config, .. } = &settings.controller {
        config.validate()?;
    }

    let mut clock = TemperingState::new();
    let mut e = initial;
    let mut records = Vec::new();
    let mut n = 0usize;
    loop {
        let batch = evaluate_batch(&e, forward)?;
        let misfits = compute_misfits(&batch, obs)?;
        let mean = ensemble_mean(&e);
        let dm1 = obs.whitened_norm(batch.mean());
        // DM₃² = (1/J)Σ‖·‖² = 2Φ̄
        let dm3 = (2.0 * misfits.mean).sqrt();
        let dm2 = if settings.track_dm2 {
            obs.whitened_norm(&forward(mean.as_slice())?)
        } else {
            f64::NAN
        };

        let stop = match settings.controller {
            Controller::Dmc => clock.finished(),
            Controller::Lm { config, sum_stop } => {
                if sum_stop {
                    clock.finished()
                } else {
                    lm_stop(dm1, &config, delta)
                }
            }
            Controller::EsMda { steps } => n >= steps,
        };
        let out_of_budget = !stop && n >= settings.max_iterations;

        let alpha_inv = if stop || out_of_budget {
            0.0
        } else {
            match settings.controller {
                Controller::Dmc => dmc_step(&misfits, m, &mut clock)?.0,
                Controller::Lm { config, sum_stop } => {
                    let a = lm_alpha(batch.mean(), obs, &output_covariance(&batch), &config)?;
                    if sum_stop {
                        clock.advance(1.0 / a)?.0
                    } else {
                        1.0 / a
                    }
                }
                Controller::EsMda { steps } => 1.0 / esmda_alpha(steps)?,
            }
        };

        let t_n = records.iter().fold(0.0, |acc: f64, r: &ScheduleRecord| acc + r.alpha_inv);
        let record = ScheduleRecord {
            n,
            alpha_inv,
            t: t_n,
            phi_mean: misfits.mean,
            phi_var: misfits.variance,
            dm1,
            dm2,
            dm3,
        };
        observer(&StepView {
            n,
            ensemble: &e,
            mean: &mean,
            batch: &batch,
            misfits: &misfits,
            record: &record,
        })?;
        records.push(record);

        if stop || out_of_budget {
            if out_of_budget {
                log::warn!("EKI stopped after {n} iterations without meeting its stopping rule");
            }
            return Ok(EkiOutcome {
                ensemble: e,
                n_star: n,
                records,
                converged: stop,
            });
        }

        let mut next = eki_update(&e, &batch, obs, 1.0 / alpha_inv, rng, settings.perturb_mode)?;
        next.for_each_mut(&clamp);
        if next.particles().iter().any(|p| p.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(EkiError::Factorisation(format!("non-finite particle after update {n}")));
        }
        e = next;
        n += 1;
    }
}
