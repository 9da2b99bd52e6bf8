//! End-to-end synthetic EIT experiments: truths, data, runs and repeat
//! statistics.

mod config;
mod metrics;
mod truth;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, ControllerConfig, ControllerKind, Ellipse, ExperimentConfig, ExperimentId, FieldConfig,
    ForwardConfig, LevelSetConfig, NoiseConfig, PhaseTruth, SmoothTruth, ToyConfig, TruthConfig, PRESETS,
};
pub use metrics::{data_misfits, estimate, generate_data, noise_variances, relative_l2_error, DataMisfits};
pub use truth::on_elements;

use crate::driver::{run_eki, StepView};
use crate::eit::{adjacent_patterns, build_disc_mesh, write_measurements_csv, CemSolver, DiscMesh, ElectrodeLayout, ForwardModel};
use crate::ensemble::{Ensemble, Observation, Particle};
use crate::error::{EkiError, Result};
use crate::fields::{write_grid_binary, GridGeometry, P1Param, P1Prior};
use crate::level_set::{P2Param, P2Prior};
use crate::param::Parameterisation;
use crate::schedules::{write_schedule_row, ScheduleRecord, SCHEDULE_CSV_HEADER};
use crate::tempering::{sample_gaussian, tempered_gaussian, TemperedFamily};

enum Model {
    Eit {
        param: Box<dyn Parameterisation>,
        forward: ForwardModel,
        /// κ† at inversion-mesh centroids.
        truth: Vec<f64>,
        areas: Vec<f64>,
        data_mesh: DiscMesh,
        clean: Vec<f64>,
    },
    Toy {
        family: TemperedFamily,
        posterior_mean: f64,
    },
}

/// Everything shared by the runs of one configuration: meshes, the
/// parameterisation, the truth and the synthetic data.
pub struct Problem {
    config: ExperimentConfig,
    model: Model,
    obs: Observation,
}

impl Problem {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.experiment == ExperimentId::Toy {
            let t = &config.toy;
            let family = TemperedFamily::scalar(t.m0, t.c0, t.g, t.gamma, t.y)?;
            let posterior_mean = tempered_gaussian(&family, 1.0)?.mean()[0];
            let obs = family.observation()?;
            return Ok(Problem {
                config: config.clone(),
                model: Model::Toy { family, posterior_mean },
                obs,
            });
        }

        let grid = GridGeometry::unit_square(config.grid)?;
        let param = build_param(config, grid)?;
        let f = &config.forward;
        let layout = ElectrodeLayout::equispaced(f.electrodes, f.coverage, f.contact_impedance)?;
        let patterns = adjacent_patterns(f.electrodes, f.current)?;

        let data_mesh = build_disc_mesh(f.data_elements)?;
        let truth_fn = |x: f64, y: f64| match config.experiment {
            ExperimentId::Exp1 => config.truth.exp1.value(x, y),
            _ => config.truth.exp2.value(x, y),
        };
        match config.experiment {
            ExperimentId::Exp1 => config.truth.exp1.validate()?,
            _ => config.truth.exp2.validate()?,
        }
        let data_solver = CemSolver::new(data_mesh.clone(), layout.clone())?;
        let clean = data_solver.voltages(&on_elements(&data_mesh, truth_fn), &patterns)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
        let obs = generate_data(&clean, &config.noise, &mut rng)?;

        let inv_mesh = build_disc_mesh(f.inversion_elements)?;
        if inv_mesh.n_triangles() == data_mesh.n_triangles() {
            return Err(EkiError::Config("data and inversion meshes coincide".into()));
        }
        let truth = on_elements(&inv_mesh, truth_fn);
        let areas = (0..inv_mesh.n_triangles()).map(|t| inv_mesh.area(t)).collect();
        let forward = ForwardModel::new(CemSolver::new(inv_mesh, layout)?, patterns, grid)?;
        log::info!(
            "{}: data mesh {} elements, inversion mesh {} elements, M = {}",
            config.name,
            data_mesh.n_triangles(),
            forward.solver().mesh().n_triangles(),
            obs.len()
        );
        Ok(Problem {
            config: config.clone(),
            model: Model::Eit {
                param,
                forward,
                truth,
                areas,
                data_mesh,
                clean,
            },
            obs,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    /// Noise-free voltages V† on the data mesh (EIT experiments only).
    pub fn clean_data(&self) -> Option<&[f64]> {
        match &self.model {
            Model::Eit { clean, .. } => Some(clean),
            Model::Toy { .. } => None,
        }
    }

    pub fn parameterisation(&self) -> Option<&dyn Parameterisation> {
        match &self.model {
            Model::Eit { param, .. } => Some(param.as_ref()),
            Model::Toy { .. } => None,
        }
    }

    pub fn forward_model(&self) -> Option<&ForwardModel> {
        match &self.model {
            Model::Eit { forward, .. } => Some(forward),
            Model::Toy { .. } => None,
        }
    }

    /// The ensemble every controller starts from for a given seed.
    pub fn initial_ensemble(&self, seed: u64) -> Result<Ensemble> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &self.model {
            Model::Eit { param, .. } => param.sample_prior(self.config.ensemble_size, &mut rng),
            Model::Toy { family, .. } => sample_gaussian(family.prior(), self.config.ensemble_size, seed),
        }
    }

    /// E = ‖P(u) − κ†‖/‖κ†‖ on the inversion mesh; for the toy, the relative
    /// distance of u to the posterior mean.
    pub fn relative_error(&self, u: &[f64]) -> Result<f64> {
        match &self.model {
            Model::Eit {
                param,
                forward,
                truth,
                areas,
                ..
            } => {
                let est = forward.element_conductivity(&param.conductivity(u)?)?;
                relative_l2_error(&est, truth, areas)
            }
            Model::Toy { posterior_mean, .. } => Ok((u[0] - posterior_mean).abs() / posterior_mean.abs()),
        }
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<Vec<f64>> {
        match &self.model {
            Model::Eit { param, forward, .. } => forward.evaluate(param.as_ref(), u),
            Model::Toy { family, .. } => Ok(vec![family.forward()[(0, 0)] * u[0]]),
        }
    }

    fn clamp(&self, u: &mut [f64]) {
        if let Model::Eit { param, .. } = &self.model {
            param.clamp(u);
        }
    }

    fn scalar_names(&self) -> &'static [&'static str] {
        match &self.model {
            Model::Eit { param, .. } => param.scalar_names(),
            Model::Toy { .. } => &["u"],
        }
    }

    /// Runs one seed with the given controller. With `out` set, the run's
    /// files are written there; the schedule log is flushed every iteration
    /// so a failed run leaves its partial history behind.
    pub fn run(&self, controller: &ControllerConfig, seed: u64, out: Option<&Path>) -> Result<RunResult> {
        let settings = controller.driver_settings()?;
        let initial = self.initial_ensemble(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);

        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut cfg = self.config.clone();
                cfg.controller = controller.clone();
                cfg.seed = seed;
                cfg.repeats = 1;
                fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
                let mut w = BufWriter::new(File::create(dir.join("schedule.csv"))?);
                writeln!(w, "{SCHEDULE_CSV_HEADER}")?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };

        let n_scalars = self.scalar_names().len();
        let mut means: Vec<Particle> = Vec::new();
        let mut errors = Vec::new();
        let mut scalars = Vec::new();
        let observer = |v: &StepView| -> Result<()> {
            if let Some(w) = log.as_mut() {
                write_schedule_row(v.record, &mut *w)?;
                w.flush()?;
            }
            errors.push(self.relative_error(v.mean.as_slice())?);
            scalars.push(v.mean.as_slice()[..n_scalars].to_vec());
            means.push(v.mean.clone());
            log::debug!(
                "n = {} t = {:.4} alpha_inv = {:.4e} dm1 = {:.3} E = {:.4}",
                v.n,
                v.record.t,
                v.record.alpha_inv,
                v.record.dm1,
                errors.last().unwrap()
            );
            Ok(())
        };
        let outcome = run_eki(
            initial,
            &self.obs,
            &settings,
            &mut rng,
            &|u: &[f64]| self.evaluate(u),
            |u: &mut [f64]| self.clamp(u),
            observer,
        )?;

        let n_star = outcome.n_star;
        let last = *outcome.records.last().expect("at least one record");
        let result = RunResult {
            experiment: self.config.experiment,
            controller: controller.label(),
            seed,
            ensemble_size: self.config.ensemble_size,
            n_star,
            converged: outcome.converged,
            alpha_inv_sum: outcome.alpha_inv_sum(),
            prior_error: errors[0],
            final_error: errors[n_star],
            final_misfits: DataMisfits {
                dm1: last.dm1,
                dm2: last.dm2,
                dm3: last.dm3,
            },
            scalar_names: self.scalar_names().iter().map(|s| s.to_string()).collect(),
            records: outcome.records,
            errors,
            scalars,
            means,
        };
        if let Some(dir) = out {
            self.write_outputs(&result, dir)?;
        }
        Ok(result)
    }

    fn write_outputs(&self, r: &RunResult, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        write!(w, "n,t,error,dm1,dm2,dm3")?;
        for s in &r.scalar_names {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        for (k, rec) in r.records.iter().enumerate() {
            write!(w, "{},{:?},{:?},{:?},{:?},{:?}", rec.n, rec.t, r.errors[k], rec.dm1, rec.dm2, rec.dm3)?;
            for v in &r.scalars[k] {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("summary.json"))?), &r.brief())?;

        if let Model::Eit {
            param,
            forward,
            data_mesh,
            clean,
            ..
        } = &self.model
        {
            for n in r.snapshot_iterations() {
                let u = r.means[n].as_slice();
                write_grid_binary(&param.conductivity(u)?, BufWriter::new(File::create(dir.join(format!("kappa_{n:03}.grd")))?))?;
                if let Some(f) = param.level_set(u)? {
                    write_grid_binary(&f, BufWriter::new(File::create(dir.join(format!("level_set_{n:03}.grd")))?))?;
                }
            }
            forward.solver().mesh().write_json(BufWriter::new(File::create(dir.join("inversion_mesh.json"))?))?;
            data_mesh.write_json(BufWriter::new(File::create(dir.join("data_mesh.json"))?))?;
            let e = forward.patterns().electrodes();
            write_measurements_csv(self.obs.y(), e, BufWriter::new(File::create(dir.join("data.csv"))?))?;
            write_measurements_csv(clean, e, BufWriter::new(File::create(dir.join("data_clean.csv"))?))?;
        }
        Ok(())
    }

    /// Runs seeds seed, seed+1, … as independent jobs.
    pub fn repeat(&self, controller: &ControllerConfig, out: Option<&Path>) -> Result<RepeatSummary> {
        let c = &self.config;
        let runs: Result<Vec<RunResult>> = (0..c.repeats as u64)
            .into_par_iter()
            .map(|r| {
                let seed = c.seed + r;
                let dir = out.map(|d| d.join(format!("seed_{seed}")));
                let res = self.run(controller, seed, dir.as_deref());
                if let Ok(run) = &res {
                    log::info!(
                        "{} seed {seed}: n* = {}, E = {:.4}, DM1 = {:.2}",
                        controller.label(),
                        run.n_star,
                        run.final_error,
                        run.final_misfits.dm1
                    );
                }
                res
            })
            .collect();
        let summary = RepeatSummary::new(&c.name, controller.label(), c.ensemble_size, runs?);
        if let Some(d) = out {
            fs::create_dir_all(d)?;
            serde_json::to_writer_pretty(BufWriter::new(File::create(d.join("repeat_summary.json"))?), &summary)?;
        }
        Ok(summary)
    }

    /// DMC and LM(ρ) on the same initial ensembles.
    pub fn compare(&self, lm_rho: f64, out: Option<&Path>) -> Result<CompareSummary> {
        let dmc = ControllerConfig {
            kind: ControllerKind::Dmc,
            ..self.config.controller.clone()
        };
        let lm = ControllerConfig {
            kind: ControllerKind::Lm,
            rho: lm_rho,
            tau: 0.0,
            sum_stop: false,
            ..self.config.controller.clone()
        };
        let dmc_summary = self.repeat(&dmc, out.map(|d| d.join(dmc.label())).as_deref())?;
        let lm_summary = self.repeat(&lm, out.map(|d| d.join(lm.label())).as_deref())?;
        let summary = CompareSummary {
            iteration_ratio: lm_summary.n_star.mean / dmc_summary.n_star.mean,
            dmc: dmc_summary,
            lm: lm_summary,
        };
        if let Some(d) = out {
            serde_json::to_writer_pretty(BufWriter::new(File::create(d.join("compare_summary.json"))?), &summary)?;
        }
        Ok(summary)
    }
}

fn build_param(c: &ExperimentConfig, grid: GridGeometry) -> Result<Box<dyn Parameterisation>> {
    Ok(match c.experiment {
        ExperimentId::Exp1 => {
            let f = &c.field;
            let p = P1Param {
                grid,
                nu: f.nu,
                sigma: f.sigma,
                zeta_r: f.zeta_r,
                amplitude: f.amplitude,
                prior: P1Prior {
                    lambda: f.lambda,
                    l1: f.l1,
                    l2: f.l2,
                },
            };
            p.validate().map_err(|e| EkiError::Config(e.to_string()))?;
            Box::new(p)
        }
        ExperimentId::Exp2 => {
            let l = &c.level_set;
            let p = P2Param {
                grid,
                lambda_f: 1.0,
                nu_f: l.nu,
                sigma_f: l.sigma,
                zeta_r: l.zeta_r,
                zeta1: l.zeta1,
                zeta2: l.zeta2,
                amplitude: l.amplitude,
                prior: P2Prior {
                    kappa_l: l.kappa_l,
                    kappa_b: l.kappa_b,
                    kappa_h: l.kappa_h,
                    l1: l.l1,
                    l2: l.l2,
                },
            };
            p.validate().map_err(|e| EkiError::Config(e.to_string()))?;
            Box::new(p)
        }
        ExperimentId::Toy => unreachable!("toy problems have no grid parameterisation"),
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub experiment: ExperimentId,
    pub controller: String,
    pub seed: u64,
    pub ensemble_size: usize,
    pub n_star: usize,
    pub converged: bool,
    pub alpha_inv_sum: f64,
    pub prior_error: f64,
    pub final_error: f64,
    pub final_misfits: DataMisfits,
    pub scalar_names: Vec<String>,
    /// Per-iteration traces, all of length n* + 1.
    pub records: Vec<ScheduleRecord>,
    pub errors: Vec<f64>,
    pub scalars: Vec<Vec<f64>>,
    pub means: Vec<Particle>,
}

impl RunResult {
    /// 0, ⌈n*/2⌉ and n*, without duplicates.
    pub fn snapshot_iterations(&self) -> Vec<usize> {
        let mut v = vec![0, self.n_star.div_ceil(2), self.n_star];
        v.dedup();
        v
    }

    pub fn dm1_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dm1).collect()
    }

    pub fn brief(&self) -> RunBrief {
        RunBrief {
            experiment: self.experiment,
            controller: self.controller.clone(),
            seed: self.seed,
            ensemble_size: self.ensemble_size,
            n_star: self.n_star,
            converged: self.converged,
            alpha_inv_sum: self.alpha_inv_sum,
            prior_error: self.prior_error,
            final_error: self.final_error,
            final_misfits: self.final_misfits,
            final_scalars: self
                .scalar_names
                .iter()
                .cloned()
                .zip(self.scalars.last().cloned().unwrap_or_default())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunBrief {
    pub experiment: ExperimentId,
    pub controller: String,
    pub seed: u64,
    pub ensemble_size: usize,
    pub n_star: usize,
    pub converged: bool,
    pub alpha_inv_sum: f64,
    pub prior_error: f64,
    pub final_error: f64,
    pub final_misfits: DataMisfits,
    pub final_scalars: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub name: String,
    pub controller: String,
    pub ensemble_size: usize,
    pub repeats: usize,
    pub n_star: MeanSd,
    pub final_error: MeanSd,
    pub prior_error: MeanSd,
    pub dm1: MeanSd,
    pub dm2: MeanSd,
    pub dm3: MeanSd,
    pub converged: usize,
    pub runs: Vec<RunBrief>,
    #[serde(skip)]
    pub results: Vec<RunResult>,
}

impl RepeatSummary {
    pub fn new(name: &str, controller: String, ensemble_size: usize, results: Vec<RunResult>) -> Self {
        let col = |f: fn(&RunResult) -> f64| MeanSd::of(&results.iter().map(f).collect::<Vec<_>>());
        RepeatSummary {
            name: name.to_string(),
            controller,
            ensemble_size,
            repeats: results.len(),
            n_star: col(|r| r.n_star as f64),
            final_error: col(|r| r.final_error),
            prior_error: col(|r| r.prior_error),
            dm1: col(|r| r.final_misfits.dm1),
            dm2: col(|r| r.final_misfits.dm2),
            dm3: col(|r| r.final_misfits.dm3),
            converged: results.iter().filter(|r| r.converged).count(),
            runs: results.iter().map(RunResult::brief).collect(),
            results,
        }
    }

    /// One table row: controller, J, n*, E, DM₁, DM₂, DM₃.
    pub fn table_row(&self) -> String {
        format!(
            "{:<12} J={:<5} n*={} E={} DM1={} DM2={} DM3={}",
            self.controller, self.ensemble_size, self.n_star, self.final_error, self.dm1, self.dm2, self.dm3
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub dmc: RepeatSummary,
    pub lm: RepeatSummary,
    /// Mean LM n* over mean DMC n*.
    pub iteration_ratio: f64,
}

/// Default root for run directories: `$EKI_OUTPUT_ROOT` or `./runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os("EKI_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(exp: &str) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(exp).unwrap();
        c.grid = 12;
        c.ensemble_size = 12;
        c.repeats = 2;
        c.forward.data_elements = 400;
        c.forward.inversion_elements = 256;
        c.controller.max_iterations = 30;
        c
    }

    #[test]
    fn run_traces_have_consistent_lengths() {
        for name in ["desk-exp1", "desk-exp2"] {
            let c = tiny(name);
            let p = Problem::build(&c).unwrap();
            let r = p.run(&c.controller, 3, None).unwrap();
            assert!(r.converged);
            assert_eq!(r.records.len(), r.n_star + 1);
            assert_eq!(r.errors.len(), r.n_star + 1);
            assert_eq!(r.scalars.len(), r.n_star + 1);
            assert_eq!(r.alpha_inv_sum, 1.0);
        }
    }

    #[test]
    fn outputs_are_written_and_config_is_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny("desk-exp2");
        let p = Problem::build(&c).unwrap();
        let r = p.run(&c.controller, 5, Some(dir.path())).unwrap();
        for f in ["config.toml", "schedule.csv", "metrics.csv", "summary.json", "data.csv", "inversion_mesh.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for n in r.snapshot_iterations() {
            assert!(dir.path().join(format!("kappa_{n:03}.grd")).exists());
            assert!(dir.path().join(format!("level_set_{n:03}.grd")).exists());
        }
        let sched = fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
        assert_eq!(sched.lines().count(), r.n_star + 2);

        // rerunning from the frozen config reproduces the run exactly
        let frozen = ExperimentConfig::resolve(Some(&dir.path().join("config.toml")), Some("desk-exp2"), &[]).unwrap();
        let again = Problem::build(&frozen).unwrap().run(&frozen.controller, frozen.seed, None).unwrap();
        assert_eq!(again.means, r.means);
    }

    #[test]
    fn compare_shares_initial_ensembles() {
        let c = tiny("desk-exp1");
        let p = Problem::build(&c).unwrap();
        let s = p.compare(0.8, None).unwrap();
        for (a, b) in s.dmc.results.iter().zip(&s.lm.results) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.means[0], b.means[0]);
        }
        assert_eq!(s.dmc.repeats, 2);
    }

    #[test]
    fn toy_run_reaches_posterior_mean() {
        let c = ExperimentConfig::preset("toy").unwrap();
        let p = Problem::build(&c).unwrap();
        let r = p.run(&c.controller, 11, None).unwrap();
        assert!(r.final_error < 5.0 / (c.ensemble_size as f64).sqrt());
    }
}
