use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eki_core::eit::{validate_cem, CemValidationSettings};
use eki_core::experiments::{default_output_root, ExperimentConfig, Problem, RepeatSummary};
use eki_core::fields::{validate_acf, AcfSettings, GridGeometry, P1Param};
use eki_core::param::Parameterisation;
use eki_core::tempering::{validate_tempering, TemperingSettings};

/// Ensemble Kalman inversion for synthetic EIT experiments.
#[derive(Parser)]
#[command(name = "eki", version)]
struct Cli {
    /// Worker threads for forward evaluations (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and write its results.
    Run(ExpArgs),
    /// Run `repeats` seeds and summarise them.
    Repeat(ExpArgs),
    /// DMC and LM on the same initial ensembles.
    Compare {
        #[command(flatten)]
        exp: ExpArgs,
        /// ρ for the LM controller.
        #[arg(long, default_value_t = 0.8)]
        lm_rho: f64,
    },
    /// Monte Carlo check of the Whittle–Matérn field against its ACF.
    ValidateField {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reciprocity, current balance and refinement checks of the CEM solver.
    ValidateCem {
        #[arg(long, default_value_t = 48)]
        rings: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tempering identities, derivative checks and the DMC bound.
    ValidateTempering {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a fully resolved configuration.
    ShowConfig(ExpArgs),
}

#[derive(Args, Clone)]
struct ExpArgs {
    /// TOML configuration; may name a base preset with `preset = "..."`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: full-exp1, full-exp2, desk-exp1, desk-exp2 or toy.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override, e.g. `--set controller.kind=lm`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $EKI_OUTPUT_ROOT/<name>/...).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn resolve(&self) -> eki_core::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::resolve(self.config.as_deref(), self.preset.as_deref(), &overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, leaf: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = if cfg.output_dir.is_absolute() {
                cfg.output_dir.clone()
            } else {
                default_output_root()
            };
            root.join(&cfg.name).join(leaf)
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> eki_core::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = out {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn print_table(s: &RepeatSummary) {
    println!("{}", s.table_row());
    if s.converged < s.repeats {
        println!("  {} of {} runs hit max_iterations", s.repeats - s.converged, s.repeats);
    }
}

/// Ok(false) when a validation ran but did not pass.
fn dispatch(cmd: Command) -> eki_core::Result<bool> {
    match cmd {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let problem = Problem::build(&cfg)?;
            let dir = a.out_dir(&cfg, &format!("{}/seed_{}", cfg.controller.label(), cfg.seed));
            let r = problem.run(&cfg.controller, cfg.seed, Some(&dir))?;
            println!(
                "{} seed {}: n* = {}, E = {:.4}, DM1 = {:.3}, DM2 = {:.3}, DM3 = {:.3}",
                r.controller, r.seed, r.n_star, r.final_error, r.final_misfits.dm1, r.final_misfits.dm2, r.final_misfits.dm3
            );
            println!("results in {}", dir.display());
            Ok(true)
        }
        Command::Repeat(a) => {
            let cfg = a.resolve()?;
            let problem = Problem::build(&cfg)?;
            let dir = a.out_dir(&cfg, &cfg.controller.label());
            let s = problem.repeat(&cfg.controller, Some(&dir))?;
            print_table(&s);
            println!("results in {}", dir.display());
            Ok(true)
        }
        Command::Compare { exp, lm_rho } => {
            let cfg = exp.resolve()?;
            let problem = Problem::build(&cfg)?;
            let dir = exp.out_dir(&cfg, "compare");
            let s = problem.compare(lm_rho, Some(&dir))?;
            print_table(&s.dmc);
            print_table(&s.lm);
            println!("LM/DMC iteration ratio {:.2}", s.iteration_ratio);
            println!("results in {}", dir.display());
            Ok(true)
        }
        Command::ValidateField { samples, seed, out } => {
            let settings = AcfSettings {
                samples,
                seed,
                ..Default::default()
            };
            let report = validate_acf(&settings)?;
            let lambda_exact = zero_noise_gives_lambda()?;
            let value = serde_json::json!({ "zero_noise_gives_lambda": lambda_exact, "acf": report });
            write_json(&value, out.as_deref())?;
            Ok(report.pass && lambda_exact)
        }
        Command::ValidateCem { rings, out } => {
            let report = validate_cem(&CemValidationSettings {
                rings,
                ..Default::default()
            })?;
            write_json(&report, out.as_deref())?;
            Ok(report.pass)
        }
        Command::ValidateTempering { seed, out } => {
            let mut settings = TemperingSettings::default();
            if let Some(s) = seed {
                settings.seed = s;
            }
            let report = validate_tempering(&settings)?;
            write_json(&report, out.as_deref())?;
            Ok(report.pass)
        }
        Command::ShowConfig(a) => {
            print!("{}", a.resolve()?.to_toml()?);
            Ok(true)
        }
    }
}

/// ω = 0 must map to the constant field λ.
fn zero_noise_gives_lambda() -> eki_core::Result<bool> {
    let p = P1Param::new(GridGeometry::unit_square(50)?);
    let mut u = vec![0.0; p.dim()];
    u[..3].copy_from_slice(&[0.37, 0.3, 0.45]);
    let k = p.conductivity(&u)?;
    Ok(k.values().iter().all(|v| *v == 0.37))
}
