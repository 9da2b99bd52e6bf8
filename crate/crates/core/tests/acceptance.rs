//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! EKI_ACCEPTANCE_SCALE selects the experiment scale:
//!   unset  criteria 1, 2 and 4 at full scale, 5 and 10 at desk scale
//!   full   everything at full scale
//!   desk   everything at desk scale
//! EKI_ACCEPTANCE_STRICT=1 turns any FAIL into a nonzero exit status.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eki_core::eit::{validate_cem, CemValidationSettings};
use eki_core::experiments::{ControllerConfig, ControllerKind, ExperimentConfig, Problem, RepeatSummary};
use eki_core::fields::{validate_acf, AcfSettings, GridGeometry, P1Param};
use eki_core::param::Parameterisation;
use eki_core::tempering::{scalar_family, validate_tempering, verify_eki_dmc_posterior, verify_one_step_kalman, TemperingSettings};

const REPEATS: usize = 10;

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
    let _ = out.flush();
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Scale {
    Full,
    Desk,
}

impl Scale {
    fn preset(self, exp: u8) -> String {
        match self {
            Scale::Full => format!("full-exp{exp}"),
            Scale::Desk => format!("desk-exp{exp}"),
        }
    }
}

struct Suite {
    main: Scale,
    aux: Scale,
    root: tempfile::TempDir,
    problems: HashMap<(Scale, u8, usize), Problem>,
    summaries: HashMap<(Scale, u8, usize, String), RepeatSummary>,
    results: Vec<(usize, bool)>,
}

impl Suite {
    fn new() -> Self {
        let (main, aux) = match std::env::var("EKI_ACCEPTANCE_SCALE").as_deref() {
            Ok("full") => (Scale::Full, Scale::Full),
            Ok("desk") => (Scale::Desk, Scale::Desk),
            _ => (Scale::Full, Scale::Desk),
        };
        Suite {
            main,
            aux,
            root: tempfile::tempdir().expect("temporary directory"),
            problems: HashMap::new(),
            summaries: HashMap::new(),
            results: Vec::new(),
        }
    }

    fn problem(&mut self, scale: Scale, exp: u8, j: usize) -> &Problem {
        self.problems.entry((scale, exp, j)).or_insert_with(|| {
            let mut c = ExperimentConfig::preset(&scale.preset(exp)).expect("preset");
            c.ensemble_size = j;
            c.repeats = REPEATS;
            Problem::build(&c).expect("problem setup")
        })
    }

    fn out_dir(&self, scale: Scale, exp: u8, j: usize, label: &str) -> PathBuf {
        self.root.path().join(format!("{scale:?}-exp{exp}-J{j}-{label}"))
    }

    /// Repeat summary for a controller, computed once.
    fn summary(&mut self, scale: Scale, exp: u8, j: usize, ctrl: &ControllerConfig) -> &RepeatSummary {
        let key = (scale, exp, j, ctrl.label());
        if !self.summaries.contains_key(&key) {
            let out = self.out_dir(scale, exp, j, &ctrl.label());
            let t = Instant::now();
            let s = self.problem(scale, exp, j).repeat(ctrl, Some(&out)).expect("repeat");
            say(format!(
                "    [{:?} exp{exp} J={j}] {}  ({:.0} s)",
                scale,
                s.table_row(),
                t.elapsed().as_secs_f64()
            ));
            self.summaries.insert(key.clone(), s);
        }
        &self.summaries[&key]
    }

    fn dmc(&mut self, scale: Scale, exp: u8, j: usize) -> &RepeatSummary {
        self.summary(scale, exp, j, &ControllerConfig::default())
    }

    fn lm(&mut self, scale: Scale, exp: u8, rho: f64) -> &RepeatSummary {
        let c = ControllerConfig {
            kind: ControllerKind::Lm,
            rho,
            ..Default::default()
        };
        self.summary(scale, exp, 200, &c)
    }

    fn report(&mut self, n: usize, pass: bool, text: String) {
        say(format!("criterion {n:>2} {} {text}", if pass { "PASS" } else { "FAIL" }));
        self.results.push((n, pass));
    }
}

fn read_alpha_inv(path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(path).expect("schedule log");
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).expect("alpha_inv column").parse().expect("number"))
        .collect()
}

fn schedule_logs(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = entry.path();
        if p.is_dir() {
            schedule_logs(&p, out);
        } else if p.file_name().is_some_and(|n| n == "schedule.csv") && p.to_string_lossy().contains("-dmc") {
            out.push(p);
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored;
    // `--list` must print nothing so test listing stays clean.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut s = Suite::new();
    let start = Instant::now();
    say(format!("acceptance suite: main scale {:?}, auxiliary scale {:?}, {REPEATS} repeats", s.main, s.aux));

    // 6, 7, 8, 9: the fast suites first.
    {
        let fam = scalar_family();
        let (post, iters) = verify_eki_dmc_posterior(&fam, 10_000, 2024).expect("toy EKI");
        let [km, _] = verify_one_step_kalman(&fam, 10_000, 2024).expect("one-step");
        let tol = 5.0 / 100.0;
        s.report(
            6,
            post.rel_err <= tol && km.rel_err <= tol,
            format!(
                "linear-Gaussian toy J=1e4: DMC posterior mean rel err {:.2e} ({iters} iterations), one-step Kalman mean rel err {:.2e}, tol {tol}",
                post.rel_err, km.rel_err
            ),
        );
    }
    {
        let r = validate_tempering(&TemperingSettings::default()).expect("tempering suite");
        let ident = r.check("divergence_identity_linear").map(|c| c.rel_err).fold(0.0, f64::max);
        let deriv = r.check("mean_misfit_derivative_linear").map(|c| c.rel_err).fold(0.0, f64::max);
        let eps = (r.dmc_bound.max_ratio - 1.0).max(0.0);
        let pass = ident <= 1e-8 && deriv <= 1e-6 && r.dmc_bound.pass && eps <= 0.5;
        s.report(
            7,
            pass,
            format!(
                "divergence identity max rel {ident:.1e} (≤1e-8), FD derivative max rel {deriv:.1e} at dt=1e-4 (≤1e-6), max exact/(M/2) {:.3} so ε = {eps:.3} (≤0.5), approximation gap ε' = {:.3}",
                r.dmc_bound.max_ratio, r.dmc_bound.epsilon
            ),
        );
    }
    {
        let r = validate_cem(&CemValidationSettings::default()).expect("CEM suite");
        s.report(
            8,
            r.reciprocity <= 1e-8 && r.kirchhoff <= 1e-10 && r.current_sum <= 1e-10 && r.refinement <= 0.02,
            format!(
                "reciprocity {:.1e} (≤1e-8), Kirchhoff {:.1e} (≤1e-10), κ≡1 refinement {} → {} elements {:.2}% (≤2%)",
                r.reciprocity.max(0.0),
                r.kirchhoff.max(r.current_sum),
                r.elements,
                r.refined_elements,
                100.0 * r.refinement
            ),
        );
    }
    {
        let p = P1Param::new(GridGeometry::unit_square(50).expect("grid"));
        let mut u = vec![0.0; p.dim()];
        u[..3].copy_from_slice(&[0.37, 0.3, 0.45]);
        let exact = p.conductivity(&u).expect("P1").values().iter().all(|v| *v == 0.37);
        let r = validate_acf(&AcfSettings::default()).expect("ACF suite");
        let worst = r.checks.iter().map(|c| (c.empirical - c.matern).abs() / c.std_error).fold(0.0, f64::max);
        let n_pass = r.checks.iter().filter(|c| c.pass).count();
        s.report(
            9,
            exact && r.pass && r.anisotropy_monotone,
            format!(
                "ω=0 ⇒ κ=λ exactly: {exact}; ACF {n_pass}/{} lags within 3 SE (worst {worst:.2} SE, {} samples, {}×{} grid); anisotropy monotone: {}",
                r.checks.len(),
                r.settings.samples,
                r.settings.n,
                r.settings.n,
                r.anisotropy_monotone
            ),
        );
    }

    // 1, 4: Exp1 DMC at the main scale.
    let main = s.main;
    let e1 = s.dmc(main, 1, 200).clone();
    s.report(
        1,
        (8.0..=13.0).contains(&e1.n_star.mean),
        format!("Exp1 DMC J=200 ({main:?}): mean n* = {} over {} repeats (band [8,13])", e1.n_star, e1.repeats),
    );
    let m = 256f64;
    let in_band = e1.runs.iter().filter(|r| (0.5 * m.sqrt()..=2.0 * m.sqrt()).contains(&r.final_misfits.dm1)).count();
    s.report(
        4,
        in_band as f64 >= 0.8 * e1.repeats as f64,
        format!(
            "Exp1 DMC final DM1 in [8,32] for {in_band}/{} repeats (need ≥80%); DM1 = {}",
            e1.repeats, e1.dm1
        ),
    );

    // 2: Exp2 DMC at the main scale.
    let e2 = s.dmc(main, 2, 200).clone();
    s.report(
        2,
        (10.0..=18.0).contains(&e2.n_star.mean),
        format!("Exp2 DMC J=200 ({main:?}): mean n* = {} over {} repeats (band [10,18])", e2.n_star, e2.repeats),
    );

    // 5: LM(ρ = 0.8) against DMC on both experiments.
    let aux = s.aux;
    let mut ratios = Vec::new();
    for exp in [1u8, 2] {
        let d = s.dmc(aux, exp, 200).n_star.mean;
        let lm = s.lm(aux, exp, 0.8);
        ratios.push((lm.n_star.mean / d, lm.n_star, d, lm.converged));
    }
    s.report(
        5,
        ratios.iter().all(|r| r.0 >= 1.5),
        format!(
            "LM ρ=0.8 / DMC mean n* ({aux:?}): Exp1 {:.2} ({} vs {:.2}), Exp2 {:.2} ({} vs {:.2}) (need ≥1.5); LM runs converged {}/{} and {}/{}",
            ratios[0].0, ratios[0].1, ratios[0].2, ratios[1].0, ratios[1].1, ratios[1].2, ratios[0].3, REPEATS, ratios[1].3, REPEATS
        ),
    );

    // 10: error improvement and monotone decrease in J.
    let mut errs = Vec::new();
    for j in [100, 200, 400] {
        errs.push(s.dmc(aux, 1, j).final_error.mean);
    }
    let base = s.dmc(aux, 1, 200).clone();
    let improved = base.runs.iter().filter(|r| r.final_error < r.prior_error).count();
    let monotone = errs[0] > errs[1] && errs[1] > errs[2];
    s.report(
        10,
        improved as f64 >= 0.9 * base.repeats as f64 && monotone,
        format!(
            "Exp1 DMC ({aux:?}): final error below prior-estimate error in {improved}/{} repeats (need ≥90%); mean error J=100/200/400: {:.4} / {:.4} / {:.4} (strictly decreasing: {monotone})",
            base.repeats, errs[0], errs[1], errs[2]
        ),
    );

    // 3: every DMC log emitted above closes at exactly 1.
    let mut logs = Vec::new();
    schedule_logs(s.root.path(), &mut logs);
    let mut worst: f64 = 0.0;
    for p in &logs {
        let sum = read_alpha_inv(p).iter().fold(0.0, |a, b| a + b);
        worst = worst.max((sum - 1.0).abs());
    }
    let in_memory = s
        .summaries
        .iter()
        .filter(|(k, _)| k.3 == "dmc")
        .flat_map(|(_, v)| v.results.iter())
        .map(|r| (r.alpha_inv_sum - 1.0).abs())
        .fold(0.0, f64::max);
    s.report(
        3,
        !logs.is_empty() && worst == 0.0 && in_memory == 0.0,
        format!("max |Σα⁻¹ − 1| over {} emitted DMC schedule logs = {worst:e}, in memory = {in_memory:e}", logs.len()),
    );

    // Supplementary invariants (not numbered criteria).
    {
        let runs = &s.summaries[&(main, 1, 200, "dmc".to_string())].results;
        let len = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
        let med: Vec<f64> = (0..len).map(|n| median(runs.iter().map(|r| r.records[n].dm1).collect())).collect();
        let steps = med.windows(2).skip(1).count();
        let down = med.windows(2).skip(1).filter(|w| w[1] <= w[0]).count();
        say(format!(
            "invariant    {} Exp1 median DM1 trace nonincreasing after n=1 on {down}/{steps} steps (need ≥80%)",
            if steps > 0 && down as f64 >= 0.8 * steps as f64 { "PASS" } else { "FAIL" }
        ));
        let prior_mid = 0.25;
        let runs = &s.summaries[&(main, 2, 200, "dmc".to_string())].results;
        let ok = runs
            .iter()
            .filter(|r| {
                let kb = r.scalars.last().expect("trace")[1];
                (0.1..=0.4).contains(&kb) && (kb - 0.125).abs() < (prior_mid - 0.125f64).abs()
            })
            .count();
        say(format!(
            "invariant    {} Exp2 final mean κ_b closer to 0.125 than the prior mean in {ok}/{} repeats (need ≥70%)",
            if ok as f64 >= 0.7 * runs.len() as f64 { "PASS" } else { "FAIL" },
            runs.len()
        ));
    }

    let failed: Vec<usize> = s.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    say(format!(
        "acceptance summary: {}/{} criteria pass{} ({:.0} s)",
        s.results.len() - failed.len(),
        s.results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") },
        start.elapsed().as_secs_f64()
    ));
    if !failed.is_empty() && std::env::var("EKI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
