use eki_core::ensemble::{eki_update, ensemble_mean, Ensemble, EvaluationBatch, Observation, PerturbMode};
use eki_core::experiments::data_misfits;
use eki_core::schedules::{compute_misfits, dmc_step, TemperingState};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_rows(rng: &mut ChaCha8Rng, j: usize, d: usize) -> Vec<Vec<f64>> {
    let nd = Normal::new(0.0, 1.0).unwrap();
    (0..j).map(|_| (0..d).map(|_| nd.sample(rng)).collect()).collect()
}

/// Distance of `v` from the column span of `basis`, relative to ‖v‖.
fn span_residual(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let svd = basis.clone().svd(true, false);
    let u = svd.u.unwrap();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
    let q = u.columns(0, rank);
    let proj = &q * (q.transpose() * v);
    (v - proj).norm() / v.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Particles never leave the span of the initial ensemble, for any
    /// nonlinear forward map.
    #[test]
    fn subspace_property(seed in 0u64..1000, alpha in 0.2f64..20.0, steps in 1usize..4) {
        let (j, d, m) = (5, 12, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, j, d);
        let basis = DMatrix::from_fn(d, j, |r, c| rows[c][r]);
        let g = |u: &[f64]| -> Vec<f64> {
            (0..m).map(|k| u.iter().enumerate().map(|(i, x)| ((i + k) as f64 * 0.3).sin() * x).sum::<f64>().tanh() + 0.1 * u[k] * u[k]).collect()
        };
        let obs = Observation::new(vec![0.3, -0.2, 0.5, 0.1], vec![0.05; m]).unwrap();
        let mut e = Ensemble::from_rows(rows).unwrap();
        for _ in 0..steps {
            let batch = EvaluationBatch::new(e.particles().iter().map(|p| g(p.as_slice())).collect()).unwrap();
            e = eki_update(&e, &batch, &obs, alpha, &mut rng, PerturbMode::PerParticle).unwrap();
        }
        for p in e.particles() {
            let v = DVector::from_column_slice(p.as_slice());
            prop_assert!(span_residual(&basis, &v) < 1e-9);
        }
        let mean = DVector::from_column_slice(ensemble_mean(&e).as_slice());
        prop_assert!(span_residual(&basis, &mean) < 1e-9);
    }

    /// After every DMC step at least one of 2α⁻¹Φ̄ ≤ M or 4α⁻²σ² ≤ 2M holds,
    /// and the increments close the schedule at exactly 1.
    #[test]
    fn dmc_discrepancy_conditions(seed in 0u64..10_000, scale in -3.0f64..8.0, m in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut state = TemperingState::new();
        let mut sum = 0.0;
        for step in 0..200 {
            let base = 10f64.powf(scale - step as f64 * 0.5);
            let g: Vec<Vec<f64>> = (0..20).map(|_| vec![base * (1.0f64 + 0.5 * nd.sample(&mut rng)).abs()]).collect();
            let obs = Observation::new(vec![0.0], vec![1.0 / m as f64]).unwrap();
            let stats = compute_misfits(&EvaluationBatch::new(g).unwrap(), &obs).unwrap();
            let (a, done) = dmc_step(&stats, m, &mut state).unwrap();
            let mf = m as f64;
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(done || 2.0 * a * stats.mean <= mf * (1.0 + 1e-12) || 4.0 * a * a * stats.variance <= 2.0 * mf * (1.0 + 1e-12));
            sum += a;
            if done { break; }
        }
        prop_assert_eq!(state.t(), 1.0);
        prop_assert!((sum - 1.0f64).abs() < 1e-12);
    }

    /// DM₃ ≥ DM₁ (Jensen) on random batches.
    #[test]
    fn jensen_between_misfits(seed in 0u64..10_000, j in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, j, 6);
        let batch = EvaluationBatch::new(rows).unwrap();
        let obs = Observation::new(vec![0.5; 6], vec![0.2, 0.3, 0.1, 1.0, 2.0, 0.5]).unwrap();
        let d = data_misfits(&batch, batch.mean(), &obs);
        prop_assert!(d.dm3 >= d.dm1 * (1.0 - 1e-12));
        prop_assert!((d.dm1 - d.dm2).abs() < 1e-12 * d.dm1.max(1.0));
    }
}

#[test]
fn empirical_noise_whitening_is_chi_square() {
    let obs = Observation::new(vec![0.0; 3], vec![4.0, 0.25, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let n = 20_000;
    let mean: f64 = (0..n)
        .map(|_| {
            let eta: Vec<f64> = obs.gamma_diag().iter().map(|g| g.sqrt() * nd.sample(&mut rng)).collect();
            obs.whitened_sq(&eta)
        })
        .sum::<f64>()
        / n as f64;
    assert!((mean - 3.0).abs() < 3.0 * (6.0f64 / n as f64).sqrt());
}
