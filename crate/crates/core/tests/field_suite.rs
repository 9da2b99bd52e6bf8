use eki_core::fields::{validate_acf, AcfSettings, GridGeometry, P1Param};
use eki_core::param::Parameterisation;
use proptest::prelude::*;

#[test]
fn zero_noise_maps_to_lambda_exactly() {
    let p = P1Param::new(GridGeometry::unit_square(40).unwrap());
    for (lambda, l1, l2) in [(0.005, 0.15, 0.6), (0.37, 0.3, 0.3), (1.0, 0.6, 0.15)] {
        let mut u = vec![0.0; p.dim()];
        u[..3].copy_from_slice(&[lambda, l1, l2]);
        assert!(p.conductivity(&u).unwrap().values().iter().all(|v| *v == lambda));
    }
}

#[test]
fn monte_carlo_acf_matches_matern() {
    let r = validate_acf(&AcfSettings::default()).unwrap();
    assert_eq!(r.settings.samples, 2000);
    assert_eq!(r.settings.n, 50);
    for c in &r.checks {
        assert!(c.pass, "axis {} lag {}: empirical {} matern {} se {}", c.axis, c.lag_cells, c.empirical, c.matern, c.std_error);
    }
    assert!(r.anisotropy_monotone);
    assert!((r.variance_ratio - 1.0).abs() < 0.15, "variance ratio {}", r.variance_ratio);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Conductivities are positive and scale linearly with λ.
    #[test]
    fn p1_positive_and_linear_in_lambda(seed in 0u64..1000, lambda in 0.005f64..0.5) {
        use rand::SeedableRng;
        let p = P1Param::new(GridGeometry::unit_square(16).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = p.sample_prior(1 + 1, &mut rng).unwrap();
        let mut u = e.particle(0).as_slice().to_vec();
        u[0] = lambda;
        let a = p.conductivity(&u).unwrap();
        u[0] = 2.0 * lambda;
        let b = p.conductivity(&u).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!(*x > 0.0);
            prop_assert!((2.0 * x - y).abs() <= 1e-12 * y);
        }
    }
}
