use statrs::function::gamma::gamma;

use super::WmHyper;

/// Modified Bessel function of the second kind, K_ν(x) for x > 0.
///
/// Trapezoid rule on ∫₀^∞ exp(−x cosh t) cosh(νt) dt, which converges
/// geometrically because the integrand is analytic in a strip.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k needs x > 0");
    let nu = nu.abs();
    let step = 0.02;
    // The log-integrand ν t − x cosh t peaks at sinh t = ν/x.
    let peak = (nu / x).asinh();
    let log_peak = nu * peak - x * peak.cosh();
    let f = |t: f64| (-x * t.cosh() + nu * t - log_peak).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
    let mut sum = 0.5 * f(0.0);
    let mut k = 1usize;
    loop {
        let t = k as f64 * step;
        let v = f(t);
        sum += v;
        if t > peak && v < 1e-18 * sum {
            break;
        }
        k += 1;
    }
    sum * step * log_peak.exp()
}

/// Matérn autocorrelation σ² 2^{1−ν}/Γ(ν) r^ν K_ν(r) at lag `x`, with
/// r = √(x₁²/L₁² + x₂²/L₂²).
pub fn matern_acf(x: [f64; 2], h: &WmHyper) -> f64 {
    let r = ((x[0] / h.l1).powi(2) + (x[1] / h.l2).powi(2)).sqrt();
    let s2 = h.sigma * h.sigma;
    if r < 1e-12 {
        return s2;
    }
    let log_val = (1.0 - h.nu) * 2f64.ln() - gamma(h.nu).ln() + h.nu * r.ln() + bessel_k(h.nu, r).ln();
    s2 * log_val.exp()
}
