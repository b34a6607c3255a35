//! Dose-dependent projection noise.
//!
//! Quantum noise is simulated in the counts domain: a detector sample with
//! line integral `p` sees `m ~ Poisson(dose*I0*exp(-p))` photons and is read
//! back as `ln(dose*I0 / max(m, 1))`. The low-dose sinogram is then built
//! from the normal-dose one by adding the *incremental* noise (delta-method
//! Gaussian), which keeps the inherited-plus-added decomposition exact.
//!
//! Every sample draws from its own seed-derived stream, so results are
//! independent of traversal order.

use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::sim::Sinogram;

/// Simulates photon-counting noise at a dose fraction of the full-dose `i0`.
///
/// Per sample with line integral `p`: `m ~ Poisson(fraction*i0*e^(-p))`, and
/// the returned integral is `ln(fraction*i0 / max(m, 1))` (the clamp avoids
/// infinities under photon starvation). Deterministic given `seed`.
pub fn insert_noise(sino: &Sinogram, i0: f64, dose_fraction: f64, seed: u64) -> Result<Sinogram> {
    if !i0.is_finite() || i0 <= 0.0 {
        return Err(Error::Config(format!("i0 must be positive, got {i0}")));
    }
    if !dose_fraction.is_finite() || dose_fraction <= 0.0 || dose_fraction > 1.0 {
        return Err(Error::Config(format!(
            "dose fraction must lie in (0, 1], got {dose_fraction}"
        )));
    }
    let dose = dose_fraction * i0;
    let mut data = Vec::with_capacity(sino.data().len());
    for (k, &p) in sino.data().iter().enumerate() {
        let lambda = dose * (-p).exp();
        let mut rng = stream(seed, StreamTag::NoiseNdct, k as u64);
        let m: f64 = Poisson::new(lambda)
            .map_err(|e| Error::Config(format!("invalid Poisson rate {lambda}: {e}")))?
            .sample(&mut rng);
        data.push((dose / m.max(1.0)).ln());
    }
    Sinogram::new(sino.n_angles(), sino.n_det(), data)
}

/// Builds the low-dose sinogram by adding incremental noise to the
/// normal-dose sinogram.
///
/// The extra variance of a `fraction`-dose measurement over a full-dose one
/// is, to first order, `e^p * (1/(fraction*i0) - 1/i0)` with `p` the clean
/// line integral; a zero-mean Gaussian with exactly that variance is added
/// per sample. Deterministic given `seed`.
pub fn make_ldct_from_ndct(
    ndct_sino: &Sinogram,
    clean_sino: &Sinogram,
    i0: f64,
    fraction: f64,
    seed: u64,
) -> Result<Sinogram> {
    if ndct_sino.n_angles() != clean_sino.n_angles() || ndct_sino.n_det() != clean_sino.n_det() {
        return Err(Error::Shape(format!(
            "sinogram shapes differ: {}x{} vs {}x{}",
            ndct_sino.n_angles(),
            ndct_sino.n_det(),
            clean_sino.n_angles(),
            clean_sino.n_det()
        )));
    }
    if !i0.is_finite() || i0 <= 0.0 {
        return Err(Error::Config(format!("i0 must be positive, got {i0}")));
    }
    if !fraction.is_finite() || fraction <= 0.0 || fraction >= 1.0 {
        return Err(Error::Config(format!(
            "dose fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let var_scale = 1.0 / (fraction * i0) - 1.0 / i0;
    let mut data = Vec::with_capacity(ndct_sino.data().len());
    for (k, (&nd, &cl)) in ndct_sino.data().iter().zip(clean_sino.data()).enumerate() {
        let sigma = (cl.exp() * var_scale).max(0.0).sqrt();
        let mut rng = stream(seed, StreamTag::NoiseLdct, k as u64);
        let delta: f64 = Normal::new(0.0, sigma)
            .map_err(|e| Error::Config(format!("invalid noise deviation {sigma}: {e}")))?
            .sample(&mut rng);
        data.push(nd + delta);
    }
    Sinogram::new(ndct_sino.n_angles(), ndct_sino.n_det(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_sino(n: usize, p: f64) -> Sinogram {
        Sinogram::new(1, n, vec![p; n]).unwrap()
    }

    fn sample_mean_var(data: &[f64]) -> (f64, f64) {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn validates_parameters() {
        let s = constant_sino(4, 1.0);
        assert!(matches!(insert_noise(&s, 0.0, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(insert_noise(&s, 1e5, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(insert_noise(&s, 1e5, 1.5, 1), Err(Error::Config(_))));
        assert!(matches!(make_ldct_from_ndct(&s, &s, 1e5, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(make_ldct_from_ndct(&s, &s, -1.0, 0.5, 1), Err(Error::Config(_))));
        let other = constant_sino(5, 1.0);
        assert!(matches!(
            make_ldct_from_ndct(&s, &other, 1e5, 0.5, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn determinism_and_stream_independence() {
        let s = constant_sino(64, 1.2);
        let a = insert_noise(&s, 1e5, 1.0, 9).unwrap();
        let b = insert_noise(&s, 1e5, 1.0, 9).unwrap();
        assert_eq!(a, b);
        let c = insert_noise(&s, 1e5, 1.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn huge_dose_is_effectively_noiseless() {
        let s = constant_sino(256, 2.0);
        let noisy = insert_noise(&s, 1e12, 1.0, 3).unwrap();
        for (a, b) in noisy.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-4, "noiseless limit violated: {a} vs {b}");
        }
    }

    #[test]
    fn insert_noise_variance_matches_delta_method() {
        // Var(p_hat) ~ e^p/(fraction*i0) to first order.
        let p = 1.0;
        let i0 = 1e5;
        let n = 100_000;
        let s = constant_sino(n, p);

        let full = insert_noise(&s, i0, 1.0, 7).unwrap();
        let (_, var_full) = sample_mean_var(full.data());
        let expect_full = p.exp() / i0;
        assert!(
            (var_full - expect_full).abs() < 0.05 * expect_full,
            "full dose variance {var_full} vs {expect_full}"
        );

        let quarter = insert_noise(&s, i0, 0.25, 8).unwrap();
        let (_, var_quarter) = sample_mean_var(quarter.data());
        assert!(
            (var_quarter - 4.0 * expect_full).abs() < 0.05 * 4.0 * expect_full,
            "quarter dose variance {var_quarter} vs {}",
            4.0 * expect_full
        );
    }

    #[test]
    fn insert_noise_preserves_the_mean() {
        // Unbiased up to the second-order log correction e^p/(2*i0); compare
        // against 3 standard errors plus that known bias bound.
        let p = 0.5;
        let i0 = 1e6;
        let n = 100_000;
        let s = constant_sino(n, p);
        let noisy = insert_noise(&s, i0, 1.0, 12).unwrap();
        let (mean, var) = sample_mean_var(noisy.data());
        let se = (var / n as f64).sqrt();
        let log_bias = p.exp() / (2.0 * i0);
        assert!(
            (mean - p).abs() < 3.0 * se + log_bias,
            "mean {mean} vs {p} (3se {}, bias bound {log_bias})",
            3.0 * se
        );
    }

    #[test]
    fn near_full_fraction_adds_no_noise() {
        let clean = constant_sino(128, 1.0);
        let ndct = insert_noise(&clean, 1e5, 1.0, 2).unwrap();
        let ldct = make_ldct_from_ndct(&ndct, &clean, 1e5, 1.0 - 1e-12, 4).unwrap();
        for (a, b) in ldct.data().iter().zip(ndct.data()) {
            assert!((a - b).abs() < 1e-6, "fraction->1 limit violated: {a} vs {b}");
        }
    }

    #[test]
    fn incremental_noise_variance_matches_delta_method() {
        // sigma^2 = e^p*(1/(f*i0) - 1/i0) = 3e/1e5 at p=1, i0=1e5, f=0.25.
        let p = 1.0;
        let i0 = 1e5;
        let n = 100_000;
        let clean = constant_sino(n, p);
        let ldct = make_ldct_from_ndct(&clean, &clean, i0, 0.25, 6).unwrap();
        let deltas: Vec<f64> = ldct.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let (mean, var) = sample_mean_var(&deltas);
        let expect = p.exp() * 3.0 / i0;
        assert!((var - expect).abs() < 0.05 * expect, "variance {var} vs {expect}");
        assert!(mean.abs() < 3.0 * (expect / n as f64).sqrt() + 1e-9, "mean {mean} not ~0");
    }

    #[test]
    fn total_low_dose_variance_is_additive() {
        // Independent streams: Var(ldct - clean) = e^p/i0 + e^p*3/i0 = e^p/(0.25*i0).
        let p = 1.0;
        let i0 = 1e5;
        let n = 100_000;
        let clean = constant_sino(n, p);
        let ndct = insert_noise(&clean, i0, 1.0, 15).unwrap();
        let ldct = make_ldct_from_ndct(&ndct, &clean, i0, 0.25, 15).unwrap();
        let total: Vec<f64> = ldct.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let (_, var) = sample_mean_var(&total);
        let expect = p.exp() / (0.25 * i0);
        assert!(
            (var - expect).abs() < 0.07 * expect,
            "total variance {var} vs {expect}"
        );
    }
}
