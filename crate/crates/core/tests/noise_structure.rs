//! Structural properties of simulated noise under the Fourier analysis.
//!
//! These tests run the public simulation + analysis pipeline end to end:
//! paired low/normal-dose slices come from the simulator and the analysis
//! quantities are checked against directly computed oracles and statistical
//! invariants of independent noise draws.

use ctdf_core::noise_analysis::{
    analyze_pair, cosine_corr_highfreq, highfreq_component, projection_pct, HighpassSpec,
};
use ctdf_core::sim::phantom::PhantomSpec;
use ctdf_core::sim::{gen_pair, ImageHU, SimConfig, TrainingPair};

fn desk_pair(seed: u64) -> TrainingPair {
    let spec = PhantomSpec::new(5, (-80.0, 120.0), 64, true).unwrap();
    let sim = SimConfig::default();
    gen_pair(&spec, &sim, seed).unwrap()
}

fn dot(a: &ImageHU, b: &ImageHU) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// The added noise comes from an independent random stream layered on top of
/// the normal-dose sinogram, so its high-frequency image component should be
/// statistically uncorrelated with the target noise: the per-pair cosines
/// scatter around zero and their ensemble mean stays small.
#[test]
fn target_and_added_noise_decorrelate_over_ensemble() {
    let band = HighpassSpec::default();
    let n = 24;
    let mut sum = 0.0;
    for seed in 0..n {
        let pair = desk_pair(1000 + seed);
        let cos = cosine_corr_highfreq(&pair.target_noise, &pair.added_noise, &band).unwrap();
        assert!(
            (-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos),
            "cosine out of range: {cos}"
        );
        sum += cos;
    }
    let mean = sum / n as f64;
    assert!(
        mean.abs() < 0.1,
        "mean cos(target, added) over {n} pairs is {mean}, expected near zero"
    );
}

/// A denoiser that outputs exactly the normal-dose image removes exactly the
/// added noise, so the analysis must identify it: cosine 1 and projection
/// 100% onto the added field.
#[test]
fn oracle_denoiser_removal_is_identified_exactly() {
    let band = HighpassSpec::default();
    for seed in [3u64, 4, 5] {
        let pair = desk_pair(seed);
        let report = analyze_pair(&pair, &pair.ndct, &band).unwrap();
        assert!(
            (report.cos_ra - 1.0).abs() < 1e-9,
            "cos(removed, added) = {}",
            report.cos_ra
        );
        assert!(
            (report.proj_added_pct - 100.0).abs() < 1e-9,
            "projection onto added = {}%",
            report.proj_added_pct
        );
        for cos in [report.cos_ra, report.cos_rt, report.cos_ta] {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos), "cosine {cos}");
        }
    }
}

/// A denoiser that recovers the clean phantom removes `added + target`, so
/// each projection exceeds 100% by exactly the cross-term between the two
/// noise fields. The identity is checked against directly computed inner
/// products of the band-limited fields.
#[test]
fn clean_restoring_denoiser_matches_projection_identity() {
    let band = HighpassSpec::default();
    let pair = desk_pair(42);
    let report = analyze_pair(&pair, &pair.clean, &band).unwrap();

    let ha = highfreq_component(&pair.added_noise, &band).unwrap();
    let ht = highfreq_component(&pair.target_noise, &band).unwrap();
    let expect_proj_a = 100.0 * (1.0 + dot(&ht, &ha) / dot(&ha, &ha));
    let expect_proj_t = 100.0 * (1.0 + dot(&ha, &ht) / dot(&ht, &ht));
    assert!(
        (report.proj_added_pct - expect_proj_a).abs() < 1e-6,
        "projection onto added {} vs identity {}",
        report.proj_added_pct,
        expect_proj_a
    );
    assert!(
        (report.proj_target_pct - expect_proj_t).abs() < 1e-6,
        "projection onto target {} vs identity {}",
        report.proj_target_pct,
        expect_proj_t
    );

    // Removing both noise fields leaves (nearly) nothing unexplained beyond
    // their mutual cross-term; the residual stays far below total energy.
    assert!(
        report.residual_pct < 5.0,
        "residual for the perfect denoiser is {}%",
        report.residual_pct
    );

    // Direct projection call agrees with the report.
    let removed = pair.ldct.sub(&pair.clean).unwrap();
    let again = projection_pct(&removed, &pair.added_noise, &band).unwrap();
    assert_eq!(again, report.proj_added_pct);
}

/// A denoiser that returns its input unchanged removes nothing; the analysis
/// must refuse to produce cosines for the zero field.
#[test]
fn identity_denoiser_is_degenerate() {
    let pair = desk_pair(7);
    let err = analyze_pair(&pair, &pair.ldct, &HighpassSpec::default()).unwrap_err();
    assert!(
        matches!(err, ctdf_core::error::Error::Degenerate(_)),
        "unexpected error: {err}"
    );
}
