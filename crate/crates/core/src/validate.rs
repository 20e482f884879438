//! Self-validation suite.
//!
//! Re-derives the numerical identities the lab rests on and checks them
//! against their sampling oracles: Haar fourth moments, pseudoinverse Gram
//! expectations, projector second moments, the Gaussian sandwich trace, the
//! two ridge construction routes, the closed-form decomposition identity,
//! and closed form versus simulation on smoke cells. Each check reports a
//! statistic, its tolerance and a verdict; the command line turns any
//! failure into a non-zero exit.

use nalgebra::{DMatrix, DVector};

use crate::analytic::{breakdown_pinv, Regime};
use crate::estimator::build_misspecified;
use crate::model::{sample_features, FeatureSet, ProblemConfig};
use crate::montecarlo::{run_cell, FeatureCovSource, SamplingMode};
use crate::rmt::{
    expected_pinv_gram_trace, haar_fourth_moments, q_expectation, sample_gaussian_sandwich,
    sample_haar_fourth_moments, sample_pinv_gram_trace, sample_q_expectation, HaarFourthMoments,
};
use crate::stream::StreamKey;

/// Outcome of one check: `statistic <= tolerance` means pass.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: impl Into<String>, statistic: f64, tolerance: f64) -> Self {
        let statistic = if statistic.is_finite() {
            statistic
        } else {
            f64::INFINITY
        };
        CheckReport {
            name: name.into(),
            statistic,
            tolerance,
            passed: statistic <= tolerance,
        }
    }
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Validation profile. `quick` cuts draw counts for an under-10-second run
/// and loosens the sampling tolerances accordingly.
#[derive(Clone, Copy, Debug)]
pub struct ValidationOptions {
    pub master_seed: u64,
    pub quick: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            master_seed: 0xC0FF_EE00,
            quick: false,
        }
    }
}

/// Haar fourth-moment checks against the supplied expected values. The
/// expectations are a parameter so a deliberately perturbed value must fail.
pub fn check_haar_moments(
    expected: &HaarFourthMoments<f64>,
    p: usize,
    draws: usize,
    tol_sigmas: f64,
    key: StreamKey,
) -> Vec<CheckReport> {
    let (m4, m22, mx) = sample_haar_fourth_moments::<f64, _>(p, draws, &mut key.rng());
    vec![
        CheckReport::new(
            format!("haar_m4_p{p}"),
            m4.sigmas_from(expected.m4),
            tol_sigmas,
        ),
        CheckReport::new(
            format!("haar_m22_p{p}"),
            m22.sigmas_from(expected.m22),
            tol_sigmas,
        ),
        CheckReport::new(
            format!("haar_mcross_p{p}"),
            mx.sigmas_from(expected.m_cross),
            tol_sigmas,
        ),
    ]
}

fn check_pinv_gram(draws: usize, tol_sigmas: f64, key: StreamKey) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for (k, (n, p_bar)) in [(10usize, 4usize), (4, 10)].into_iter().enumerate() {
        let want = expected_pinv_gram_trace::<f64>(n, p_bar).expect("off-threshold shapes");
        let est = sample_pinv_gram_trace::<f64, _>(n, p_bar, draws, &mut key.child(k as u64).rng());
        out.push(CheckReport::new(
            format!("pinv_gram_trace_n{n}_p{p_bar}"),
            est.sigmas_from(want),
            tol_sigmas,
        ));
    }
    out
}

fn check_projector_moments(draws: usize, tol_sigmas: f64, key: StreamKey) -> Vec<CheckReport> {
    let (n, p, p_s) = (5usize, 12usize, 4usize);
    let want = q_expectation::<f64>(n, p, p_s).expect("hypotheses hold");
    let got = sample_q_expectation::<f64, _>(n, p, p_s, draws, &mut key.rng());
    vec![
        CheckReport::new("projector_mu_q", got.mu_q.sigmas_from(want.mu_q), tol_sigmas),
        CheckReport::new(
            "projector_mu_qbar",
            got.mu_qbar.sigmas_from(want.mu_qbar),
            tol_sigmas,
        ),
        CheckReport::new("projector_offdiag", got.max_offdiag_sigmas, tol_sigmas),
    ]
}

fn check_sandwich(draws: usize, tol_sigmas: f64, key: StreamKey) -> CheckReport {
    let k = DMatrix::<f64>::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
    let n = 4;
    let (mean, se) = sample_gaussian_sandwich(&k, n, draws, &mut key.rng());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 6.0 } else { 0.0 };
            if se[(i, j)] > 0.0 {
                worst = worst.max((mean[(i, j)] - want).abs() / se[(i, j)]);
            }
        }
    }
    CheckReport::new("gaussian_sandwich_trace", worst, tol_sigmas)
}

/// Relative disagreement between the SVD construction and the two
/// normal-equation routes across random shapes spanning both regimes and
/// the square case.
fn check_ridge_routes(key: StreamKey) -> CheckReport {
    let shapes: Vec<(usize, usize)> = {
        let mut rng_state = 0x1234_5678_9abc_def0u64;
        let mut next = move |hi: u64| {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % hi) as usize
        };
        let mut v = Vec::new();
        for _ in 0..6 {
            let n = 6 + next(20);
            v.push((n, n + 3 + next(15))); // wide
            v.push((n + 3 + next(15), n)); // tall
        }
        for _ in 0..8 {
            let n = 5 + next(20);
            v.push((n, n)); // square
        }
        v
    };
    let mut worst: f64 = 0.0;
    for (k, &(n, p_bar)) in shapes.iter().enumerate() {
        let cfg = ProblemConfig::isotropic(p_bar, 0, 0, n, 1.0, 0.0);
        let features =
            sample_features(&cfg, None, &mut key.child(k as u64).rng()).expect("valid config");
        let abar = features.abar();
        for sigma_hat2 in [0.1, 1.0, 10.0] {
            let est = build_misspecified(&features, sigma_hat2).expect("finite ridge");
            let route_n = {
                let lhs = &abar * abar.transpose()
                    + DMatrix::<f64>::identity(n, n).scale(sigma_hat2);
                lhs.lu().solve(&abar).expect("spd").transpose()
            };
            let route_p = {
                let lhs = abar.transpose() * &abar
                    + DMatrix::<f64>::identity(p_bar, p_bar).scale(sigma_hat2);
                lhs.lu().solve(&abar.transpose()).expect("spd")
            };
            let denom = route_n.norm();
            worst = worst.max((est.w_bar() - &route_n).norm() / denom);
            worst = worst.max((est.w_bar() - &route_p).norm() / denom);
        }
    }
    CheckReport::new("ridge_construction_routes", worst, 1e-8)
}

/// Interpolation at the threshold: with `p_bar = n` and zero assumed noise
/// the model reproduces the observations.
fn check_interpolation(key: StreamKey) -> CheckReport {
    let n = 30;
    let cfg = ProblemConfig::isotropic(n, 0, 0, n, 1.0, 0.0);
    let features = sample_features(&cfg, None, &mut key.rng()).expect("valid config");
    let est = build_misspecified(&features, 0.0).expect("pinv");
    let y = DVector::<f64>::from_fn(n, |i, _| ((i + 1) as f64).sin());
    let resid = (features.abar() * (est.w_bar() * &y) - &y).norm() / y.norm();
    CheckReport::new("interpolation_residual", resid, 1e-6)
}

/// The decomposition identity `eps + eps_F + sigma_v2 = eps_y` over random
/// cells in both regimes.
fn check_decomposition_identity(cells: usize) -> CheckReport {
    let mut state = 0xdead_beef_cafe_f00du64;
    let mut next = move |hi: u64| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state % hi
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    while checked < cells {
        let p_s = next(300) as usize;
        let p_f = next(600) as usize;
        let n = 1 + next(600) as usize;
        if Regime::of(n, p_s + p_f) == Regime::NearThreshold {
            continue;
        }
        let tr_s = next(1000) as f64 / 7.0;
        let tr_c = next(1000) as f64 / 11.0;
        let sv2 = next(1000) as f64 / 13.0;
        let b = breakdown_pinv(p_s, p_f, n, tr_s, tr_c, sv2).expect("off-threshold");
        let lhs = b.eps + b.eps_f + sv2;
        worst = worst.max((lhs - b.eps_y).abs() / b.eps_y.abs().max(1.0));
        checked += 1;
    }
    CheckReport::new("decomposition_identity", worst, 1e-12)
}

/// Closed form versus simulation on two smoke cells (one per regime).
fn check_closed_form_vs_simulation(
    m_r: usize,
    m_u: usize,
    tol_sigmas: f64,
    key: StreamKey,
) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for (k, p_f) in [0usize, 50].into_iter().enumerate() {
        let cfg: ProblemConfig<f64> = ProblemConfig::isotropic(20, 0, p_f, 40, 4.0, 0.0);
        let want = breakdown_pinv::<f64>(20, p_f, 40, 20.0, 0.0, 4.0)
            .expect("off-threshold")
            .eps;
        let cell = run_cell(
            &cfg,
            m_r,
            m_u,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            key.child(k as u64),
        )
        .expect("valid cell");
        let se = cell.eps_se.expect("m_r >= 2");
        out.push(CheckReport::new(
            format!("closed_form_vs_simulation_pf{p_f}"),
            (cell.eps_hat - want).abs() / se,
            tol_sigmas,
        ));
    }
    out
}

/// Spectrum sanity: eigenvalues of the Gram matrix agree between the two
/// Gram orientations.
fn check_spectrum_symmetry(key: StreamKey) -> CheckReport {
    let features = {
        let cfg = ProblemConfig::isotropic(9, 0, 0, 6, 1.0, 0.0);
        sample_features(&cfg, None, &mut key.rng()).expect("valid config")
    };
    let a: &FeatureSet<f64> = &features;
    let s1 = a.abar().singular_values();
    let s2 = a.abar().transpose().singular_values();
    let mut v1: Vec<f64> = s1.iter().map(|s| s * s).collect();
    let mut v2: Vec<f64> = s2.iter().map(|s| s * s).collect();
    v1.sort_by(|x, y| y.partial_cmp(x).unwrap());
    v2.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        worst = worst.max((v1[i] - v2[i]).abs() / v1[i]);
    }
    CheckReport::new("spectrum_symmetry", worst, 1e-8)
}

/// Run the full suite.
pub fn run_validation(opts: &ValidationOptions) -> Vec<CheckReport> {
    let key = StreamKey::root(opts.master_seed);
    let (haar_draws, gram_draws, q_draws, sandwich_draws, m_r, m_u, sigmas) = if opts.quick {
        (10_000, 2_000, 8_000, 10_000, 25, 25, 4.0)
    } else {
        (100_000, 10_000, 100_000, 100_000, 80, 60, 3.0)
    };
    let mut reports = Vec::new();
    let expected = haar_fourth_moments::<f64>(8).expect("p > 1");
    reports.extend(check_haar_moments(&expected, 8, haar_draws, sigmas, key.child(1)));
    reports.extend(check_pinv_gram(gram_draws, sigmas, key.child(2)));
    reports.extend(check_projector_moments(q_draws, sigmas, key.child(3)));
    reports.push(check_sandwich(sandwich_draws, sigmas, key.child(4)));
    reports.push(check_ridge_routes(key.child(5)));
    reports.push(check_interpolation(key.child(6)));
    reports.push(check_decomposition_identity(if opts.quick { 200 } else { 1000 }));
    reports.extend(check_closed_form_vs_simulation(m_r, m_u, sigmas, key.child(7)));
    reports.push(check_spectrum_symmetry(key.child(8)));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let reports = run_validation(&ValidationOptions {
            quick: true,
            ..Default::default()
        });
        for r in &reports {
            assert!(
                r.passed,
                "{}: statistic {} exceeds tolerance {}",
                r.name, r.statistic, r.tolerance
            );
        }
    }

    #[test]
    fn perturbed_expectation_fails() {
        // Flipping the sign of the cross moment must be caught.
        let mut expected = haar_fourth_moments::<f64>(8).unwrap();
        expected.m_cross = -expected.m_cross;
        let reports = check_haar_moments(
            &expected,
            8,
            10_000,
            4.0,
            StreamKey::root(0xC0FF_EE00).child(1),
        );
        assert!(reports.iter().any(|r| !r.passed));
        assert!(!all_passed(&reports));
    }
}
