//! Simulation protocols.
//!
//! The empirical expected MSE of a cell is estimated by drawing `M_r`
//! realizations of the feature matrices, building the estimator once per
//! realization, averaging squared errors over `M_u` draws of the unknowns
//! and noise, and then averaging across realizations:
//!
//! `eps_hat = (1/M_r) sum_i (1/M_u) sum_j (||x_S - x_S_hat||^2 + ||x_C||^2)`.
//!
//! `ConditionalTrace` mode replaces the inner average with the exact
//! feature-conditional expectation (a Rao-Blackwellized estimate); it is
//! available only for isotropic features, where that expectation is in
//! closed form.
//!
//! Each sweep pairs the empirical numbers with the matching analytic
//! prediction where one exists: the pseudoinverse closed forms at zero
//! assumed noise, or the ridge form with sampled spectral moments otherwise.
//! Cells inside the threshold band are still simulated but tagged
//! `near_threshold` with no analytic value.
//!
//! Determinism: every (cell, realization, purpose) tuple owns a counter-based
//! stream and reductions run in fixed order, so results are bit-identical
//! for a given master seed regardless of the worker count.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analytic::{
    breakdown_pinv, expected_mse_ridge, optimal_assumed_noise, Regime,
};
use crate::error::{Error, Result};
use crate::estimator::{build_misspecified, conditional_mse, estimate};
use crate::model::{
    generate_observations, sample_features, sample_unknowns, Covariance, CovarianceSpec,
    FeatureSet, ProblemConfig, UnknownsDraw,
};
use crate::rmt::estimate_moments;
use crate::scalar::Scalar;
use crate::stats::Welford;
use crate::stream::{domain, StreamKey};

/// Which quantity a sweep varies.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis<T> {
    /// Number of fake features.
    FakeCount(Vec<usize>),
    /// Assumed noise variance of the estimator.
    AssumedNoise(Vec<T>),
    /// Number of observations.
    SampleCount(Vec<usize>),
}

impl<T: Scalar> SweepAxis<T> {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::FakeCount(v) => v.len(),
            SweepAxis::AssumedNoise(v) => v.len(),
            SweepAxis::SampleCount(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strictly_increasing(&self) -> bool {
        fn check<U: PartialOrd>(v: &[U]) -> bool {
            v.windows(2).all(|w| w[0] < w[1])
        }
        match self {
            SweepAxis::FakeCount(v) => check(v),
            SweepAxis::AssumedNoise(v) => check(v),
            SweepAxis::SampleCount(v) => check(v),
        }
    }
}

/// Inner-loop strategy of [`run_cell`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Sample `M_u` draws of unknowns and noise per feature realization.
    FullSampling,
    /// Exact inner expectation via the feature-conditional trace formulas.
    ConditionalTrace,
}

/// Whether structured feature covariances are drawn once per experiment or
/// redrawn for every feature realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceSeedPolicy {
    FixedPerExperiment,
    RedrawPerRealization,
}

/// Decay exponents for the structured-covariance experiment: the rows of
/// `[A_S, A_C]` get a Haar-rotated spectrum with exponent `alpha`, the rows
/// of `A_F` one with exponent `alpha_f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureDecay<T> {
    pub alpha: T,
    pub alpha_f: T,
}

impl<T: Scalar> FeatureDecay<T> {
    /// The closed forms assume isotropic features; a zero-decay pair keeps
    /// them applicable.
    fn is_isotropic(&self) -> bool {
        self.alpha == T::zero() && self.alpha_f == T::zero()
    }
}

/// A full sweep description.
#[derive(Clone, Debug)]
pub struct SweepPlan<T> {
    pub base: ProblemConfig<T>,
    pub axis: SweepAxis<T>,
    pub m_r: usize,
    pub m_u: usize,
    pub mode: SamplingMode,
    pub master_seed: u64,
    /// Distinguishes concurrent experiments (e.g. covariance pairs) sharing
    /// one master seed.
    pub experiment_index: u64,
    pub feature_decay: Option<FeatureDecay<T>>,
    pub cov_seed_policy: CovarianceSeedPolicy,
    /// Held-out pairs per realization for the output-MSE estimate; 0 skips
    /// the held-out pass.
    pub test_points: usize,
    /// Spectra for the ridge-form analytic pairing; 0 skips that pairing.
    pub num_spectra: usize,
}

impl<T: Scalar> SweepPlan<T> {
    /// Plan with the protocol defaults: `M_r = M_u = 100`, full sampling,
    /// fixed-per-experiment covariances, 200 spectra for moment estimation.
    pub fn new(base: ProblemConfig<T>, axis: SweepAxis<T>) -> Self {
        SweepPlan {
            base,
            axis,
            m_r: 100,
            m_u: 100,
            mode: SamplingMode::FullSampling,
            master_seed: 0,
            experiment_index: 0,
            feature_decay: None,
            cov_seed_policy: CovarianceSeedPolicy::FixedPerExperiment,
            test_points: 0,
            num_spectra: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.m_r < 1 {
            return Err(Error::InvalidSpec("M_r must be >= 1".into()));
        }
        if self.mode == SamplingMode::FullSampling && self.m_u < 1 {
            return Err(Error::InvalidSpec("M_u must be >= 1 for full sampling".into()));
        }
        if !self.axis.strictly_increasing() {
            return Err(Error::InvalidSpec("axis values must be strictly increasing".into()));
        }
        if self.mode == SamplingMode::ConditionalTrace {
            if let Some(d) = &self.feature_decay {
                if !d.is_isotropic() {
                    return Err(Error::Unsupported(
                        "conditional-trace mode requires isotropic features".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Where a cell's feature covariances come from.
pub enum FeatureCovSource<'a, T> {
    /// Standard Gaussian entries.
    Isotropic,
    /// Fixed materialized covariances shared by all realizations.
    Fixed(&'a Covariance<T>, &'a Covariance<T>),
    /// Specs materialized afresh for each realization.
    PerRealization(CovarianceSpec<T>, CovarianceSpec<T>),
}

/// Empirical estimates for one cell.
#[derive(Clone, Debug)]
pub struct CellOutcome<T> {
    /// `eps_hat = eps_s_hat + eps_c_hat` by construction.
    pub eps_hat: T,
    pub eps_se: Option<T>,
    pub eps_s_hat: T,
    pub eps_c_hat: T,
    pub eps_f_hat: T,
    pub eps_f_se: Option<T>,
    /// Held-out output MSE (present when evaluated).
    pub eps_y_hat: Option<T>,
    pub eps_y_se: Option<T>,
    /// Mean and standard error of the per-realization gap
    /// `J_y - (J + J_F + sigma_v2)`.
    pub identity_gap: Option<T>,
    pub identity_gap_se: Option<T>,
    pub m_r: usize,
    pub m_u: usize,
    pub mode: SamplingMode,
    pub wall: Duration,
}

/// Analytic prediction paired with a cell.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticPrediction<T> {
    pub eps: T,
    /// Error bar propagated from sampled moments; zero for closed forms.
    pub eps_se: T,
    pub eps_f: Option<T>,
    pub eps_y: Option<T>,
    pub formula: &'static str,
}

/// One row of a sweep: the resolved cell configuration, the empirical
/// outcome, and the analytic prediction when one applies.
#[derive(Clone, Debug)]
pub struct SweepRow<T> {
    pub config: ProblemConfig<T>,
    pub cell: CellOutcome<T>,
    pub analytic: Option<AnalyticPrediction<T>>,
    pub regime: Regime,
}

#[derive(Clone, Debug)]
pub struct SweepResult<T> {
    pub rows: Vec<SweepRow<T>>,
}

/// Per-realization averages.
struct Realization<T> {
    j_s: T,
    j_c: T,
    j_f: T,
    j_y: Option<T>,
}

fn materialize_or_empty<T: Scalar, R: rand::Rng + ?Sized>(
    spec: &CovarianceSpec<T>,
    rng: &mut R,
) -> Result<Covariance<T>> {
    if spec.dim == 0 {
        Ok(Covariance::empty())
    } else {
        spec.materialize(rng)
    }
}

/// Run one experiment cell.
///
/// `key` is the cell's stream node; realization `i` draws features from
/// `key / FEATURES / i`, unknowns from `key / UNKNOWNS / i` and held-out
/// pairs from `key / HELD_OUT / i`, so the outcome does not depend on the
/// evaluation order. Realizations run in parallel and are reduced in index
/// order.
pub fn run_cell<T: Scalar>(
    config: &ProblemConfig<T>,
    m_r: usize,
    m_u: usize,
    mode: SamplingMode,
    feature_cov: &FeatureCovSource<'_, T>,
    test_points: usize,
    key: StreamKey,
) -> Result<CellOutcome<T>> {
    config.validate()?;
    if m_r < 1 || (mode == SamplingMode::FullSampling && m_u < 1) {
        return Err(Error::InvalidSpec("M_r and M_u must be >= 1".into()));
    }
    let start = Instant::now();
    let cov_key = key.child(domain::COVARIANCE);
    let cov_x_s = config.materialize_cov_x_s(&mut cov_key.child(0).rng())?;
    let cov_x_c = config.materialize_cov_x_c(&mut cov_key.child(1).rng())?;
    let tr_k_x_c = cov_x_c.trace();
    let sigma_v2 = config.sigma_v2;

    let per_realization = |i: usize| -> Result<Realization<T>> {
        let mut feat_rng = key.descend(&[domain::FEATURES, i as u64]).rng();
        let features = match feature_cov {
            FeatureCovSource::Isotropic => sample_features(config, None, &mut feat_rng)?,
            FeatureCovSource::Fixed(k_a, k_a_f) => {
                sample_features(config, Some((k_a, k_a_f)), &mut feat_rng)?
            }
            FeatureCovSource::PerRealization(spec_a, spec_a_f) => {
                let mut cov_rng = key.descend(&[domain::COVARIANCE, 2 + i as u64]).rng();
                let k_a = materialize_or_empty(spec_a, &mut cov_rng)?;
                let k_a_f = materialize_or_empty(spec_a_f, &mut cov_rng)?;
                sample_features(config, Some((&k_a, &k_a_f)), &mut feat_rng)?
            }
        };
        let est = build_misspecified(&features, config.sigma_hat2)?;
        match mode {
            SamplingMode::ConditionalTrace => {
                let cm = conditional_mse(&est, &features, cov_x_s.matrix(), tr_k_x_c)?;
                Ok(Realization {
                    j_s: cm.mse_shared(sigma_v2),
                    j_c: tr_k_x_c,
                    j_f: cm.mse_fake(sigma_v2),
                    j_y: Some(cm.mse_output(sigma_v2)),
                })
            }
            SamplingMode::FullSampling => {
                full_sampling_realization(
                    config,
                    &features,
                    &est,
                    &cov_x_s,
                    &cov_x_c,
                    feature_cov,
                    m_u,
                    test_points,
                    key,
                    i,
                )
            }
        }
    };

    let realizations: Vec<Realization<T>> = (0..m_r)
        .into_par_iter()
        .map(per_realization)
        .collect::<Result<_>>()?;

    let mut w_total = Welford::<T>::new();
    let mut w_s = Welford::<T>::new();
    let mut w_c = Welford::<T>::new();
    let mut w_f = Welford::<T>::new();
    let mut w_y = Welford::<T>::new();
    let mut w_gap = Welford::<T>::new();
    for r in &realizations {
        w_total.push(r.j_s + r.j_c);
        w_s.push(r.j_s);
        w_c.push(r.j_c);
        w_f.push(r.j_f);
        if let Some(j_y) = r.j_y {
            w_y.push(j_y);
            w_gap.push(j_y - (r.j_s + r.j_c + r.j_f + sigma_v2));
        }
    }
    let has_y = w_y.count() > 0;
    Ok(CellOutcome {
        eps_hat: w_s.mean() + w_c.mean(),
        eps_se: w_total.stderr(),
        eps_s_hat: w_s.mean(),
        eps_c_hat: w_c.mean(),
        eps_f_hat: w_f.mean(),
        eps_f_se: w_f.stderr(),
        eps_y_hat: has_y.then(|| w_y.mean()),
        eps_y_se: w_y.stderr(),
        identity_gap: has_y.then(|| w_gap.mean()),
        identity_gap_se: w_gap.stderr(),
        m_r,
        m_u,
        mode,
        wall: start.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn full_sampling_realization<T: Scalar>(
    config: &ProblemConfig<T>,
    features: &FeatureSet<T>,
    est: &crate::estimator::MisspecifiedEstimator<T>,
    cov_x_s: &Covariance<T>,
    cov_x_c: &Covariance<T>,
    feature_cov: &FeatureCovSource<'_, T>,
    m_u: usize,
    test_points: usize,
    key: StreamKey,
    i: usize,
) -> Result<Realization<T>> {
    let n = config.n;
    let sigma_v2 = config.sigma_v2;
    let sigma_v = sigma_v2.sqrt();
    let mut unknown_rng = key.descend(&[domain::UNKNOWNS, i as u64]).rng();

    // Held-out rows share the training feature distribution and are drawn
    // once per realization; the scalar noise of each held-out pair is drawn
    // per unknown draw.
    let held_out = if test_points > 0 {
        let mut h_rng = key.descend(&[domain::HELD_OUT, i as u64]).rng();
        let held_cfg = config.with_n(test_points);
        let rows = match feature_cov {
            FeatureCovSource::Isotropic => sample_features(&held_cfg, None, &mut h_rng)?,
            FeatureCovSource::Fixed(k_a, k_a_f) => {
                sample_features(&held_cfg, Some((k_a, k_a_f)), &mut h_rng)?
            }
            FeatureCovSource::PerRealization(spec_a, spec_a_f) => {
                let mut cov_rng = key.descend(&[domain::HELD_OUT, i as u64, 1]).rng();
                let k_a = materialize_or_empty(spec_a, &mut cov_rng)?;
                let k_a_f = materialize_or_empty(spec_a_f, &mut cov_rng)?;
                sample_features(&held_cfg, Some((&k_a, &k_a_f)), &mut h_rng)?
            }
        };
        Some(rows)
    } else {
        None
    };
    let mut held_rng = key.descend(&[domain::HELD_OUT, i as u64, 2]).rng();

    let mut sum_s = T::zero();
    let mut sum_c = T::zero();
    let mut sum_f = T::zero();
    let mut sum_y = T::zero();
    for _ in 0..m_u {
        let draw = sample_unknowns(cov_x_s, cov_x_c, sigma_v2, n, &mut unknown_rng);
        let y = generate_observations(features, &draw)?;
        let parts = estimate(est, &y, config.p_c)?;
        sum_s += (&draw.x_s - &parts.x_s_hat).norm_squared();
        sum_c += draw.x_c.norm_squared();
        sum_f += parts.x_f_hat.norm_squared();
        if let Some(rows) = &held_out {
            sum_y += held_out_error(rows, &draw, &parts, sigma_v, &mut held_rng);
        }
    }
    let scale = T::one() / T::from_count(m_u);
    Ok(Realization {
        j_s: sum_s * scale,
        j_c: sum_c * scale,
        j_f: sum_f * scale,
        j_y: held_out.map(|_| sum_y * scale),
    })
}

/// Mean squared prediction error over the held-out rows for one draw of the
/// unknowns: `y* = a_S* x_S + a_C* x_C + v*` against
/// `y_hat* = a_S* x_S_hat + a_F* x_F_hat`.
fn held_out_error<T: Scalar, R: rand::Rng + ?Sized>(
    rows: &FeatureSet<T>,
    draw: &UnknownsDraw<T>,
    parts: &crate::estimator::EstimateParts<T>,
    sigma_v: T,
    rng: &mut R,
) -> T {
    let truth = rows.a_s() * &draw.x_s + rows.a_c() * &draw.x_c;
    let pred = rows.a_s() * &parts.x_s_hat + rows.a_f() * &parts.x_f_hat;
    let t = rows.n();
    let mut acc = T::zero();
    for k in 0..t {
        let v_star = sigma_v * T::std_normal(rng);
        let d = truth[k] + v_star - pred[k];
        acc += d * d;
    }
    acc / T::from_count(t)
}

fn cell_config<T: Scalar>(plan: &SweepPlan<T>, idx: usize) -> ProblemConfig<T> {
    match &plan.axis {
        SweepAxis::FakeCount(v) => plan.base.with_p_f(v[idx]),
        SweepAxis::AssumedNoise(v) => plan.base.with_sigma_hat2(v[idx]),
        SweepAxis::SampleCount(v) => plan.base.with_n(v[idx]),
    }
}

fn analytic_applicable<T: Scalar>(plan: &SweepPlan<T>) -> bool {
    match &plan.feature_decay {
        None => true,
        Some(d) => d.is_isotropic(),
    }
}

/// Analytic prediction for one cell, when the hypotheses hold.
fn pair_analytic<T: Scalar>(
    plan: &SweepPlan<T>,
    config: &ProblemConfig<T>,
    key: StreamKey,
) -> Option<AnalyticPrediction<T>> {
    if !analytic_applicable(plan) {
        return None;
    }
    let tr_s = config.tr_k_x_s();
    let tr_c = config.tr_k_x_c();
    if config.sigma_hat2 == T::zero() {
        match breakdown_pinv(config.p_s, config.p_f, config.n, tr_s, tr_c, config.sigma_v2) {
            Ok(b) => Some(AnalyticPrediction {
                eps: b.eps,
                eps_se: T::zero(),
                eps_f: Some(b.eps_f),
                eps_y: Some(b.eps_y),
                formula: match b.regime {
                    Regime::Under => "pinv_under",
                    Regime::Over => "pinv_over",
                    Regime::NearThreshold => unreachable!(),
                },
            }),
            Err(_) => None,
        }
    } else {
        if plan.num_spectra < 2 || config.p_bar() <= 1 {
            return None;
        }
        let mut rng = key.child(domain::MOMENTS).rng();
        let moments = estimate_moments(
            config.n,
            config.p_bar(),
            config.sigma_hat2,
            config.p_s,
            plan.num_spectra,
            &mut rng,
        )
        .ok()?;
        let (eps, se) = expected_mse_ridge(
            config.p_s,
            config.p_f,
            tr_s,
            tr_c,
            config.sigma_v2,
            &moments,
        )
        .ok()?;
        Some(AnalyticPrediction {
            eps,
            eps_se: se,
            eps_f: None,
            eps_y: None,
            formula: "ridge_moments",
        })
    }
}

/// Run a sweep: one cell per axis value, each paired with its analytic
/// prediction. Deterministic for a fixed master seed.
pub fn run_sweep<T: Scalar>(plan: &SweepPlan<T>) -> Result<SweepResult<T>> {
    plan.validate()?;
    let root = StreamKey::root(plan.master_seed).child(plan.experiment_index);
    let cov_root = root.child(domain::COVARIANCE);

    // Fixed-per-experiment covariance of the system features: the joint
    // width p = p_S + p_C does not vary along any axis.
    let fixed_k_a = match (&plan.feature_decay, plan.cov_seed_policy) {
        (Some(d), CovarianceSeedPolicy::FixedPerExperiment) => Some(materialize_or_empty(
            &CovarianceSpec::decayed(plan.base.p(), d.alpha),
            &mut cov_root.child(0).rng(),
        )?),
        _ => None,
    };

    let mut rows = Vec::with_capacity(plan.axis.len());
    for idx in 0..plan.axis.len() {
        let config = cell_config(plan, idx);
        let cell_key = root.descend(&[1, idx as u64]);

        // The fake-feature covariance is keyed by width so it stays fixed
        // across cells of equal p_F.
        let fixed_k_a_f = match (&plan.feature_decay, plan.cov_seed_policy) {
            (Some(d), CovarianceSeedPolicy::FixedPerExperiment) => Some(materialize_or_empty(
                &CovarianceSpec::decayed(config.p_f, d.alpha_f),
                &mut cov_root.descend(&[1, config.p_f as u64]).rng(),
            )?),
            _ => None,
        };
        let source = match (&plan.feature_decay, plan.cov_seed_policy) {
            (None, _) => FeatureCovSource::Isotropic,
            (Some(_), CovarianceSeedPolicy::FixedPerExperiment) => FeatureCovSource::Fixed(
                fixed_k_a.as_ref().expect("materialized above"),
                fixed_k_a_f.as_ref().expect("materialized above"),
            ),
            (Some(d), CovarianceSeedPolicy::RedrawPerRealization) => {
                FeatureCovSource::PerRealization(
                    CovarianceSpec::decayed(config.p(), d.alpha),
                    CovarianceSpec::decayed(config.p_f, d.alpha_f),
                )
            }
        };

        let cell = run_cell(
            &config,
            plan.m_r,
            plan.m_u,
            plan.mode,
            &source,
            plan.test_points,
            cell_key,
        )?;
        let analytic = pair_analytic(plan, &config, cell_key);
        let regime = Regime::of(config.n, config.p_bar());
        rows.push(SweepRow {
            config,
            cell,
            analytic,
            regime,
        });
    }
    Ok(SweepResult { rows })
}

/// Result of an assumed-noise sweep: the rows, the empirical grid argmin,
/// and the closed-form optimum when it applies (`p_F = 0`).
#[derive(Clone, Debug)]
pub struct SigmaSweepResult<T> {
    pub rows: Vec<SweepRow<T>>,
    pub argmin_sigma_hat2: T,
    pub lemma_sigma_hat2: Option<T>,
}

/// Sweep the assumed noise variance on one cell.
///
/// One feature realization is factorized once and reused across the whole
/// grid, and all grid values see the same unknown/noise draws, so the curve
/// is compared under common randomness. The ridge-form analytic pairing
/// shares one set of sampled spectra across the grid as well.
pub fn run_sigma_sweep<T: Scalar>(plan: &SweepPlan<T>) -> Result<SigmaSweepResult<T>> {
    plan.validate()?;
    let grid = match &plan.axis {
        SweepAxis::AssumedNoise(v) => v.clone(),
        _ => {
            return Err(Error::InvalidSpec(
                "run_sigma_sweep requires an assumed-noise axis".into(),
            ))
        }
    };
    if grid.is_empty() {
        return Ok(SigmaSweepResult {
            rows: Vec::new(),
            argmin_sigma_hat2: T::zero(),
            lemma_sigma_hat2: None,
        });
    }
    if grid.iter().any(|s| *s < T::zero() || !s.finite()) {
        return Err(Error::InvalidSpec("assumed noise values must be finite and >= 0".into()));
    }
    if plan.feature_decay.is_some() {
        return Err(Error::Unsupported(
            "the assumed-noise sweep is defined for isotropic features".into(),
        ));
    }
    let config = plan.base.clone();
    config.validate()?;
    let root = StreamKey::root(plan.master_seed).child(plan.experiment_index);
    let key = root.child(2);
    let cov_key = key.child(domain::COVARIANCE);
    let cov_x_s = config.materialize_cov_x_s(&mut cov_key.child(0).rng())?;
    let cov_x_c = config.materialize_cov_x_c(&mut cov_key.child(1).rng())?;
    let tr_k_x_c = cov_x_c.trace();
    let sigma_v2 = config.sigma_v2;
    let start = Instant::now();

    struct GridRealization<T> {
        j_s: Vec<T>,
        j_f: Vec<T>,
        j_c: T,
    }

    let per_realization = |i: usize| -> Result<GridRealization<T>> {
        let mut feat_rng = key.descend(&[domain::FEATURES, i as u64]).rng();
        let features = sample_features(&config, None, &mut feat_rng)?;
        let mut j_s = vec![T::zero(); grid.len()];
        let mut j_f = vec![T::zero(); grid.len()];
        let mut j_c = tr_k_x_c;
        match plan.mode {
            SamplingMode::ConditionalTrace => {
                for (g, &sigma_hat2) in grid.iter().enumerate() {
                    let est = build_misspecified(&features, sigma_hat2)?;
                    let cm = conditional_mse(&est, &features, cov_x_s.matrix(), tr_k_x_c)?;
                    j_s[g] = cm.mse_shared(sigma_v2);
                    j_f[g] = cm.mse_fake(sigma_v2);
                }
            }
            SamplingMode::FullSampling => {
                let mut unknown_rng = key.descend(&[domain::UNKNOWNS, i as u64]).rng();
                let draws: Vec<(UnknownsDraw<T>, DVector<T>)> = (0..plan.m_u)
                    .map(|_| {
                        let d = sample_unknowns(&cov_x_s, &cov_x_c, sigma_v2, config.n, &mut unknown_rng);
                        let y = generate_observations(&features, &d).expect("shapes agree");
                        (d, y)
                    })
                    .collect();
                let scale = T::one() / T::from_count(plan.m_u);
                j_c = draws.iter().fold(T::zero(), |acc, (d, _)| {
                    acc + d.x_c.norm_squared()
                }) * scale;
                for (g, &sigma_hat2) in grid.iter().enumerate() {
                    let est = build_misspecified(&features, sigma_hat2)?;
                    let mut sum_s = T::zero();
                    let mut sum_f = T::zero();
                    for (d, y) in &draws {
                        let parts = estimate(&est, y, config.p_c)?;
                        sum_s += (&d.x_s - &parts.x_s_hat).norm_squared();
                        sum_f += parts.x_f_hat.norm_squared();
                    }
                    j_s[g] = sum_s * scale;
                    j_f[g] = sum_f * scale;
                }
            }
        }
        Ok(GridRealization { j_s, j_f, j_c })
    };

    let realizations: Vec<GridRealization<T>> = (0..plan.m_r)
        .into_par_iter()
        .map(per_realization)
        .collect::<Result<_>>()?;

    // One set of spectra serves every grid value.
    let ridge_analytic: Vec<Option<(T, T)>> = if plan.num_spectra >= 2 && config.p_bar() > 1 {
        let mut rng = key.child(domain::MOMENTS).rng();
        let moments = crate::rmt::estimate_moments_multi(
            config.n,
            config.p_bar(),
            &grid,
            config.p_s,
            plan.num_spectra,
            &mut rng,
        )?;
        moments
            .iter()
            .map(|m| {
                expected_mse_ridge(
                    config.p_s,
                    config.p_f,
                    config.tr_k_x_s(),
                    tr_k_x_c,
                    sigma_v2,
                    m,
                )
                .ok()
            })
            .collect()
    } else {
        vec![None; grid.len()]
    };

    let mut rows = Vec::with_capacity(grid.len());
    for (g, &sigma_hat2) in grid.iter().enumerate() {
        let mut w_total = Welford::<T>::new();
        let mut w_s = Welford::<T>::new();
        let mut w_c = Welford::<T>::new();
        let mut w_f = Welford::<T>::new();
        for r in &realizations {
            w_total.push(r.j_s[g] + r.j_c);
            w_s.push(r.j_s[g]);
            w_c.push(r.j_c);
            w_f.push(r.j_f[g]);
        }
        let cell = CellOutcome {
            eps_hat: w_s.mean() + w_c.mean(),
            eps_se: w_total.stderr(),
            eps_s_hat: w_s.mean(),
            eps_c_hat: w_c.mean(),
            eps_f_hat: w_f.mean(),
            eps_f_se: w_f.stderr(),
            eps_y_hat: None,
            eps_y_se: None,
            identity_gap: None,
            identity_gap_se: None,
            m_r: plan.m_r,
            m_u: plan.m_u,
            mode: plan.mode,
            wall: start.elapsed(),
        };
        let config_g = config.with_sigma_hat2(sigma_hat2);
        let analytic = if sigma_hat2 == T::zero() {
            pair_analytic(plan, &config_g, key)
        } else {
            ridge_analytic[g].map(|(eps, se)| AnalyticPrediction {
                eps,
                eps_se: se,
                eps_f: None,
                eps_y: None,
                formula: "ridge_moments",
            })
        };
        rows.push(SweepRow {
            regime: Regime::of(config_g.n, config_g.p_bar()),
            config: config_g,
            cell,
            analytic,
        });
    }

    let argmin = rows
        .iter()
        .min_by(|a, b| {
            a.cell
                .eps_hat
                .partial_cmp(&b.cell.eps_hat)
                .expect("finite estimates")
        })
        .map(|r| r.config.sigma_hat2)
        .expect("non-empty grid");
    let lemma = if config.p_f == 0 {
        optimal_assumed_noise(config.p_s, config.tr_k_x_s(), tr_k_x_c, sigma_v2).ok()
    } else {
        None
    };
    Ok(SigmaSweepResult {
        rows,
        argmin_sigma_hat2: argmin,
        lemma_sigma_hat2: lemma,
    })
}

/// Fake-count sweep with the held-out output-MSE split. `test_points` fresh
/// pairs per realization estimate `eps_y`; the per-realization identity gap
/// against `eps_S + eps_C + eps_F + sigma_v2` is reported alongside.
pub fn run_decomposition_sweep<T: Scalar>(plan: &SweepPlan<T>) -> Result<SweepResult<T>> {
    if plan.test_points < 1 {
        return Err(Error::InvalidSpec(
            "the decomposition sweep needs test_points >= 1".into(),
        ));
    }
    if !matches!(plan.axis, SweepAxis::FakeCount(_)) {
        return Err(Error::InvalidSpec(
            "the decomposition sweep varies the fake count".into(),
        ));
    }
    run_sweep(plan)
}

/// The structured-covariance experiment: one fake-count sweep per decay
/// pair, all deriving from the same master seed but independent streams.
pub fn run_covariance_experiment<T: Scalar>(
    base_plan: &SweepPlan<T>,
    pairs: &[(T, T)],
) -> Result<Vec<(FeatureDecay<T>, SweepResult<T>)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(alpha, alpha_f)) in pairs.iter().enumerate() {
        let decay = FeatureDecay { alpha, alpha_f };
        let mut plan = base_plan.clone();
        plan.experiment_index = base_plan.experiment_index + k as u64;
        plan.feature_decay = Some(decay);
        let result = run_sweep(&plan)?;
        out.push((decay, result));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_fully_specified_recovers_exactly() {
        // sigma_v2 = 0, p_C = p_F = 0, n > p_S + 1, sigma_hat2 = 0.
        let base = ProblemConfig::<f64>::isotropic(8, 0, 0, 20, 0.0, 0.0);
        let cell = run_cell(
            &base,
            5,
            5,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(1),
        )
        .unwrap();
        assert!(cell.eps_hat.abs() < 1e-12, "eps_hat = {}", cell.eps_hat);
    }

    #[test]
    fn theorem_cell_within_three_se() {
        // Small analogue of the reference cell: eps = p_S/(n-p_bar-1) * sv2.
        let base = ProblemConfig::<f64>::isotropic(20, 0, 0, 60, 1.0, 0.0);
        let cell = run_cell(
            &base,
            60,
            40,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(2),
        )
        .unwrap();
        let want = 20.0 / 39.0;
        let se = cell.eps_se.unwrap();
        assert!(
            (cell.eps_hat - want).abs() < 3.0 * se,
            "{} vs {want} (se {se})",
            cell.eps_hat
        );
    }

    #[test]
    fn conditional_and_full_agree() {
        let base = ProblemConfig::<f64>::isotropic(10, 5, 8, 40, 2.0, 0.5);
        let full = run_cell(
            &base,
            60,
            60,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(3),
        )
        .unwrap();
        let cond = run_cell(
            &base,
            60,
            1,
            SamplingMode::ConditionalTrace,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(4),
        )
        .unwrap();
        let se = (full.eps_se.unwrap().powi(2) + cond.eps_se.unwrap().powi(2)).sqrt();
        assert!(
            (full.eps_hat - cond.eps_hat).abs() < 3.0 * se,
            "{} vs {} (se {se})",
            full.eps_hat,
            cond.eps_hat
        );
    }

    #[test]
    fn conditional_trace_reduces_variance() {
        // Rao-Blackwellization: the inner expectation is exact, so the
        // across-realization spread can only shrink.
        let base = ProblemConfig::<f64>::isotropic(6, 3, 4, 24, 4.0, 0.0);
        let full = run_cell(
            &base,
            40,
            3,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(5),
        )
        .unwrap();
        let cond = run_cell(
            &base,
            40,
            3,
            SamplingMode::ConditionalTrace,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(5),
        )
        .unwrap();
        assert!(cond.eps_se.unwrap() < full.eps_se.unwrap());
    }

    #[test]
    fn component_sum_identity_exact() {
        let base = ProblemConfig::<f64>::isotropic(5, 4, 3, 20, 1.0, 0.0);
        let cell = run_cell(
            &base,
            10,
            10,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(6),
        )
        .unwrap();
        assert!((cell.eps_hat - (cell.eps_s_hat + cell.eps_c_hat)).abs() < 1e-10);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let base = ProblemConfig::<f64>::isotropic(6, 2, 4, 20, 1.0, 0.0);
        let mut plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![0, 4, 30]));
        plan.master_seed = 7;
        plan.m_r = 8;
        plan.m_u = 4;
        plan.test_points = 7;
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| run_sweep(&plan)).unwrap();
        let r4 = pool4.install(|| run_sweep(&plan)).unwrap();
        for (a, b) in r1.rows.iter().zip(r4.rows.iter()) {
            assert_eq!(a.cell.eps_hat, b.cell.eps_hat);
            assert_eq!(a.cell.eps_f_hat, b.cell.eps_f_hat);
            assert_eq!(a.cell.eps_y_hat, b.cell.eps_y_hat);
        }
    }

    #[test]
    fn single_point_axis_reduces_to_run_cell() {
        let base = ProblemConfig::<f64>::isotropic(5, 1, 0, 18, 1.0, 0.0);
        let mut plan = SweepPlan::new(base.clone(), SweepAxis::FakeCount(vec![3]));
        plan.m_r = 6;
        plan.m_u = 5;
        plan.master_seed = 11;
        let sweep = run_sweep(&plan).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        let cell = run_cell(
            &base.with_p_f(3),
            6,
            5,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(11).child(0).descend(&[1, 0]),
        )
        .unwrap();
        assert_eq!(sweep.rows[0].cell.eps_hat, cell.eps_hat);
    }

    #[test]
    fn near_threshold_rows_are_tagged_without_analytic() {
        let base = ProblemConfig::<f64>::isotropic(10, 0, 0, 12, 1.0, 0.0);
        let mut plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![0, 2, 8]));
        plan.m_r = 3;
        plan.m_u = 2;
        let sweep = run_sweep(&plan).unwrap();
        // p_bar = 12 at p_f = 2 equals n: tagged, no analytic value.
        assert_eq!(sweep.rows[1].regime, Regime::NearThreshold);
        assert!(sweep.rows[1].analytic.is_none());
        assert_eq!(sweep.rows[0].regime, Regime::Under);
        assert!(sweep.rows[0].analytic.is_some());
        assert_eq!(sweep.rows[2].regime, Regime::Over);
    }

    #[test]
    fn unbiased_across_fresh_seeds() {
        // Mean of eps_hat over repeats with fresh seeds lands within three
        // standard errors of the closed form.
        let base = ProblemConfig::<f64>::isotropic(10, 0, 10, 40, 1.0, 0.0);
        let want = breakdown_pinv::<f64>(10, 10, 40, 10.0, 0.0, 1.0).unwrap().eps;
        let mut w = Welford::<f64>::new();
        for seed in 0..20 {
            let cell = run_cell(
                &base,
                20,
                20,
                SamplingMode::FullSampling,
                &FeatureCovSource::Isotropic,
                0,
                StreamKey::root(100 + seed),
            )
            .unwrap();
            w.push(cell.eps_hat);
        }
        let se = w.stderr().unwrap();
        assert!(
            (w.mean() - want).abs() < 3.0 * se,
            "{} vs {want} (se {se})",
            w.mean()
        );
    }

    #[test]
    fn unknown_covariance_shape_does_not_matter_in_theorem_setting() {
        // Isotropic K_x_S vs a decayed spectrum of equal trace: same eps_hat
        // within combined error.
        let mut iso = ProblemConfig::<f64>::isotropic(12, 0, 6, 40, 1.0, 0.0);
        iso.cov_x_s = CovarianceSpec::unit(12);
        let mut shaped = iso.clone();
        shaped.cov_x_s = CovarianceSpec::decayed(12, 2.0);
        let a = run_cell(
            &iso, 80, 40,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(31),
        )
        .unwrap();
        let b = run_cell(
            &shaped, 80, 40,
            SamplingMode::FullSampling,
            &FeatureCovSource::Isotropic,
            0,
            StreamKey::root(32),
        )
        .unwrap();
        let se = (a.eps_se.unwrap().powi(2) + b.eps_se.unwrap().powi(2)).sqrt();
        assert!(
            (a.eps_hat - b.eps_hat).abs() < 3.0 * se,
            "{} vs {} (se {se})",
            a.eps_hat,
            b.eps_hat
        );
    }

    #[test]
    fn sigma_sweep_smoke() {
        let base = ProblemConfig::<f64>::isotropic(10, 0, 0, 40, 9.0, 0.0);
        let mut plan = SweepPlan::new(
            base,
            SweepAxis::AssumedNoise(vec![0.0, 2.5, 9.0, 30.0, 100.0]),
        );
        plan.m_r = 30;
        plan.m_u = 20;
        plan.num_spectra = 40;
        plan.master_seed = 17;
        let result = run_sigma_sweep(&plan).unwrap();
        assert_eq!(result.rows.len(), 5);
        // Lemma optimum: p_S (tr K_x_C + sv2) / tr K_x_S = 10 * 9 / 10 = 9.
        assert!((result.lemma_sigma_hat2.unwrap() - 9.0).abs() < 1e-12);
        // Ridge pairing exists away from sigma_hat2 = 0.
        assert!(result.rows[2].analytic.is_some());
        // Grid minimum should not be at the far end for this cell.
        assert!(result.argmin_sigma_hat2 < 100.0);
    }

    #[test]
    fn decomposition_identity_gap_is_small() {
        let base = ProblemConfig::<f64>::isotropic(9, 1, 0, 20, 1.0, 0.0);
        let mut plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![0, 4]));
        plan.m_r = 40;
        plan.m_u = 20;
        plan.test_points = 50;
        plan.master_seed = 19;
        let sweep = run_decomposition_sweep(&plan).unwrap();
        for row in &sweep.rows {
            let gap = row.cell.identity_gap.unwrap();
            let se = row.cell.identity_gap_se.unwrap();
            assert!(gap.abs() < 3.0 * se, "gap {gap} (se {se})");
            // eps_c_hat estimates tr(K_x_C) = 1.
            assert!((row.cell.eps_c_hat - 1.0).abs() < 0.5);
        }
    }

    #[test]
    fn covariance_experiment_isotropic_pair_matches_closed_form() {
        let base = ProblemConfig::<f64>::isotropic(9, 1, 0, 30, 0.25, 0.0);
        let mut plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![0, 6]));
        plan.m_r = 50;
        plan.m_u = 30;
        plan.master_seed = 23;
        let results = run_covariance_experiment(&plan, &[(0.0, 0.0), (0.0, 20.0)]).unwrap();
        let (decay0, sweep0) = &results[0];
        assert!(decay0.is_isotropic());
        for row in &sweep0.rows {
            let analytic = row.analytic.as_ref().expect("closed form applies");
            let se = row.cell.eps_se.unwrap();
            assert!(
                (row.cell.eps_hat - analytic.eps).abs() < 3.0 * se,
                "{} vs {} (se {se})",
                row.cell.eps_hat,
                analytic.eps
            );
        }
        // The shaped-fake pair has no closed form attached.
        assert!(results[1].1.rows[0].analytic.is_none());
    }

    #[test]
    fn conditional_mode_rejects_structured_features() {
        let base = ProblemConfig::<f64>::isotropic(4, 1, 2, 12, 1.0, 0.0);
        let mut plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![0, 2]));
        plan.mode = SamplingMode::ConditionalTrace;
        plan.feature_decay = Some(FeatureDecay { alpha: 1.0, alpha_f: 0.0 });
        assert!(matches!(plan.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn axis_must_increase() {
        let base = ProblemConfig::<f64>::isotropic(4, 0, 0, 12, 1.0, 0.0);
        let plan = SweepPlan::new(base, SweepAxis::FakeCount(vec![3, 3]));
        assert!(plan.validate().is_err());
    }
}
