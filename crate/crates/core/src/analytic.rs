//! Closed-form expected MSE.
//!
//! The formulas here give the expected MSE of the misspecified estimator,
//! averaged over standard Gaussian features, as explicit functions of the
//! dimensions and the power levels `tr(K_x_S)` and `tr(K_x_C)`. Two families
//! exist: the zero assumed-noise (pseudoinverse) forms, valid away from the
//! interpolation threshold (`n > p_bar + 1` or `p_bar > n + 1`), and the
//! ridge form for `sigma_hat2 > 0`, which is parameterized by two spectral
//! moments of the Gram matrix `Abar^T Abar`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which side of the interpolation threshold a cell sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// `n > p_bar + 1`.
    Under,
    /// `p_bar > n + 1`.
    Over,
    /// `|n - p_bar| <= 1`: the closed forms are undefined.
    NearThreshold,
}

impl Regime {
    pub fn of(n: usize, p_bar: usize) -> Regime {
        if n > p_bar + 1 {
            Regime::Under
        } else if p_bar > n + 1 {
            Regime::Over
        } else {
            Regime::NearThreshold
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Under => "under",
            Regime::Over => "over",
            Regime::NearThreshold => "near_threshold",
        }
    }
}

fn require_regime(n: usize, p_bar: usize) -> Result<Regime> {
    match Regime::of(n, p_bar) {
        Regime::NearThreshold => Err(Error::NearThreshold { n, p_bar }),
        r => Ok(r),
    }
}

/// Expected MSE and its components for one cell; `eps = eps_s + eps_c` and
/// `eps_y = eps + eps_f + sigma_v2`.
#[derive(Clone, Copy, Debug)]
pub struct MseBreakdown<T> {
    pub eps: T,
    pub eps_s: T,
    pub eps_c: T,
    pub eps_f: T,
    pub eps_y: T,
    pub regime: Regime,
}

/// Estimates of the two spectral moments of the ridge form, with standard
/// errors and provenance.
#[derive(Clone, Copy, Debug)]
pub struct SpectralMoments<T> {
    pub mu1: T,
    pub mu2: T,
    pub stderr1: T,
    pub stderr2: T,
    pub method: MomentMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentMethod {
    /// Monte Carlo over sampled spectra (exact finite-n law).
    MonteCarloSpectra,
    /// Deterministic `n >> p_bar` approximation.
    LargeNApprox,
}

/// Expected MSE of the zero-assumed-noise (pseudoinverse) estimator.
///
/// Underparameterized (`n > p_bar + 1`):
/// `eps = p_S / (n - p_bar - 1) * (tr(K_x_C) + sigma_v2) + tr(K_x_C)`.
///
/// Overparameterized (`p_bar > n + 1`):
/// `eps = n p_S / (p_bar (p_bar - n - 1)) * (tr(K_x_C) + sigma_v2)
///     + (1 - n/p_bar - p_F n (p_bar - n) / ((p_bar-1) p_bar (p_bar+2))) tr(K_x_S)
///     + tr(K_x_C)`.
///
/// Inside the band `|n - p_bar| <= 1` the expectation is undefined and a
/// [`Error::NearThreshold`] tag is returned instead of a number.
pub fn expected_mse_pinv<T: Scalar>(
    p_s: usize,
    p_f: usize,
    n: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
) -> Result<(T, Regime)> {
    let p_bar = p_s + p_f;
    let regime = require_regime(n, p_bar)?;
    let noise = tr_k_x_c + sigma_v2;
    let eps = match regime {
        Regime::Under => {
            let denom = T::from_count(n - p_bar - 1);
            T::from_count(p_s) / denom * noise + tr_k_x_c
        }
        Regime::Over => {
            let nf = T::from_count(n);
            let pb = T::from_count(p_bar);
            let lead = nf * T::from_count(p_s) / (pb * T::from_count(p_bar - n - 1));
            let shrink = T::one() - nf / pb - fake_shrink_coeff::<T>(p_f, n, p_bar);
            lead * noise + shrink * tr_k_x_s + tr_k_x_c
        }
        Regime::NearThreshold => unreachable!(),
    };
    Ok((eps, regime))
}

/// `p_F n (p_bar - n) / ((p_bar - 1) p_bar (p_bar + 2))`, the extra
/// shrinkage of the shared-signal term caused by the fake block.
fn fake_shrink_coeff<T: Scalar>(p_f: usize, n: usize, p_bar: usize) -> T {
    let nf = T::from_count(n);
    let pb = T::from_count(p_bar);
    T::from_count(p_f) * nf * (pb - nf)
        / ((pb - T::one()) * pb * (pb + T::of(2.0)))
}

/// Limit of the expected MSE as the number of fake features grows without
/// bound: the a priori uncertainty `tr(K_x)`.
pub fn mse_limit_many_fakes<T: Scalar>(tr_k_x_s: T, tr_k_x_c: T) -> T {
    tr_k_x_s + tr_k_x_c
}

/// Whether the limit of infinitely many fake features beats the model with
/// none, given the shared-power ratio `r = tr(K_x_S) / tr(K_x)`.
///
/// For `n >= p_S`, `n > 1` the condition is
/// `r < p_S / (n - 1) * (tr(K_x) + sigma_v2) / tr(K_x)`, and for `n < p_S`
/// `r < p_S / (2 p_S - n - 1) * (tr(K_x) + sigma_v2) / tr(K_x)`.
pub fn infinite_fakes_beat_none<T: Scalar>(
    p_s: usize,
    n: usize,
    r: T,
    tr_k_x: T,
    sigma_v2: T,
) -> Result<bool> {
    if !(T::zero()..=T::one()).contains(&r) {
        return Err(Error::InvalidInput(format!(
            "power ratio must lie in [0, 1], got {}",
            r.to_f64_lossy()
        )));
    }
    if tr_k_x <= T::zero() {
        return Err(Error::InvalidInput("tr(K_x) must be positive".into()));
    }
    let ratio = (tr_k_x + sigma_v2) / tr_k_x;
    let threshold = if n >= p_s {
        if n <= 1 {
            return Err(Error::Unsupported("n > 1 required when n >= p_S".into()));
        }
        T::from_count(p_s) / T::from_count(n - 1) * ratio
    } else {
        // n < p_S implies 2 p_S - n - 1 >= p_S > 0.
        T::from_count(p_s) / T::from_count(2 * p_s - n - 1) * ratio
    };
    Ok(r < threshold)
}

/// Expected MSE of the ridge estimator (`sigma_hat2 > 0`):
/// `eps = (tr(K_x_C) + sigma_v2) * (p_S / p_bar) * mu1
///      + mu2 * tr(K_x_S) + tr(K_x_C)`,
/// with the supplied spectral moments. Returns the value and a first-order
/// error bar propagated from the moment standard errors.
pub fn expected_mse_ridge<T: Scalar>(
    p_s: usize,
    p_f: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
    moments: &SpectralMoments<T>,
) -> Result<(T, T)> {
    let p_bar = p_s + p_f;
    if p_bar <= 1 {
        return Err(Error::Unsupported(format!(
            "the ridge form requires p_bar > 1, got {p_bar}"
        )));
    }
    let share = T::from_count(p_s) / T::from_count(p_bar);
    let noise = tr_k_x_c + sigma_v2;
    let eps = noise * share * moments.mu1 + moments.mu2 * tr_k_x_s + tr_k_x_c;
    let stderr = noise * share * moments.stderr1 + tr_k_x_s * moments.stderr2;
    Ok((eps, stderr))
}

/// Deterministic moment approximation for `n >> p_bar`:
/// `mu1 ~ n p_bar / (n + sigma_hat2)^2`, `mu2 ~ sigma_hat2^2 / (n + sigma_hat2)^2`.
///
/// Intended for `n >= 10 p_bar`; outside that range the caller is trusting
/// the approximation beyond its support.
pub fn moments_large_n<T: Scalar>(p_bar: usize, n: usize, sigma_hat2: T) -> SpectralMoments<T> {
    let nf = T::from_count(n);
    let denom = (nf + sigma_hat2) * (nf + sigma_hat2);
    SpectralMoments {
        mu1: nf * T::from_count(p_bar) / denom,
        mu2: sigma_hat2 * sigma_hat2 / denom,
        stderr1: T::zero(),
        stderr2: T::zero(),
        method: MomentMethod::LargeNApprox,
    }
}

/// The assumed noise variance minimizing the expected MSE:
/// `sigma_hat2* = p_S (tr(K_x_C) + sigma_v2) / tr(K_x_S)`.
/// Exact minimizer for `p_F = 0`; approximate for `n >> p_bar`.
pub fn optimal_assumed_noise<T: Scalar>(
    p_s: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
) -> Result<T> {
    if tr_k_x_s <= T::zero() {
        return Err(Error::InvalidInput(
            "tr(K_x_S) must be positive: with no shared signal power the optimum is undefined".into(),
        ));
    }
    Ok(T::from_count(p_s) * (tr_k_x_c + sigma_v2) / tr_k_x_s)
}

/// Expected MSE of the fake block under zero assumed noise.
///
/// Underparameterized: `eps_F = p_F / (n - p_bar - 1) * (tr(K_x_C) + sigma_v2)`.
/// Overparameterized:
/// `eps_F = n p_F / (p_bar (p_bar - n - 1)) * (tr(K_x_C) + sigma_v2)
///        + n p_F (p_bar - n) / ((p_bar-1) p_bar (p_bar+2)) * tr(K_x_S)`.
pub fn expected_fake_mse_pinv<T: Scalar>(
    p_s: usize,
    p_f: usize,
    n: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
) -> Result<(T, Regime)> {
    let p_bar = p_s + p_f;
    let regime = require_regime(n, p_bar)?;
    let noise = tr_k_x_c + sigma_v2;
    let eps_f = match regime {
        Regime::Under => T::from_count(p_f) / T::from_count(n - p_bar - 1) * noise,
        Regime::Over => {
            let nf = T::from_count(n);
            let pb = T::from_count(p_bar);
            nf * T::from_count(p_f) / (pb * T::from_count(p_bar - n - 1)) * noise
                + fake_shrink_coeff::<T>(p_f, n, p_bar) * tr_k_x_s
        }
        Regime::NearThreshold => unreachable!(),
    };
    Ok((eps_f, regime))
}

/// Expected output MSE (error predicting a fresh observation) under zero
/// assumed noise.
///
/// Underparameterized:
/// `eps_y = p_bar / (n - p_bar - 1) * (tr(K_x_C) + sigma_v2) + tr(K_x_C) + sigma_v2`.
/// Overparameterized:
/// `eps_y = n / (p_bar - n - 1) * (tr(K_x_C) + sigma_v2)
///        + (1 - n/p_bar) tr(K_x_S) + tr(K_x_C) + sigma_v2`.
pub fn expected_output_mse_pinv<T: Scalar>(
    p_bar: usize,
    n: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
) -> Result<(T, Regime)> {
    let regime = require_regime(n, p_bar)?;
    let noise = tr_k_x_c + sigma_v2;
    let eps_y = match regime {
        Regime::Under => {
            T::from_count(p_bar) / T::from_count(n - p_bar - 1) * noise + tr_k_x_c + sigma_v2
        }
        Regime::Over => {
            let nf = T::from_count(n);
            let pb = T::from_count(p_bar);
            nf / T::from_count(p_bar - n - 1) * noise
                + (T::one() - nf / pb) * tr_k_x_s
                + tr_k_x_c
                + sigma_v2
        }
        Regime::NearThreshold => unreachable!(),
    };
    Ok((eps_y, regime))
}

/// Full breakdown for a zero-assumed-noise cell, assembling the shared,
/// missing, fake and output components from the closed forms.
pub fn breakdown_pinv<T: Scalar>(
    p_s: usize,
    p_f: usize,
    n: usize,
    tr_k_x_s: T,
    tr_k_x_c: T,
    sigma_v2: T,
) -> Result<MseBreakdown<T>> {
    let (eps, regime) = expected_mse_pinv(p_s, p_f, n, tr_k_x_s, tr_k_x_c, sigma_v2)?;
    let (eps_f, _) = expected_fake_mse_pinv(p_s, p_f, n, tr_k_x_s, tr_k_x_c, sigma_v2)?;
    let (eps_y, _) = expected_output_mse_pinv(p_s + p_f, n, tr_k_x_s, tr_k_x_c, sigma_v2)?;
    Ok(MseBreakdown {
        eps,
        eps_s: eps - tr_k_x_c,
        eps_c: tr_k_x_c,
        eps_f,
        eps_y,
        regime,
    })
}
