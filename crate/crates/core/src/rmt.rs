//! Random-matrix machinery.
//!
//! Two jobs live here. First, Monte Carlo estimation of the two spectral
//! moments that parameterize the ridge form of the expected MSE: spectra of
//! `Abar^T Abar` are sampled in their exact finite-n joint law (eigenvalues
//! from squared singular values of a Gaussian matrix) and the moment
//! functionals are averaged across spectra. Second, the closed-form
//! identities about Gaussian and Haar matrices that the derivations rest on
//! (pseudoinverse Gram expectations, Haar fourth moments, projector second
//! moments, the Gaussian sandwich trace), each paired with a sampling oracle
//! so the identities can be re-verified numerically at any time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::analytic::{MomentMethod, SpectralMoments};
use crate::error::{Error, Result};
use crate::model::haar_orthogonal;
use crate::scalar::Scalar;
use crate::stats::Welford;

/// Eigenvalues of one sampled Gram matrix `Abar^T Abar`, descending, with
/// exact zeros padding the rank-deficient tail when `p_bar > n`.
#[derive(Clone, Debug)]
pub struct SpectrumSample<T> {
    pub eigenvalues: DVector<T>,
    pub n: usize,
    pub p_bar: usize,
}

/// Sample the spectrum of `Abar^T Abar` for a standard Gaussian `n x p_bar`
/// matrix. Eigenvalues are squared singular values of `Abar`; computing them
/// from the singular values keeps conditioning near the threshold.
pub fn sample_spectrum<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    p_bar: usize,
    rng: &mut R,
) -> SpectrumSample<T> {
    let a = DMatrix::<T>::from_fn(n, p_bar, |_, _| T::std_normal(rng));
    let sv = a.singular_values();
    let mut lams: Vec<T> = sv.iter().map(|s| *s * *s).collect();
    lams.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    lams.resize(p_bar, T::zero());
    SpectrumSample {
        eigenvalues: DVector::from_vec(lams),
        n,
        p_bar,
    }
}

/// `lam / (lam + s)^2` with the `0/0` case (zero eigenvalue, zero ridge)
/// resolved to its limit 0.
#[inline]
fn mu1_term<T: Scalar>(lam: T, sigma_hat2: T) -> T {
    let d = lam + sigma_hat2;
    if d == T::zero() {
        T::zero()
    } else {
        lam / (d * d)
    }
}

/// `lam_tilde = sigma_hat2 / (lam + sigma_hat2)` with `0/0 -> 1` (the limit
/// as the ridge vanishes on a zero eigenvalue, matching the pseudoinverse
/// form).
#[inline]
fn lam_tilde<T: Scalar>(lam: T, sigma_hat2: T) -> T {
    let d = lam + sigma_hat2;
    if d == T::zero() {
        T::one()
    } else {
        sigma_hat2 / d
    }
}

/// Monte Carlo estimate of the ridge-form moments.
///
/// Per sampled spectrum:
/// `m1 = sum_i lam_i / (lam_i + sigma_hat2)^2` and
/// `m2 = [(p_S + 2) sum_i t_i^2 + 2 (p_bar - p_S)/(p_bar - 1) sum_{i<j} t_i t_j]
///       / (p_bar (p_bar + 2))`
/// with `t_i = sigma_hat2 / (lam_i + sigma_hat2)`. The pairwise sum is taken
/// jointly per spectrum, which is exact in distribution; standard errors
/// come from the across-spectra variance.
pub fn estimate_moments<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    p_bar: usize,
    sigma_hat2: T,
    p_s: usize,
    num_spectra: usize,
    rng: &mut R,
) -> Result<SpectralMoments<T>> {
    let mut out = estimate_moments_multi(n, p_bar, &[sigma_hat2], p_s, num_spectra, rng)?;
    Ok(out.pop().expect("one ridge value in, one moment set out"))
}

/// Moment estimates for several ridge values from one set of sampled
/// spectra. Sweeps over the assumed noise level share the spectra, so the
/// cost is one factorization per spectrum regardless of the grid size.
pub fn estimate_moments_multi<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    p_bar: usize,
    sigma_hat2_values: &[T],
    p_s: usize,
    num_spectra: usize,
    rng: &mut R,
) -> Result<Vec<SpectralMoments<T>>> {
    if num_spectra < 2 {
        return Err(Error::InvalidInput(
            "num_spectra must be >= 2 to estimate a variance".into(),
        ));
    }
    if p_bar <= 1 {
        return Err(Error::Unsupported("moment estimation requires p_bar > 1".into()));
    }
    if p_s > p_bar {
        return Err(Error::InvalidInput(format!(
            "p_s = {p_s} exceeds p_bar = {p_bar}"
        )));
    }
    let pb = T::from_count(p_bar);
    let w_sq = T::from_count(p_s + 2);
    let w_pair = T::of(2.0) * T::from_count(p_bar - p_s) / (pb - T::one());
    let norm = pb * (pb + T::of(2.0));
    let mut acc: Vec<(Welford<T>, Welford<T>)> = sigma_hat2_values
        .iter()
        .map(|_| (Welford::new(), Welford::new()))
        .collect();
    for _ in 0..num_spectra {
        let spec = sample_spectrum::<T, R>(n, p_bar, rng);
        for (value, (acc1, acc2)) in sigma_hat2_values.iter().zip(acc.iter_mut()) {
            let sigma_hat2 = *value;
            let mut m1 = T::zero();
            let mut sum_t = T::zero();
            let mut sum_t2 = T::zero();
            for &lam in spec.eigenvalues.iter() {
                m1 += mu1_term(lam, sigma_hat2);
                let t = lam_tilde(lam, sigma_hat2);
                sum_t += t;
                sum_t2 += t * t;
            }
            let pair = (sum_t * sum_t - sum_t2) * T::of(0.5);
            let m2 = (w_sq * sum_t2 + w_pair * pair) / norm;
            acc1.push(m1);
            acc2.push(m2);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(acc1, acc2)| SpectralMoments {
            mu1: acc1.mean(),
            mu2: acc2.mean(),
            stderr1: acc1.stderr().unwrap_or_else(T::zero),
            stderr2: acc2.stderr().unwrap_or_else(T::zero),
            method: MomentMethod::MonteCarloSpectra,
        })
        .collect())
}

/// Closed-form `E[tr((Abar^T Abar)^+)]` for a standard Gaussian `n x p_bar`
/// matrix: `p_bar / (n - p_bar - 1)` when full rank (`n > p_bar + 1`), and
/// `n / (p_bar - n - 1)` in the rank-deficient case (`p_bar > n + 1`).
pub fn expected_pinv_gram_trace<T: Scalar>(n: usize, p_bar: usize) -> Result<T> {
    if n > p_bar + 1 {
        Ok(T::from_count(p_bar) / T::from_count(n - p_bar - 1))
    } else if p_bar > n + 1 {
        Ok(T::from_count(n) / T::from_count(p_bar - n - 1))
    } else {
        Err(Error::NearThreshold { n, p_bar })
    }
}

/// Fourth moments of the entries of a Haar orthogonal `p x p` matrix, for
/// distinct row indices `i != j` and column indices `l != k`:
/// `m4 = E[v_il^4]`, `m22 = E[v_il^2 v_ik^2] = E[v_il^2 v_jl^2]`,
/// `m_cross = E[v_il v_jl v_ik v_jk]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarFourthMoments<T> {
    pub m4: T,
    pub m22: T,
    pub m_cross: T,
}

pub fn haar_fourth_moments<T: Scalar>(p: usize) -> Result<HaarFourthMoments<T>> {
    if p <= 1 {
        return Err(Error::Unsupported("Haar fourth moments require p > 1".into()));
    }
    let pf = T::from_count(p);
    let base = pf * (pf + T::of(2.0));
    Ok(HaarFourthMoments {
        m4: T::of(3.0) / base,
        m22: T::one() / base,
        m_cross: -T::one() / ((pf - T::one()) * base),
    })
}

/// Coefficients of the projector second moments: for a standard Gaussian
/// `n x p` matrix with `p > n` and `M = A^+ A`,
/// `E[(M_SS)^2] = mu_q I` and `E[M_SF M_SF^T] = mu_qbar I` on the leading
/// `p_S x p_S` block, with `p_F = p - p_S`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectorMoments<T> {
    pub mu_q: T,
    pub mu_qbar: T,
}

pub fn q_expectation<T: Scalar>(n: usize, p: usize, p_s: usize) -> Result<ProjectorMoments<T>> {
    if p <= n || p <= 1 {
        return Err(Error::Unsupported(format!(
            "projector moments require p > n and p > 1, got n = {n}, p = {p}"
        )));
    }
    if p_s > p {
        return Err(Error::InvalidInput(format!("p_s = {p_s} exceeds p = {p}")));
    }
    let p_f = p - p_s;
    let nf = T::from_count(n);
    let pf = T::from_count(p);
    let mu_qbar =
        nf * T::from_count(p_f) * (pf - nf) / ((pf - T::one()) * pf * (pf + T::of(2.0)));
    Ok(ProjectorMoments {
        mu_q: nf / pf - mu_qbar,
        mu_qbar,
    })
}

/// Isotropic coefficient of the Gaussian sandwich `E[A K A^T] = tr(K) I_n`.
/// `K` must be symmetric.
pub fn gaussian_sandwich_trace<T: Scalar>(k: &DMatrix<T>) -> Result<T> {
    if k.nrows() != k.ncols() {
        return Err(Error::InvalidInput("K must be square".into()));
    }
    let scale = k.abs().max().max(T::one());
    for i in 0..k.nrows() {
        for j in (i + 1)..k.ncols() {
            if (k[(i, j)] - k[(j, i)]).abs() > T::of(1e-10) * scale {
                return Err(Error::InvalidInput(format!(
                    "K is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(k.trace())
}

// ---------------------------------------------------------------------------
// Sampling oracles. These estimate the closed forms above by simulation, for
// verification; each returns (estimate, standard error) pairs from Welford
// accumulators so large draw counts run in fixed memory.
// ---------------------------------------------------------------------------

/// Estimate and standard error.
#[derive(Clone, Copy, Debug)]
pub struct Estimate<T> {
    pub value: T,
    pub stderr: T,
}

impl<T: Scalar> Estimate<T> {
    fn from_welford(w: &Welford<T>) -> Self {
        Estimate {
            value: w.mean(),
            stderr: w.stderr().unwrap_or_else(T::zero),
        }
    }

    /// |value - want| in units of the standard error.
    pub fn sigmas_from(&self, want: T) -> T {
        if self.stderr == T::zero() {
            if self.value == want {
                T::zero()
            } else {
                T::of(f64::INFINITY)
            }
        } else {
            (self.value - want).abs() / self.stderr
        }
    }
}

/// Sampled `tr((Abar^T Abar)^+)` over Gaussian draws.
pub fn sample_pinv_gram_trace<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    p_bar: usize,
    draws: usize,
    rng: &mut R,
) -> Estimate<T> {
    let mut w = Welford::new();
    for _ in 0..draws {
        let spec = sample_spectrum::<T, R>(n, p_bar, rng);
        let cutoff = T::from_count(n.max(p_bar)) * T::eps() * spec.eigenvalues[0];
        let mut tr = T::zero();
        for &lam in spec.eigenvalues.iter() {
            if lam > cutoff {
                tr += T::one() / lam;
            }
        }
        w.push(tr);
    }
    Estimate::from_welford(&w)
}

/// Sampled Haar fourth moments at size `p`.
///
/// Per draw, each moment is averaged over disjoint index blocks (all entries
/// for `m4`; disjoint column pairs for `m22`; disjoint 2 x 2 minors for
/// `m_cross`) so the three estimators stay functionally independent; the
/// orthonormality constraints would otherwise tie the cross moment to `m22`
/// exactly. Standard errors come from the across-draw variance of the
/// per-draw averages.
pub fn sample_haar_fourth_moments<T: Scalar, R: Rng + ?Sized>(
    p: usize,
    draws: usize,
    rng: &mut R,
) -> (Estimate<T>, Estimate<T>, Estimate<T>) {
    assert!(p >= 2, "need p >= 2");
    let half = p / 2;
    let mut w4 = Welford::new();
    let mut w22 = Welford::new();
    let mut wx = Welford::new();
    for _ in 0..draws {
        let v = haar_orthogonal::<T, R>(p, rng);
        let mut s4 = T::zero();
        for x in v.iter() {
            let x2 = *x * *x;
            s4 += x2 * x2;
        }
        w4.push(s4 / T::from_count(p * p));

        let mut s22 = T::zero();
        for i in 0..p {
            for b in 0..half {
                let a = v[(i, 2 * b)];
                let c = v[(i, 2 * b + 1)];
                s22 += a * a * c * c;
            }
        }
        w22.push(s22 / T::from_count(p * half));

        let mut sx = T::zero();
        for rb in 0..half {
            for cb in 0..half {
                let (i, j) = (2 * rb, 2 * rb + 1);
                let (l, k) = (2 * cb, 2 * cb + 1);
                sx += v[(i, l)] * v[(j, l)] * v[(i, k)] * v[(j, k)];
            }
        }
        wx.push(sx / T::from_count(half * half));
    }
    (
        Estimate::from_welford(&w4),
        Estimate::from_welford(&w22),
        Estimate::from_welford(&wx),
    )
}

/// Sampled projector moments: diagonal means of `Q = (M_SS)^2` and
/// `Qbar = M_SF M_SF^T` for `M = A^+ A`, plus the largest off-diagonal mean
/// magnitude of `Q` in standard-error units.
pub struct SampledProjectorMoments<T> {
    pub mu_q: Estimate<T>,
    pub mu_qbar: Estimate<T>,
    pub max_offdiag_sigmas: T,
}

pub fn sample_q_expectation<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    p: usize,
    p_s: usize,
    draws: usize,
    rng: &mut R,
) -> SampledProjectorMoments<T> {
    assert!(p > n && p_s <= p && p_s >= 1, "hypotheses: p > n, 1 <= p_s <= p");
    let p_f = p - p_s;
    let mut wq = Welford::new();
    let mut wqbar = Welford::new();
    // Track one representative off-diagonal entry (0, 1) of Q.
    let mut woff = Welford::new();
    for _ in 0..draws {
        let a = DMatrix::<T>::from_fn(n, p, |_, _| T::std_normal(rng));
        // M = A^+ A = V_r V_r^T over the rank-n right singular subspace.
        let svd = nalgebra::SVD::new(a, false, true);
        let v_t = svd.v_t.expect("v_t requested");
        let m_s = v_t.columns(0, p_s).into_owned(); // n x p_s slice of V^T
        // M_SS = m_s^T m_s, M_SF = m_s^T v_t[:, p_s..].
        let m_ss = m_s.transpose() * &m_s;
        let q = &m_ss * &m_ss;
        let mut diag_q = T::zero();
        for i in 0..p_s {
            diag_q += q[(i, i)];
        }
        wq.push(diag_q / T::from_count(p_s));
        if p_s >= 2 {
            woff.push(q[(0, 1)]);
        }
        if p_f > 0 {
            let m_f = v_t.columns(p_s, p_f).into_owned();
            let m_sf = m_s.transpose() * &m_f;
            let mut diag_qbar = T::zero();
            for i in 0..p_s {
                let row = m_sf.row(i);
                diag_qbar += row.dot(&row);
            }
            wqbar.push(diag_qbar / T::from_count(p_s));
        } else {
            wqbar.push(T::zero());
        }
    }
    let off = Estimate::from_welford(&woff);
    SampledProjectorMoments {
        mu_q: Estimate::from_welford(&wq),
        mu_qbar: Estimate::from_welford(&wqbar),
        max_offdiag_sigmas: off.sigmas_from(T::zero()),
    }
}

/// Sampled mean of `A K A^T`, returned with per-entry standard errors.
pub fn sample_gaussian_sandwich<T: Scalar, R: Rng + ?Sized>(
    k: &DMatrix<T>,
    n: usize,
    draws: usize,
    rng: &mut R,
) -> (DMatrix<T>, DMatrix<T>) {
    let p = k.nrows();
    let count = T::from_count(draws);
    let mut mean = DMatrix::<T>::zeros(n, n);
    let mut m2 = DMatrix::<T>::zeros(n, n);
    let mut seen = T::zero();
    for _ in 0..draws {
        seen += T::one();
        let a = DMatrix::<T>::from_fn(n, p, |_, _| T::std_normal(rng));
        let s = &a * k * a.transpose();
        for i in 0..n {
            for j in 0..n {
                let delta = s[(i, j)] - mean[(i, j)];
                mean[(i, j)] += delta / seen;
                m2[(i, j)] += delta * (s[(i, j)] - mean[(i, j)]);
            }
        }
    }
    let se = m2.map(|x| (x / (count - T::one()) / count).sqrt());
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::StreamKey;

    fn rng(seed: u64) -> impl Rng {
        StreamKey::root(seed).rng()
    }

    #[test]
    fn spectrum_shape_and_rank() {
        let mut r = rng(50);
        let s = sample_spectrum::<f64, _>(4, 7, &mut r);
        assert_eq!(s.eigenvalues.len(), 7);
        let positive = s.eigenvalues.iter().filter(|&&l| l > 0.0).count();
        assert_eq!(positive, 4);
        for i in 3..7 {
            if i >= 4 {
                assert_eq!(s.eigenvalues[i], 0.0);
            }
        }
        for i in 0..6 {
            assert!(s.eigenvalues[i] >= s.eigenvalues[i + 1]);
        }
    }

    #[test]
    fn spectrum_symmetry_transpose() {
        // Eigenvalues of Abar^T Abar and Abar Abar^T agree on the leading
        // min(n, p_bar) entries.
        let mut r = rng(51);
        let a = DMatrix::<f64>::from_fn(6, 9, |_, _| {
            <f64 as Scalar>::std_normal(&mut r)
        });
        let s1 = a.clone().singular_values();
        let s2 = a.transpose().singular_values();
        for i in 0..6 {
            assert!((s1[i] * s1[i] - s2[i] * s2[i]).abs() / (s1[i] * s1[i]) < 1e-8);
        }
    }

    #[test]
    fn moments_at_zero_ridge_match_inverse_wishart() {
        // sigma_hat2 = 0, n > p_bar + 1: mu1 ~ p_bar / (n - p_bar - 1).
        let (n, p_bar) = (24usize, 6usize);
        let m = estimate_moments::<f64, _>(n, p_bar, 0.0, 3, 400, &mut rng(52)).unwrap();
        let want = expected_pinv_gram_trace::<f64>(n, p_bar).unwrap();
        assert!(
            (m.mu1 - want).abs() < 3.0 * m.stderr1,
            "mu1 {} vs {} (se {})",
            m.mu1,
            want,
            m.stderr1
        );
        // All eigenvalues positive, zero numerator: mu2 = 0 exactly.
        assert_eq!(m.mu2, 0.0);
    }

    #[test]
    fn moments_large_ridge_saturate() {
        let m = estimate_moments::<f64, _>(50, 20, 1e8, 10, 50, &mut rng(53)).unwrap();
        assert!((m.mu2 - 1.0).abs() < 1e-4, "mu2 = {}", m.mu2);
        assert!(m.mu1 < 1e-4);
    }

    #[test]
    fn moment_estimation_guards() {
        assert!(estimate_moments::<f64, _>(10, 5, 0.1, 2, 1, &mut rng(54)).is_err());
        assert!(estimate_moments::<f64, _>(10, 1, 0.1, 1, 10, &mut rng(54)).is_err());
        assert!(estimate_moments::<f64, _>(10, 5, 0.1, 9, 10, &mut rng(54)).is_err());
    }

    #[test]
    fn stderr_scales_as_sqrt_draws() {
        // Quadrupling the spectra should halve the standard errors, within
        // 30%.
        let a = estimate_moments::<f64, _>(30, 10, 1.0, 5, 200, &mut rng(55)).unwrap();
        let b = estimate_moments::<f64, _>(30, 10, 1.0, 5, 800, &mut rng(56)).unwrap();
        let ratio = b.stderr1 / a.stderr1;
        assert!((ratio - 0.5).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn pinv_gram_trace_closed_forms() {
        assert!((expected_pinv_gram_trace::<f64>(10, 4).unwrap() - 0.8).abs() < 1e-15);
        assert!((expected_pinv_gram_trace::<f64>(4, 10).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            expected_pinv_gram_trace::<f64>(10, 9),
            Err(Error::NearThreshold { .. })
        ));
        assert!(matches!(
            expected_pinv_gram_trace::<f64>(10, 10),
            Err(Error::NearThreshold { .. })
        ));
        assert!(matches!(
            expected_pinv_gram_trace::<f64>(10, 11),
            Err(Error::NearThreshold { .. })
        ));
    }

    #[test]
    fn pinv_gram_trace_sampled() {
        let mut r = rng(57);
        let est = sample_pinv_gram_trace::<f64, _>(10, 4, 10_000, &mut r);
        assert!(est.sigmas_from(0.8) < 3.0, "{} +- {}", est.value, est.stderr);
        let est = sample_pinv_gram_trace::<f64, _>(4, 10, 10_000, &mut r);
        assert!(est.sigmas_from(0.8) < 3.0, "{} +- {}", est.value, est.stderr);
    }

    #[test]
    fn haar_moment_closed_forms() {
        let m2 = haar_fourth_moments::<f64>(2).unwrap();
        assert!((m2.m4 - 0.375).abs() < 1e-15); // E[cos^4] for a uniform angle
        let m8 = haar_fourth_moments::<f64>(8).unwrap();
        assert!((m8.m4 - 3.0 / 80.0).abs() < 1e-15);
        assert!((m8.m22 - 1.0 / 80.0).abs() < 1e-15);
        assert!((m8.m_cross + 1.0 / 560.0).abs() < 1e-15);
        assert!(haar_fourth_moments::<f64>(1).is_err());
    }

    #[test]
    fn haar_moments_sampled() {
        let want = haar_fourth_moments::<f64>(8).unwrap();
        let (m4, m22, mx) = sample_haar_fourth_moments::<f64, _>(8, 20_000, &mut rng(58));
        assert!(m4.sigmas_from(want.m4) < 3.0, "m4 {} vs {}", m4.value, want.m4);
        assert!(m22.sigmas_from(want.m22) < 3.0, "m22 {} vs {}", m22.value, want.m22);
        assert!(mx.sigmas_from(want.m_cross) < 3.0, "mx {} vs {}", mx.value, want.m_cross);
    }

    #[test]
    fn q_expectation_closed_forms() {
        // Degenerate fake block: mu_q = n / p.
        let m = q_expectation::<f64>(3, 5, 5).unwrap();
        assert_eq!(m.mu_qbar, 0.0);
        assert!((m.mu_q - 0.6).abs() < 1e-15);
        // Hand value at (n, p, p_s) = (200, 400, 50).
        let m = q_expectation::<f64>(200, 400, 50).unwrap();
        let want = 200.0 * 350.0 * 200.0 / (399.0 * 400.0 * 402.0);
        assert!((m.mu_qbar - want).abs() < 1e-12);
        assert!((m.mu_qbar - 0.21821).abs() < 1e-5);
        assert!(q_expectation::<f64>(10, 5, 3).is_err());
    }

    #[test]
    fn q_expectation_sampled() {
        let want = q_expectation::<f64>(5, 12, 4).unwrap();
        let got = sample_q_expectation::<f64, _>(5, 12, 4, 20_000, &mut rng(59));
        assert!(
            got.mu_q.sigmas_from(want.mu_q) < 3.0,
            "mu_q {} vs {}",
            got.mu_q.value,
            want.mu_q
        );
        assert!(
            got.mu_qbar.sigmas_from(want.mu_qbar) < 3.0,
            "mu_qbar {} vs {}",
            got.mu_qbar.value,
            want.mu_qbar
        );
        assert!(got.max_offdiag_sigmas < 3.0);
    }

    #[test]
    fn sandwich_trace_values() {
        let id = DMatrix::<f64>::identity(5, 5);
        assert_eq!(gaussian_sandwich_trace(&id).unwrap(), 5.0);
        let d = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(gaussian_sandwich_trace(&d).unwrap(), 6.0);
        let mut bad = id.clone();
        bad[(0, 1)] = 0.5;
        assert!(gaussian_sandwich_trace(&bad).is_err());
    }

    #[test]
    fn sandwich_sampled() {
        let k = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let (mean, se) = sample_gaussian_sandwich(&k, 4, 20_000, &mut rng(60));
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 6.0 } else { 0.0 };
                assert!(
                    (mean[(i, j)] - want).abs() < 3.0 * se[(i, j)],
                    "entry ({i},{j}): {} vs {want} (se {})",
                    mean[(i, j)],
                    se[(i, j)]
                );
            }
        }
    }

    #[test]
    fn bulk_edge_fraction_small() {
        // For n / p_bar = 4 the eigenvalues of (1/n) Abar^T Abar concentrate
        // on [(1 - sqrt(1/4))^2, (1 + sqrt(1/4))^2] = [0.25, 2.25].
        let n = 2000;
        let p_bar = 500;
        let delta = 0.15;
        let spec = sample_spectrum::<f64, _>(n, p_bar, &mut rng(61));
        let lo = 0.25 - delta;
        let hi = 2.25 + delta;
        let outside = spec
            .eigenvalues
            .iter()
            .filter(|&&l| {
                let x = l / n as f64;
                x < lo || x > hi
            })
            .count();
        assert!(
            (outside as f64) < 0.01 * p_bar as f64,
            "{outside} of {p_bar} outside the bulk"
        );
    }

    #[test]
    fn haar_first_column_uniform_on_sphere() {
        // Chi-square goodness of fit for one coordinate of the first column
        // at p = 4: the marginal density is the semicircle
        // (2/pi) sqrt(1 - t^2), with CDF 1/2 + (t sqrt(1-t^2) + asin t)/pi.
        let bins = 16usize;
        let draws = 100_000usize;
        let cdf = |t: f64| 0.5 + (t * (1.0 - t * t).sqrt() + t.asin()) / std::f64::consts::PI;
        let edges: Vec<f64> = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        let mut r = rng(62);
        for _ in 0..draws {
            let q = haar_orthogonal::<f64, _>(4, &mut r);
            let t = q[(0, 0)];
            let idx = (((t + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let mut chi2 = 0.0;
        for b in 0..bins {
            let p = cdf(edges[b + 1]) - cdf(edges[b]);
            let expect = p * draws as f64;
            chi2 += (counts[b] as f64 - expect).powi(2) / expect;
        }
        // 99th percentile of chi-square with 15 degrees of freedom.
        assert!(chi2 < 30.578, "chi2 = {chi2}");
    }
}
