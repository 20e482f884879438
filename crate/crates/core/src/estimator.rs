//! Estimator construction and conditional (feature-fixed) MSE.
//!
//! The misspecified estimator is the LMMSE matrix built from the assumed
//! model: identity prior on `[x_S; x_F]` and noise belief `sigma_hat2 * I`.
//! With the cached SVD `Abar = U diag(s) V^T` it is
//! `Wbar = V diag(s_i / (s_i^2 + sigma_hat2)) U^T`, which reduces to the
//! Moore-Penrose pseudoinverse `Abar^+` at `sigma_hat2 = 0` and coincides
//! with both ridge normal-equation forms otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Covariance, FeatureSet};
use crate::scalar::Scalar;

/// The misspecified LMMSE estimator `Wbar`, a `p_bar x n` matrix with blocks
/// `W_S` (top `p_S` rows) and `W_F` (bottom `p_F` rows). The block estimating
/// the missing unknowns is identically zero and is not stored.
#[derive(Clone, Debug)]
pub struct MisspecifiedEstimator<T> {
    w_bar: DMatrix<T>,
    p_s: usize,
    sigma_hat2: T,
}

impl<T: Scalar> MisspecifiedEstimator<T> {
    pub fn w_bar(&self) -> &DMatrix<T> {
        &self.w_bar
    }

    /// Top block `W_S in R^{p_S x n}`.
    pub fn w_s(&self) -> DMatrix<T> {
        self.w_bar.rows(0, self.p_s).into_owned()
    }

    /// Bottom block `W_F in R^{p_F x n}`.
    pub fn w_f(&self) -> DMatrix<T> {
        self.w_bar.rows(self.p_s, self.p_f()).into_owned()
    }

    pub fn p_s(&self) -> usize {
        self.p_s
    }

    pub fn p_f(&self) -> usize {
        self.w_bar.nrows() - self.p_s
    }

    pub fn p_bar(&self) -> usize {
        self.w_bar.nrows()
    }

    pub fn n(&self) -> usize {
        self.w_bar.ncols()
    }

    /// Assumed noise variance used at construction.
    pub fn sigma_hat2(&self) -> T {
        self.sigma_hat2
    }
}

/// Estimates produced from one observation vector: `x_S` and `x_F` from the
/// corresponding blocks of `Wbar`, and the zero estimate for the missing
/// unknowns.
#[derive(Clone, Debug)]
pub struct EstimateParts<T> {
    pub x_s_hat: DVector<T>,
    pub x_f_hat: DVector<T>,
    pub x_c_hat: DVector<T>,
}

/// `V diag(s_i / (s_i^2 + sigma_hat2)) U^T` from a cached SVD; at
/// `sigma_hat2 = 0` singular values below `max(n, p_bar) * eps * s_max` are
/// treated as zero (the usual numerical rank) and the result is the
/// pseudoinverse.
fn filtered_wbar<T: Scalar>(
    svd: &crate::model::SvdCache<T>,
    sigma_hat2: T,
    n: usize,
    p_bar: usize,
) -> DMatrix<T> {
    let k = svd.singular_values.len();
    if k == 0 {
        return DMatrix::zeros(p_bar, n);
    }
    let s_max = svd.singular_values[0];
    let cutoff = T::from_count(n.max(p_bar)) * T::eps() * s_max;
    let mut filter = DVector::<T>::zeros(k);
    for i in 0..k {
        let s = svd.singular_values[i];
        filter[i] = if sigma_hat2 > T::zero() {
            s / (s * s + sigma_hat2)
        } else if s > cutoff {
            T::one() / s
        } else {
            T::zero()
        };
    }
    // Wbar = V diag(filter) U^T.
    let mut v = svd.v_t.transpose(); // p_bar x k
    for (i, mut col) in v.column_iter_mut().enumerate() {
        col.scale_mut(filter[i]);
    }
    v * svd.u.transpose()
}

/// Build the misspecified estimator from the cached SVD of `Abar`.
///
/// At zero assumed noise with a whitened fake block available (tall shape,
/// near-degenerate fake covariance), the pseudoinverse is taken through the
/// whitened matrix and mapped back: the shared block is unchanged by that
/// transformation and the weak fake directions survive the rank cutoff.
pub fn build_misspecified<T: Scalar>(
    features: &FeatureSet<T>,
    sigma_hat2: T,
) -> Result<MisspecifiedEstimator<T>> {
    if !sigma_hat2.finite() || sigma_hat2 < T::zero() {
        return Err(Error::InvalidInput(format!(
            "sigma_hat2 must be finite and >= 0, got {}",
            sigma_hat2.to_f64_lossy()
        )));
    }
    let n = features.n();
    let p_bar = features.p_bar();
    let p_s = features.p_s();
    let p_f = features.p_f();
    let w_bar = match (sigma_hat2 == T::zero(), features.fake_whitening()) {
        (true, Some(white)) => {
            let mut w_bar = filtered_wbar(&white.svd, T::zero(), n, p_bar);
            // Map the fake block back through F^-T = basis * diag(inv_sqrt).
            let mut bottom = w_bar.rows(p_s, p_f).into_owned();
            for (i, mut row) in bottom.row_iter_mut().enumerate() {
                row.scale_mut(white.inv_sqrt[i]);
            }
            w_bar.rows_mut(p_s, p_f).copy_from(&(&white.basis * bottom));
            w_bar
        }
        _ => filtered_wbar(features.svd(), sigma_hat2, n, p_bar),
    };
    Ok(MisspecifiedEstimator {
        w_bar,
        p_s: features.p_s(),
        sigma_hat2,
    })
}

/// The oracle LMMSE estimator built with full knowledge of the underlying
/// system: `W_O = K_x Atilde^T (Atilde K_x Atilde^T + sigma_v2 I)^+`, where
/// `K_x = blockdiag(K_x_S, K_x_C)`. Returned for baseline comparison only.
pub fn build_oracle<T: Scalar>(
    features: &FeatureSet<T>,
    cov_x_s: &Covariance<T>,
    cov_x_c: &Covariance<T>,
    sigma_v2: T,
) -> Result<DMatrix<T>> {
    if cov_x_s.dim() != features.p_s() || cov_x_c.dim() != features.p_c() {
        return Err(Error::DimensionMismatch(format!(
            "covariances ({}, {}) do not match features ({}, {})",
            cov_x_s.dim(),
            cov_x_c.dim(),
            features.p_s(),
            features.p_c()
        )));
    }
    let n = features.n();
    let p_s = features.p_s();
    let p_c = features.p_c();
    let p = p_s + p_c;
    let atilde = features.atilde();
    let mut k_x = DMatrix::<T>::zeros(p, p);
    k_x.view_mut((0, 0), (p_s, p_s)).copy_from(cov_x_s.matrix());
    k_x.view_mut((p_s, p_s), (p_c, p_c)).copy_from(cov_x_c.matrix());
    let k_xy = &k_x * atilde.transpose();
    let mut k_y = &atilde * &k_xy;
    for i in 0..n {
        k_y[(i, i)] += sigma_v2;
    }
    let k_y_pinv = k_y
        .pseudo_inverse(T::from_count(n) * T::eps())
        .map_err(|e| Error::InvalidInput(format!("pseudoinverse failed: {e}")))?;
    Ok(k_xy * k_y_pinv)
}

/// Apply the estimator: `x_S_hat = W_S y`, `x_F_hat = W_F y`, and the zero
/// vector for the missing unknowns.
pub fn estimate<T: Scalar>(
    est: &MisspecifiedEstimator<T>,
    y: &DVector<T>,
    p_c: usize,
) -> Result<EstimateParts<T>> {
    if y.len() != est.n() {
        return Err(Error::DimensionMismatch(format!(
            "observation length {} does not match n = {}",
            y.len(),
            est.n()
        )));
    }
    let xbar_hat = est.w_bar() * y;
    Ok(EstimateParts {
        x_s_hat: xbar_hat.rows(0, est.p_s()).into_owned(),
        x_f_hat: xbar_hat.rows(est.p_s(), est.p_f()).into_owned(),
        x_c_hat: DVector::zeros(p_c),
    })
}

/// The per-realization (feature-fixed) pieces of the MSE decomposition:
/// with `Abar` held fixed and the expectation taken over the unknowns, the
/// noise and the missing features,
///
/// - `eps1 = tr((I - W_S A_S) K_x_S (I - W_S A_S)^T)`
/// - `eps2_weight = tr(W_S W_S^T)` (multiplies the effective noise power)
/// - `eps_c = tr(K_x_C)`
/// - `fake_signal_leak = tr(W_F A_S K_x_S A_S^T W_F^T)`
/// - `fake_noise_weight = tr(W_F W_F^T)`
#[derive(Clone, Copy, Debug)]
pub struct ConditionalMse<T> {
    pub eps1: T,
    pub eps2_weight: T,
    pub eps_c: T,
    pub fake_signal_leak: T,
    pub fake_noise_weight: T,
}

impl<T: Scalar> ConditionalMse<T> {
    /// Conditional MSE for `(x_S, x_C)`:
    /// `eps1 + eps2_weight * (tr(K_x_C) + sigma_v2) + tr(K_x_C)`.
    pub fn mse(&self, sigma_v2: T) -> T {
        self.eps1 + self.eps2_weight * (self.eps_c + sigma_v2) + self.eps_c
    }

    /// Conditional MSE of the `x_S` block alone.
    pub fn mse_shared(&self, sigma_v2: T) -> T {
        self.eps1 + self.eps2_weight * (self.eps_c + sigma_v2)
    }

    /// Conditional MSE of the fake block,
    /// `fake_signal_leak + (tr(K_x_C) + sigma_v2) * fake_noise_weight`.
    pub fn mse_fake(&self, sigma_v2: T) -> T {
        self.fake_signal_leak + (self.eps_c + sigma_v2) * self.fake_noise_weight
    }

    /// Conditional output MSE for a fresh observation.
    pub fn mse_output(&self, sigma_v2: T) -> T {
        self.mse(sigma_v2) + self.mse_fake(sigma_v2) + sigma_v2
    }
}

/// Evaluate the conditional MSE pieces for an estimator and the features it
/// was built from.
pub fn conditional_mse<T: Scalar>(
    est: &MisspecifiedEstimator<T>,
    features: &FeatureSet<T>,
    k_x_s: &DMatrix<T>,
    tr_k_x_c: T,
) -> Result<ConditionalMse<T>> {
    let p_s = features.p_s();
    if est.p_s() != p_s || est.n() != features.n() || est.p_f() != features.p_f() {
        return Err(Error::DimensionMismatch(
            "estimator was not built from these features".into(),
        ));
    }
    if k_x_s.nrows() != p_s || k_x_s.ncols() != p_s {
        return Err(Error::DimensionMismatch(format!(
            "K_x_S is {}x{} but p_s = {}",
            k_x_s.nrows(),
            k_x_s.ncols(),
            p_s
        )));
    }
    let w_s = est.w_s();
    let w_f = est.w_f();
    let m = DMatrix::<T>::identity(p_s, p_s) - &w_s * features.a_s();
    let eps1 = frob_inner(&(&m * k_x_s), &m);
    let eps2_weight = frob_inner(&w_s, &w_s);
    let b = &w_f * features.a_s();
    let fake_signal_leak = frob_inner(&(&b * k_x_s), &b);
    let fake_noise_weight = frob_inner(&w_f, &w_f);
    Ok(ConditionalMse {
        eps1: eps1.max(T::zero()),
        eps2_weight,
        eps_c: tr_k_x_c,
        fake_signal_leak: fake_signal_leak.max(T::zero()),
        fake_noise_weight,
    })
}

/// `tr(A B^T)` accumulated entrywise.
fn frob_inner<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_features, sample_unknowns, generate_observations, ProblemConfig};
    use crate::stream::StreamKey;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn rng(seed: u64) -> impl Rng {
        StreamKey::root(seed).rng()
    }

    fn gaussian_features(p_s: usize, p_c: usize, p_f: usize, n: usize, seed: u64) -> FeatureSet<f64> {
        let cfg = ProblemConfig::isotropic(p_s, p_c, p_f, n, 1.0, 0.0);
        sample_features(&cfg, None, &mut rng(seed)).unwrap()
    }

    fn identity_features(n: usize) -> FeatureSet<f64> {
        FeatureSet::from_parts(
            DMatrix::identity(n, n),
            DMatrix::zeros(n, 0),
            DMatrix::zeros(n, 0),
        )
        .unwrap()
    }

    #[test]
    fn identity_features_pinv_is_identity() {
        let f = identity_features(4);
        let est = build_misspecified(&f, 0.0).unwrap();
        let err = (est.w_bar() - DMatrix::<f64>::identity(4, 4)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn identity_features_unit_ridge_halves() {
        // s_i = 1, so s / (s^2 + 1) = 1/2.
        let f = identity_features(4);
        let est = build_misspecified(&f, 1.0).unwrap();
        let err = (est.w_bar() - DMatrix::<f64>::identity(4, 4).scale(0.5)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn ridge_matches_direct_solve() {
        // Independent oracle: solve (Abar^T Abar + 0.7 I) X = Abar^T.
        let f = gaussian_features(2, 0, 1, 6, 21);
        let est = build_misspecified(&f, 0.7).unwrap();
        let abar = f.abar();
        let p = abar.ncols();
        let lhs = abar.transpose() * &abar + DMatrix::<f64>::identity(p, p).scale(0.7);
        let oracle = lhs.lu().solve(&abar.transpose()).unwrap();
        let rel = (est.w_bar() - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-10, "relative error {rel}");
    }

    #[test]
    fn ridge_routes_agree_across_shapes() {
        // The n x n and p_bar x p_bar normal-equation routes must agree with
        // the SVD construction for tall, square and wide shapes.
        let shapes = [(12usize, 5usize), (8, 8), (5, 12)];
        for (k, &(n, p_bar)) in shapes.iter().enumerate() {
            for (j, sigma_hat2) in [0.1, 1.0, 10.0].into_iter().enumerate() {
                let f = gaussian_features(p_bar, 0, 0, n, 100 + (k * 3 + j) as u64);
                let est = build_misspecified(&f, sigma_hat2).unwrap();
                let abar = f.abar();
                let route_n = {
                    let lhs = &abar * abar.transpose()
                        + DMatrix::<f64>::identity(n, n).scale(sigma_hat2);
                    lhs.lu().solve(&abar.clone()).unwrap().transpose()
                };
                let route_p = {
                    let lhs = abar.transpose() * &abar
                        + DMatrix::<f64>::identity(p_bar, p_bar).scale(sigma_hat2);
                    lhs.lu().solve(&abar.transpose()).unwrap()
                };
                let denom = route_n.norm();
                assert!((est.w_bar() - &route_n).norm() / denom < 1e-8);
                assert!((est.w_bar() - &route_p).norm() / denom < 1e-8);
            }
        }
    }

    #[test]
    fn pseudoinverse_limit() {
        // Wbar at sigma_hat2 = 1e-12 approaches Abar^+ for well-conditioned
        // shapes (|n - p_bar| >= 5).
        for (n, p_bar, seed) in [(20usize, 8usize, 1u64), (8, 20, 2)] {
            let f = gaussian_features(p_bar, 0, 0, n, seed);
            let w_ridge = build_misspecified(&f, 1e-12).unwrap();
            let w_pinv = build_misspecified(&f, 0.0).unwrap();
            let rel = (w_ridge.w_bar() - w_pinv.w_bar()).norm() / w_pinv.w_bar().norm();
            assert!(rel < 1e-4, "shape ({n},{p_bar}): {rel}");
        }
    }

    #[test]
    fn wbar_idempotent_identity_at_zero_ridge() {
        // Wbar * Abar * Wbar = Wbar for the pseudoinverse.
        let f = gaussian_features(3, 0, 4, 5, 31);
        let est = build_misspecified(&f, 0.0).unwrap();
        let abar = f.abar();
        let lhs = est.w_bar() * &abar * est.w_bar();
        let rel = (&lhs - est.w_bar()).norm() / est.w_bar().norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn estimate_is_blockwise_and_zero_on_zero() {
        let f = gaussian_features(3, 2, 2, 6, 32);
        let est = build_misspecified(&f, 0.5).unwrap();
        let y = nalgebra::DVector::<f64>::zeros(6);
        let e = estimate(&est, &y, 2).unwrap();
        assert!(e.x_s_hat.iter().all(|&x| x == 0.0));
        assert!(e.x_f_hat.iter().all(|&x| x == 0.0));
        assert_eq!(e.x_c_hat, nalgebra::DVector::zeros(2));
    }

    #[test]
    fn estimate_matches_row_dot_oracle() {
        let f = gaussian_features(3, 1, 2, 6, 33);
        let est = build_misspecified(&f, 0.3).unwrap();
        let y = nalgebra::DVector::<f64>::from_fn(6, |i, _| (i as f64).sin());
        let e = estimate(&est, &y, 1).unwrap();
        let w_s = est.w_s();
        for i in 0..3 {
            let mut dot = 0.0;
            for j in 0..6 {
                dot += w_s[(i, j)] * y[j];
            }
            assert!((e.x_s_hat[i] - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_at_square_full_rank() {
        // p_bar = n, sigma_hat2 = 0: the model reproduces the observations.
        let f = gaussian_features(10, 0, 10, 20, 34);
        let est = build_misspecified(&f, 0.0).unwrap();
        let y = nalgebra::DVector::<f64>::from_fn(20, |i, _| (i as f64 * 0.7).cos());
        let e = estimate(&est, &y, 0).unwrap();
        let mut xbar = nalgebra::DVector::<f64>::zeros(20);
        xbar.rows_mut(0, 10).copy_from(&e.x_s_hat);
        xbar.rows_mut(10, 10).copy_from(&e.x_f_hat);
        let resid = (f.abar() * xbar - &y).norm() / y.norm();
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn oracle_shrinks_with_huge_noise() {
        let f = gaussian_features(3, 2, 0, 8, 35);
        let cov_s = Covariance::<f64>::identity(3);
        let cov_c = Covariance::<f64>::identity(2);
        let w1 = build_oracle(&f, &cov_s, &cov_c, 1.0).unwrap();
        let w2 = build_oracle(&f, &cov_s, &cov_c, 1e6).unwrap();
        assert!(w2.norm() < 1e-3 * w1.norm());
    }

    #[test]
    fn oracle_equals_misspecified_without_misspecification() {
        // p_C = 0, K_x = I, sigma_v2 = sigma_hat2: the two estimators agree
        // on the shared block (there is no fake block here).
        let f = gaussian_features(4, 0, 0, 9, 36);
        let cov_s = Covariance::<f64>::identity(4);
        let cov_c = Covariance::<f64>::empty();
        let w_o = build_oracle(&f, &cov_s, &cov_c, 0.8).unwrap();
        let est = build_misspecified(&f, 0.8).unwrap();
        let rel = (&w_o - est.w_bar()).norm() / w_o.norm();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn oracle_beats_misspecified_on_average() {
        let cfg = ProblemConfig::isotropic(3, 2, 3, 10, 0.5, 0.0);
        let mut r = rng(37);
        let f = sample_features(&cfg, None, &mut r).unwrap();
        let cov_s = Covariance::<f64>::identity(3);
        let cov_c = Covariance::<f64>::identity(2);
        let w_o = build_oracle(&f, &cov_s, &cov_c, 0.5).unwrap();
        let est = build_misspecified(&f, 0.0).unwrap();
        let mut diff = crate::stats::Welford::<f64>::new();
        for _ in 0..10_000 {
            let d = sample_unknowns(&cov_s, &cov_c, 0.5, 10, &mut r);
            let y = generate_observations(&f, &d).unwrap();
            let mut x = nalgebra::DVector::<f64>::zeros(5);
            x.rows_mut(0, 3).copy_from(&d.x_s);
            x.rows_mut(3, 2).copy_from(&d.x_c);
            let err_o = (&x - &w_o * &y).norm_squared();
            let e = estimate(&est, &y, 2).unwrap();
            let err_m = (&d.x_s - &e.x_s_hat).norm_squared() + d.x_c.norm_squared();
            diff.push(err_o - err_m);
        }
        let se = diff.stderr().unwrap();
        assert!(diff.mean() <= 3.0 * se, "oracle not better: {} +- {}", diff.mean(), se);
    }

    #[test]
    fn conditional_mse_zero_eps1_when_overdetermined() {
        // n > p_bar, full rank, sigma_hat2 = 0: W_S A_S = I projection.
        let f = gaussian_features(4, 1, 3, 20, 38);
        let est = build_misspecified(&f, 0.0).unwrap();
        let k_x_s = DMatrix::<f64>::identity(4, 4);
        let c = conditional_mse(&est, &f, &k_x_s, 1.0).unwrap();
        assert!(c.eps1 < 1e-10, "eps1 = {}", c.eps1);
    }

    #[test]
    fn conditional_mse_nothing_estimated() {
        let f = gaussian_features(0, 2, 3, 6, 39);
        let est = build_misspecified(&f, 0.0).unwrap();
        let k_x_s = DMatrix::<f64>::zeros(0, 0);
        let c = conditional_mse(&est, &f, &k_x_s, 2.0).unwrap();
        assert_eq!(c.eps1, 0.0);
        assert_eq!(c.eps2_weight, 0.0);
        assert!((c.mse(0.7) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn conditional_mse_matches_monte_carlo() {
        // Sample average of ||x - x_hat||^2 over fresh (x, v, A_C) draws.
        let p_s = 3;
        let p_c = 2;
        let n = 8;
        let sigma_v2 = 0.5;
        let cfg = ProblemConfig::isotropic(p_s, p_c, 2, n, sigma_v2, 0.4);
        let mut r = rng(40);
        let f = sample_features(&cfg, None, &mut r).unwrap();
        let est = build_misspecified(&f, 0.4).unwrap();
        let k_x_s = DMatrix::<f64>::identity(p_s, p_s);
        let cm = conditional_mse(&est, &f, &k_x_s, p_c as f64).unwrap();
        let want = cm.mse(sigma_v2);

        let cov_s = Covariance::<f64>::identity(p_s);
        let cov_c = Covariance::<f64>::identity(p_c);
        let mut w = crate::stats::Welford::<f64>::new();
        for _ in 0..100_000 {
            // Missing features are redrawn along with the unknowns: they act
            // as part of the effective noise for the fixed Abar.
            let a_c = DMatrix::<f64>::from_fn(n, p_c, |_, _| {
                <f64 as crate::scalar::Scalar>::std_normal(&mut r)
            });
            let fresh = FeatureSet::from_parts(f.a_s().clone(), a_c, f.a_f().clone()).unwrap();
            let d = sample_unknowns(&cov_s, &cov_c, sigma_v2, n, &mut r);
            let y = generate_observations(&fresh, &d).unwrap();
            let e = estimate(&est, &y, p_c).unwrap();
            let err = (&d.x_s - &e.x_s_hat).norm_squared() + d.x_c.norm_squared();
            w.push(err);
        }
        let se = w.stderr().unwrap();
        assert!(
            (w.mean() - want).abs() < 3.0 * se,
            "mc {} vs conditional {} (se {})",
            w.mean(),
            want,
            se
        );
    }

    #[test]
    fn whitened_route_matches_plain_when_both_accurate() {
        // Moderately decayed fake covariance: condition ~ 1e7 triggers the
        // whitened path but stays within reach of the plain SVD, so the two
        // routes must agree.
        let cfg = ProblemConfig::isotropic(5, 0, 8, 28, 1.0, 0.0);
        let mut r = rng(70);
        let k_a = Covariance::<f64>::identity(5);
        let k_af = crate::model::CovarianceSpec::decayed(8, 7.0)
            .materialize(&mut r)
            .unwrap();
        assert!(k_af.condition() > 1e6);
        let f = sample_features(&cfg, Some((&k_a, &k_af)), &mut r).unwrap();
        assert!(f.fake_whitening().is_some());
        let est = build_misspecified(&f, 0.0).unwrap();
        let plain = FeatureSet::from_parts(f.a_s().clone(), f.a_c().clone(), f.a_f().clone())
            .unwrap();
        assert!(plain.fake_whitening().is_none());
        let est_plain = build_misspecified(&plain, 0.0).unwrap();
        let rel = (est.w_bar() - est_plain.w_bar()).norm() / est_plain.w_bar().norm();
        assert!(rel < 1e-7, "routes disagree: {rel}");
    }

    #[test]
    fn whitened_route_survives_degenerate_fake_covariance() {
        // Steep decay (condition ~ 1e24): the plain cutoff would drop fake
        // directions; the whitened pseudoinverse must still satisfy
        // W_S * Abar = [I, 0].
        let cfg = ProblemConfig::isotropic(6, 0, 10, 30, 1.0, 0.0);
        let mut r = rng(71);
        let k_a = Covariance::<f64>::identity(6);
        let k_af = crate::model::CovarianceSpec::decayed(10, 20.0)
            .materialize(&mut r)
            .unwrap();
        let f = sample_features(&cfg, Some((&k_a, &k_af)), &mut r).unwrap();
        assert!(f.fake_whitening().is_some());
        let est = build_misspecified(&f, 0.0).unwrap();
        let proj = est.w_s() * f.abar();
        let mut want = DMatrix::<f64>::zeros(6, 16);
        want.view_mut((0, 0), (6, 6)).copy_from(&DMatrix::identity(6, 6));
        let err = (proj - want).abs().max();
        assert!(err < 1e-8, "W_S Abar defect {err}");
    }

    #[test]
    fn non_finite_sigma_rejected() {
        let f = gaussian_features(2, 0, 1, 5, 41);
        assert!(build_misspecified(&f, f64::NAN).is_err());
        assert!(build_misspecified(&f, -1.0).is_err());
    }
}
