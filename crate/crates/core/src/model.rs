//! Domain types and sampling for the underlying system and the misspecified
//! model.
//!
//! The underlying system generates observations `y = A_S x_S + A_C x_C + v`.
//! The model used for estimation sees `A_S` plus fake features `A_F` (and
//! misses `A_C`), so its regressor matrix is `Abar = [A_S, A_F]` with
//! `p_bar = p_S + p_F` columns. This module samples feature matrices,
//! unknowns and noise, materializes covariance structures, and caches the
//! singular value decomposition of `Abar` that the estimator construction
//! reuses.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Covariance structure of one block of unknowns or features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovKind<T> {
    /// `scale * I`.
    Isotropic { scale: T },
    /// Haar-rotated spectrum `diag(1^alpha, ..., dim^alpha)` normalized so
    /// the trace equals `dim`.
    DecayedEigen { alpha: T },
}

/// Declarative covariance specification; [`CovarianceSpec::materialize`]
/// turns it into a concrete matrix plus sampling factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceSpec<T> {
    pub dim: usize,
    pub kind: CovKind<T>,
}

impl<T: Scalar> CovarianceSpec<T> {
    pub fn isotropic(dim: usize, scale: T) -> Self {
        CovarianceSpec {
            dim,
            kind: CovKind::Isotropic { scale },
        }
    }

    /// Identity covariance.
    pub fn unit(dim: usize) -> Self {
        Self::isotropic(dim, T::one())
    }

    pub fn decayed(dim: usize, alpha: T) -> Self {
        CovarianceSpec {
            dim,
            kind: CovKind::DecayedEigen { alpha },
        }
    }

    /// Trace of the materialized matrix, available without materializing:
    /// `scale * dim` for the isotropic kind, `dim` for the normalized
    /// decayed-eigenvalue kind. A zero-width spec has trace 0.
    pub fn nominal_trace(&self) -> T {
        match self.kind {
            CovKind::Isotropic { scale } => scale * T::from_count(self.dim),
            CovKind::DecayedEigen { .. } => T::from_count(self.dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CovKind::Isotropic { scale } => {
                if !scale.finite() || scale <= T::zero() {
                    return Err(Error::InvalidSpec(format!(
                        "isotropic scale must be positive and finite, got {}",
                        scale.to_f64_lossy()
                    )));
                }
            }
            CovKind::DecayedEigen { alpha } => {
                if !alpha.finite() {
                    return Err(Error::InvalidSpec("decay exponent must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Materialize the covariance matrix together with a factor `F` such
    /// that `K = F F^T`, used for sampling.
    ///
    /// For the decayed kind the factor is `U diag(sqrt(c * i^alpha))` with
    /// `U` Haar orthogonal, which is exact by construction; a triangular
    /// Cholesky factor would fail for steep decays (the spectrum spans many
    /// orders of magnitude). Positive definiteness holds whenever the
    /// smallest normalized eigenvalue exceeds `-1e-12` times the largest,
    /// which is guaranteed here since all eigenvalues are positive.
    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Covariance<T>> {
        self.validate()?;
        if self.dim == 0 {
            return Err(Error::InvalidSpec("covariance dimension must be >= 1".into()));
        }
        match self.kind {
            CovKind::Isotropic { scale } => Ok(Covariance::isotropic(self.dim, scale)),
            CovKind::DecayedEigen { alpha } => {
                let dim = self.dim;
                let raw = DVector::<T>::from_fn(dim, |i, _| {
                    T::from_count(i + 1).powf(alpha)
                });
                let total = raw.sum();
                let c = T::from_count(dim) / total;
                let eigenvalues = raw * c;
                let u = haar_orthogonal::<T, R>(dim, rng);
                let mut factor = u.clone();
                for (j, mut col) in factor.column_iter_mut().enumerate() {
                    let s = eigenvalues[j].sqrt();
                    col.scale_mut(s);
                }
                // K = U diag(lam) U^T, symmetrized against round-off.
                let k = &factor * factor.transpose();
                let matrix = (&k + k.transpose()).scale(T::of(0.5));
                Ok(Covariance {
                    matrix,
                    factor,
                    eigenvalues,
                    basis: Some(u),
                })
            }
        }
    }
}

/// A materialized covariance: the matrix, its eigenvalues, and a cached
/// factor `F` with `K = F F^T` for sampling. Rotated kinds also keep the
/// eigenbasis so severely anisotropic blocks can be whitened downstream.
#[derive(Clone, Debug)]
pub struct Covariance<T> {
    matrix: DMatrix<T>,
    factor: DMatrix<T>,
    eigenvalues: DVector<T>,
    basis: Option<DMatrix<T>>,
}

impl<T: Scalar> Covariance<T> {
    fn isotropic(dim: usize, scale: T) -> Self {
        let s = scale.sqrt();
        Covariance {
            matrix: DMatrix::from_diagonal_element(dim, dim, scale),
            factor: DMatrix::from_diagonal_element(dim, dim, s),
            eigenvalues: DVector::from_element(dim, scale),
            basis: None,
        }
    }

    /// Zero-width covariance, the first-class representation for `p_C = 0`
    /// or `p_F = 0` blocks.
    pub fn empty() -> Self {
        Covariance {
            matrix: DMatrix::zeros(0, 0),
            factor: DMatrix::zeros(0, 0),
            eigenvalues: DVector::zeros(0),
            basis: None,
        }
    }

    /// Identity covariance of the given width (zero width allowed).
    pub fn identity(dim: usize) -> Self {
        if dim == 0 {
            Self::empty()
        } else {
            Self::isotropic(dim, T::one())
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    pub fn trace(&self) -> T {
        self.matrix.trace()
    }

    /// Eigenbasis of rotated kinds; `None` when the matrix is diagonal.
    pub fn eigen_basis(&self) -> Option<&DMatrix<T>> {
        self.basis.as_ref()
    }

    /// Ratio of the largest to the smallest eigenvalue (1 for empty).
    pub fn condition(&self) -> T {
        if self.dim() == 0 {
            return T::one();
        }
        let mut lo = self.eigenvalues[0];
        let mut hi = lo;
        for &l in self.eigenvalues.iter() {
            lo = lo.min(l);
            hi = hi.max(l);
        }
        hi / lo
    }

    /// One draw of `N(0, K)`.
    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let z = DVector::from_fn(self.dim(), |_, _| T::std_normal(rng));
        &self.factor * z
    }

    /// `n` i.i.d. rows of `N(0, K)`: returns an `n x dim` matrix.
    pub fn sample_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<T> {
        self.sample_rows_keep_white(n, rng).0
    }

    /// As [`Covariance::sample_rows`], also returning the underlying
    /// standard-normal draws `Z` (the colored rows are `Z F^T`).
    pub fn sample_rows_keep_white<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> (DMatrix<T>, DMatrix<T>) {
        let dim = self.dim();
        let z = DMatrix::from_fn(n, dim, |_, _| T::std_normal(rng));
        (&z * self.factor.transpose(), z)
    }
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
/// the sign of each diagonal entry of R folded into the corresponding column
/// of Q. Without the sign correction the QR convention biases the
/// distribution away from Haar measure.
pub fn haar_orthogonal<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<T> {
    if dim == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| T::std_normal(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < T::zero() {
            col.neg_mut();
        }
    }
    q
}

/// The full experiment cell: dimensions, noise levels and covariance
/// structure of the unknowns. The assumed prior of the misspecified model is
/// fixed to the identity on `p_bar = p_S + p_F`, and the assumed noise
/// covariance to `sigma_hat2 * I_n`.
#[derive(Clone, Debug)]
pub struct ProblemConfig<T> {
    /// Features present in both the system and the model.
    pub p_s: usize,
    /// Features of the system missing from the model.
    pub p_c: usize,
    /// Fake features: in the model, absent from the system.
    pub p_f: usize,
    /// Number of observations.
    pub n: usize,
    /// True noise variance.
    pub sigma_v2: T,
    /// Assumed noise variance (the ridge parameter of the estimator).
    pub sigma_hat2: T,
    pub cov_x_s: CovarianceSpec<T>,
    pub cov_x_c: CovarianceSpec<T>,
}

impl<T: Scalar> ProblemConfig<T> {
    /// Cell with identity covariances on the unknowns.
    pub fn isotropic(p_s: usize, p_c: usize, p_f: usize, n: usize, sigma_v2: T, sigma_hat2: T) -> Self {
        ProblemConfig {
            p_s,
            p_c,
            p_f,
            n,
            sigma_v2,
            sigma_hat2,
            cov_x_s: CovarianceSpec::unit(p_s),
            cov_x_c: CovarianceSpec::unit(p_c),
        }
    }

    /// Total width of the underlying system, `p = p_S + p_C`.
    pub fn p(&self) -> usize {
        self.p_s + self.p_c
    }

    /// Width of the misspecified model, `p_bar = p_S + p_F`.
    pub fn p_bar(&self) -> usize {
        self.p_s + self.p_f
    }

    pub fn tr_k_x_s(&self) -> T {
        self.cov_x_s.nominal_trace()
    }

    pub fn tr_k_x_c(&self) -> T {
        self.cov_x_c.nominal_trace()
    }

    /// `tr(K_x) = tr(K_x_S) + tr(K_x_C)`, the a priori uncertainty.
    pub fn tr_k_x(&self) -> T {
        self.tr_k_x_s() + self.tr_k_x_c()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidSpec("n must be >= 1".into()));
        }
        if !self.sigma_v2.finite() || self.sigma_v2 < T::zero() {
            return Err(Error::InvalidSpec("sigma_v2 must be finite and >= 0".into()));
        }
        if !self.sigma_hat2.finite() || self.sigma_hat2 < T::zero() {
            return Err(Error::InvalidSpec("sigma_hat2 must be finite and >= 0".into()));
        }
        if self.cov_x_s.dim != self.p_s {
            return Err(Error::DimensionMismatch(format!(
                "cov_x_s has dim {} but p_s = {}",
                self.cov_x_s.dim, self.p_s
            )));
        }
        if self.cov_x_c.dim != self.p_c {
            return Err(Error::DimensionMismatch(format!(
                "cov_x_c has dim {} but p_c = {}",
                self.cov_x_c.dim, self.p_c
            )));
        }
        if self.p_s > 0 {
            self.cov_x_s.validate()?;
        }
        if self.p_c > 0 {
            self.cov_x_c.validate()?;
        }
        Ok(())
    }

    /// Materialize the covariance of `x_S`; zero width yields the empty
    /// covariance rather than an error.
    pub fn materialize_cov_x_s<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Covariance<T>> {
        if self.p_s == 0 {
            Ok(Covariance::empty())
        } else {
            self.cov_x_s.materialize(rng)
        }
    }

    pub fn materialize_cov_x_c<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Covariance<T>> {
        if self.p_c == 0 {
            Ok(Covariance::empty())
        } else {
            self.cov_x_c.materialize(rng)
        }
    }

    pub fn with_p_f(&self, p_f: usize) -> Self {
        let mut c = self.clone();
        c.p_f = p_f;
        c
    }

    pub fn with_n(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.n = n;
        c
    }

    pub fn with_sigma_hat2(&self, sigma_hat2: T) -> Self {
        let mut c = self.clone();
        c.sigma_hat2 = sigma_hat2;
        c
    }
}

/// Cached thin SVD of `Abar = [A_S, A_F]`: `Abar = U diag(s) V^T` with
/// `min(n, p_bar)` triplets, singular values sorted descending.
#[derive(Clone, Debug)]
pub struct SvdCache<T> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<T>,
    pub v_t: DMatrix<T>,
}

/// Whitened view of a severely anisotropic fake block. When
/// `A_F = Z F^T` with invertible `F` and `[A_S, A_F]` has full column rank,
/// `[A_S, A_F]^+ = blockdiag(I, F^-T) [A_S, Z]^+`, so the pseudoinverse can
/// be computed through the perfectly conditioned whitened matrix; the naive
/// route loses the weakest fake directions to the rank cutoff, which
/// visibly shifts the shared-block estimator.
#[derive(Clone, Debug)]
pub struct FakeWhitening<T> {
    /// SVD of `[A_S, Z]`.
    pub svd: SvdCache<T>,
    /// Eigenbasis of the fake covariance.
    pub basis: DMatrix<T>,
    /// `1 / sqrt(eigenvalue)` per fake direction.
    pub inv_sqrt: DVector<T>,
}

/// One realization of the feature matrices plus the cached SVD of `Abar`.
#[derive(Clone, Debug)]
pub struct FeatureSet<T> {
    a_s: DMatrix<T>,
    a_c: DMatrix<T>,
    a_f: DMatrix<T>,
    svd: SvdCache<T>,
    fake_whitening: Option<FakeWhitening<T>>,
}

impl<T: Scalar> FeatureSet<T> {
    /// Assemble a feature set from explicit blocks (row counts must agree)
    /// and cache the SVD of `[A_S, A_F]`.
    pub fn from_parts(a_s: DMatrix<T>, a_c: DMatrix<T>, a_f: DMatrix<T>) -> Result<Self> {
        let n = a_s.nrows();
        if a_c.nrows() != n || a_f.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "feature blocks must share the row count: {} / {} / {}",
                n,
                a_c.nrows(),
                a_f.nrows()
            )));
        }
        let abar = horizontal_concat(&a_s, &a_f);
        let svd = thin_svd(&abar);
        Ok(FeatureSet {
            a_s,
            a_c,
            a_f,
            svd,
            fake_whitening: None,
        })
    }

    pub fn n(&self) -> usize {
        self.a_s.nrows()
    }

    pub fn p_s(&self) -> usize {
        self.a_s.ncols()
    }

    pub fn p_c(&self) -> usize {
        self.a_c.ncols()
    }

    pub fn p_f(&self) -> usize {
        self.a_f.ncols()
    }

    pub fn p_bar(&self) -> usize {
        self.p_s() + self.p_f()
    }

    pub fn a_s(&self) -> &DMatrix<T> {
        &self.a_s
    }

    pub fn a_c(&self) -> &DMatrix<T> {
        &self.a_c
    }

    pub fn a_f(&self) -> &DMatrix<T> {
        &self.a_f
    }

    /// `Abar = [A_S, A_F]`, the regressors of the misspecified model.
    pub fn abar(&self) -> DMatrix<T> {
        horizontal_concat(&self.a_s, &self.a_f)
    }

    /// `Atilde = [A_S, A_C]`, the regressors of the underlying system.
    pub fn atilde(&self) -> DMatrix<T> {
        horizontal_concat(&self.a_s, &self.a_c)
    }

    pub fn svd(&self) -> &SvdCache<T> {
        &self.svd
    }

    pub fn fake_whitening(&self) -> Option<&FakeWhitening<T>> {
        self.fake_whitening.as_ref()
    }
}

fn horizontal_concat<T: Scalar>(left: &DMatrix<T>, right: &DMatrix<T>) -> DMatrix<T> {
    let n = left.nrows();
    let mut out = DMatrix::zeros(n, left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    out
}

fn thin_svd<T: Scalar>(m: &DMatrix<T>) -> SvdCache<T> {
    let (n, p) = (m.nrows(), m.ncols());
    let k = n.min(p);
    if k == 0 {
        return SvdCache {
            u: DMatrix::zeros(n, 0),
            singular_values: DVector::zeros(0),
            v_t: DMatrix::zeros(0, p),
        };
    }
    // nalgebra sorts singular values descending.
    let svd = nalgebra::SVD::new(m.clone(), true, true);
    SvdCache {
        u: svd.u.expect("svd requested with u"),
        singular_values: svd.singular_values,
        v_t: svd.v_t.expect("svd requested with v_t"),
    }
}

/// One draw of the unknowns and noise of the underlying system. The fake
/// unknowns of the system are identically zero and carry no field here.
#[derive(Clone, Debug)]
pub struct UnknownsDraw<T> {
    pub x_s: DVector<T>,
    pub x_c: DVector<T>,
    pub v: DVector<T>,
}

/// Sample the feature matrices of one realization.
///
/// With `feature_cov = None` all entries are i.i.d. N(0, 1). Otherwise the
/// rows of `[A_S, A_C]` are i.i.d. `N(0, K_a)` (joint covariance over the
/// `p = p_S + p_C` system columns) and the rows of `A_F` are i.i.d.
/// `N(0, K_a_F)`, with the two blocks mutually independent.
pub fn sample_features<T: Scalar, R: Rng + ?Sized>(
    config: &ProblemConfig<T>,
    feature_cov: Option<(&Covariance<T>, &Covariance<T>)>,
    rng: &mut R,
) -> Result<FeatureSet<T>> {
    config.validate()?;
    let n = config.n;
    match feature_cov {
        None => {
            let a_s = DMatrix::from_fn(n, config.p_s, |_, _| T::std_normal(rng));
            let a_c = DMatrix::from_fn(n, config.p_c, |_, _| T::std_normal(rng));
            let a_f = DMatrix::from_fn(n, config.p_f, |_, _| T::std_normal(rng));
            FeatureSet::from_parts(a_s, a_c, a_f)
        }
        Some((k_a, k_a_f)) => {
            if k_a.dim() != config.p() {
                return Err(Error::DimensionMismatch(format!(
                    "feature covariance has dim {} but p_s + p_c = {}",
                    k_a.dim(),
                    config.p()
                )));
            }
            if k_a_f.dim() != config.p_f {
                return Err(Error::DimensionMismatch(format!(
                    "fake-feature covariance has dim {} but p_f = {}",
                    k_a_f.dim(),
                    config.p_f
                )));
            }
            let joint = k_a.sample_rows(n, rng);
            let a_s = joint.columns(0, config.p_s).into_owned();
            let a_c = joint.columns(config.p_s, config.p_c).into_owned();
            let (a_f, z) = k_a_f.sample_rows_keep_white(n, rng);
            let mut features = FeatureSet::from_parts(a_s, a_c, a_f)?;
            // Near-degenerate fake covariances defeat the plain rank cutoff
            // in the full-column-rank case; keep the whitened view so the
            // pseudoinverse can be taken through it.
            let tall = n >= config.p_bar();
            if tall && config.p_f > 0 && k_a_f.condition() > T::of(1e6) {
                if let Some(basis) = k_a_f.eigen_basis() {
                    let white = horizontal_concat(&features.a_s, &z);
                    features.fake_whitening = Some(FakeWhitening {
                        svd: thin_svd(&white),
                        basis: basis.clone(),
                        inv_sqrt: k_a_f.eigenvalues().map(|l| T::one() / l.sqrt()),
                    });
                }
            }
            Ok(features)
        }
    }
}

/// Sample one draw of unknowns and noise: `x_S ~ N(0, K_x_S)`,
/// `x_C ~ N(0, K_x_C)`, `v ~ N(0, sigma_v2 I_n)`.
pub fn sample_unknowns<T: Scalar, R: Rng + ?Sized>(
    cov_x_s: &Covariance<T>,
    cov_x_c: &Covariance<T>,
    sigma_v2: T,
    n: usize,
    rng: &mut R,
) -> UnknownsDraw<T> {
    let x_s = cov_x_s.sample_vector(rng);
    let x_c = cov_x_c.sample_vector(rng);
    let sigma = sigma_v2.sqrt();
    let v = DVector::from_fn(n, |_, _| sigma * T::std_normal(rng));
    UnknownsDraw { x_s, x_c, v }
}

/// Observations of the underlying system: `y = A_S x_S + A_C x_C + v`.
/// Fake features never enter here.
pub fn generate_observations<T: Scalar>(
    features: &FeatureSet<T>,
    draw: &UnknownsDraw<T>,
) -> Result<DVector<T>> {
    if draw.x_s.len() != features.p_s() || draw.x_c.len() != features.p_c() {
        return Err(Error::DimensionMismatch(format!(
            "unknowns ({}, {}) do not match features ({}, {})",
            draw.x_s.len(),
            draw.x_c.len(),
            features.p_s(),
            features.p_c()
        )));
    }
    if draw.v.len() != features.n() {
        return Err(Error::DimensionMismatch(format!(
            "noise length {} does not match n = {}",
            draw.v.len(),
            features.n()
        )));
    }
    Ok(features.a_s() * &draw.x_s + features.a_c() * &draw.x_c + &draw.v)
}
