//! Row-noise model: precision matrix estimation from recent residuals, the
//! unnormalized Gaussian density, its affine (first-order) surrogate, and the
//! closed-form integral of that surrogate over a quantization cell.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inverse covariance of the row noise together with the variance scale used
/// by the density exp(-n' P n / sigma_n2).
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    p: DMatrix<f64>,
    sigma_n2: f64,
    degenerate: bool,
}

impl PrecisionEstimate {
    /// Wraps an explicit precision matrix after checking symmetry and
    /// positive definiteness.
    pub fn new(p: DMatrix<f64>, sigma_n2: f64) -> Result<Self> {
        if p.nrows() == 0 || p.nrows() != p.ncols() {
            return Err(Error::InvalidArgument("precision matrix must be square".into()));
        }
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "precision asymmetry {asym} exceeds 1e-12"
            )));
        }
        if nalgebra::Cholesky::new(p.clone()).is_none() {
            return Err(Error::InvalidArgument(
                "precision matrix must be positive definite".into(),
            ));
        }
        if !(sigma_n2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance scale must be positive, got {sigma_n2}"
            )));
        }
        Ok(PrecisionEstimate {
            p,
            sigma_n2,
            degenerate: false,
        })
    }

    /// Bootstrap estimate used before any residual history exists.
    pub fn isotropic(n: usize, sigma_n2: f64) -> Self {
        let s = effective_variance(sigma_n2);
        PrecisionEstimate {
            p: DMatrix::identity(n, n) / s,
            sigma_n2: s,
            degenerate: false,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn sigma_n2(&self) -> f64 {
        self.sigma_n2
    }

    /// True when the residual window carried no variance and the estimate
    /// fell back to the regularization floor.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

fn effective_variance(sigma_n2: f64) -> f64 {
    sigma_n2.max(1e-12)
}

/// Inverts the regularized sample covariance of the residual window:
/// P = (S + eps I)^-1 with eps = 1e-3 trace(S)/N floored at 1e-9. The mean
/// over the window is removed before accumulation.
pub fn estimate_precision(residual_rows: &[DVector<f64>], sigma_n2: f64) -> Result<PrecisionEstimate> {
    estimate_precision_impl(residual_rows, sigma_n2, 1e-9, None)
}

/// Precision estimate stabilized for the enhancement loop, where the window
/// holds estimated noise rows whose own errors feed back into the next
/// estimate. Two guards against that feedback:
/// - diagonal loading floored at the noise variance (windows shorter than
///   the row leave a null space whose lightly-loaded inverse would explode
///   to ~1000/sigma_n2, far above the bootstrap precision);
/// - covariance eigenvalues capped at 2 sigma_n2, so systematic estimation
///   error accumulating in one direction (e.g. per-row offsets) cannot make
///   the likelihood arbitrarily blind along it.
pub fn estimate_precision_windowed(
    residual_rows: &[DVector<f64>],
    sigma_n2: f64,
) -> Result<PrecisionEstimate> {
    let floor = sigma_n2.max(1e-9);
    estimate_precision_impl(residual_rows, sigma_n2, floor, Some(2.0 * floor))
}

fn estimate_precision_impl(
    residual_rows: &[DVector<f64>],
    sigma_n2: f64,
    eps_floor: f64,
    eigen_cap: Option<f64>,
) -> Result<PrecisionEstimate> {
    let k = residual_rows.len();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "precision estimation needs at least one residual row".into(),
        ));
    }
    let n = residual_rows[0].len();
    if n == 0 || residual_rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(
            "residual rows must share one nonzero length".into(),
        ));
    }
    if !(sigma_n2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be nonnegative, got {sigma_n2}"
        )));
    }

    let mut mean = DVector::zeros(n);
    for r in residual_rows {
        mean += r;
    }
    mean /= k as f64;

    let mut cov = DMatrix::zeros(n, n);
    for r in residual_rows {
        let c = r - &mean;
        cov.ger(1.0 / k as f64, &c, &c, 1.0);
    }

    let trace = cov.trace();
    let eps = (1e-3 * trace / n as f64).max(eps_floor);
    // identical rows leave only round-off after mean removal
    let data_scale: f64 =
        residual_rows.iter().map(|r| r.norm_squared()).sum::<f64>() / k as f64;
    let degenerate = trace <= 1e-20 * data_scale.max(1e-30);
    if let Some(cap) = eigen_cap {
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.max() > cap {
            let clamped = eig.eigenvalues.map(|v| v.min(cap));
            cov = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            for i in 0..n {
                for j in (i + 1)..n {
                    let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                    cov[(i, j)] = avg;
                    cov[(j, i)] = avg;
                }
            }
        }
    }
    for i in 0..n {
        cov[(i, i)] += eps;
    }

    let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| {
        Error::InvalidArgument("regularized covariance is not positive definite".into())
    })?;
    let mut p = chol.inverse();
    // symmetrize away factorization round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
    Ok(PrecisionEstimate {
        p,
        sigma_n2: effective_variance(sigma_n2),
        degenerate,
    })
}

/// Unnormalized Gaussian density exp(-n' P n / sigma_n2).
pub fn noise_density(n: &DVector<f64>, est: &PrecisionEstimate) -> f64 {
    let quad = (est.matrix() * n).dot(n);
    (-quad / est.sigma_n2()).exp()
}

/// Affine surrogate a' n + b of the Gaussian density, expanded where the
/// density was linearized (n0), together with the quantization step used by
/// the cell integral.
#[derive(Debug, Clone)]
pub struct AffineLikelihood {
    pub a: DVector<f64>,
    pub b: f64,
    pub qstep: f64,
    pub n0: DVector<f64>,
}

impl AffineLikelihood {
    /// Closed form of the integral of a' n + b over the axis-aligned cell of
    /// width Q centered at y - x: Q^N (a' (y - x) + b).
    pub fn cell_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let n = self.a.len();
        if y.len() != n || x.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "cell likelihood over rows of {} / {}, coefficients of {n}",
                y.len(),
                x.len()
            )));
        }
        let affine = self.a.dot(&(y - x)) + self.b;
        if !(affine > 0.0) {
            return Err(Error::OutOfDomain(format!(
                "affine likelihood argument {affine} is not positive"
            )));
        }
        Ok(self.qstep.powi(n as i32) * affine)
    }

    /// Value of the affine surrogate at a noise vector.
    pub fn density_at(&self, n: &DVector<f64>) -> f64 {
        self.a.dot(n) + self.b
    }

    /// Rescales (a, b) by 1/Pr(n0) so the surrogate is 1 at the expansion
    /// point. The negative log objective shifts by a constant, leaving the
    /// minimizer unchanged, and the coefficients stay representable even when
    /// the raw density underflows.
    pub fn normalized(&self) -> AffineLikelihood {
        let at_n0 = self.density_at(&self.n0);
        if at_n0 <= 0.0 {
            return self.clone();
        }
        AffineLikelihood {
            a: &self.a / at_n0,
            b: self.b / at_n0,
            qstep: self.qstep,
            n0: self.n0.clone(),
        }
    }
}

/// First-order expansion of the Gaussian density at n0 = y - x0:
/// a = grad Pr(n0) = -(2/sigma_n2) Pr(n0) P n0, b = Pr(n0) - a' n0.
pub fn affine_approx(
    y: &DVector<f64>,
    x0: &DVector<f64>,
    est: &PrecisionEstimate,
    qstep: f64,
) -> Result<AffineLikelihood> {
    let n = est.dim();
    if y.len() != n || x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "rows of {} / {} against a {n}-dim precision estimate",
            y.len(),
            x0.len()
        )));
    }
    if !(qstep > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "quantization step must be positive, got {qstep}"
        )));
    }
    let n0 = y - x0;
    let density = noise_density(&n0, est);
    let a = est.matrix() * &n0 * (-2.0 / est.sigma_n2() * density);
    let b = density - a.dot(&n0);
    Ok(AffineLikelihood { a, b, qstep, n0 })
}

/// Expansion with coefficients rescaled to be 1 at n0. Same minimizer as the
/// raw expansion under the negative log; immune to density underflow for
/// large residuals.
pub fn affine_approx_normalized(
    y: &DVector<f64>,
    x0: &DVector<f64>,
    est: &PrecisionEstimate,
    qstep: f64,
) -> Result<AffineLikelihood> {
    let n = est.dim();
    if y.len() != n || x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "rows of {} / {} against a {n}-dim precision estimate",
            y.len(),
            x0.len()
        )));
    }
    if !(qstep > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "quantization step must be positive, got {qstep}"
        )));
    }
    let n0 = y - x0;
    // a/Pr and b/Pr computed directly, no exp involved
    let a = est.matrix() * &n0 * (-2.0 / est.sigma_n2());
    let b = 1.0 - a.dot(&n0);
    Ok(AffineLikelihood { a, b, qstep, n0 })
}
