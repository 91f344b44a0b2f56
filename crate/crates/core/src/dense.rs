//! Exact Cholesky-based Gaussian log-likelihood and conditional (kriging)
//! distributions. This is the ground truth the Vecchia engine is tested
//! against; per-year blocks can be evaluated concurrently and summed.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::util::LN_2PI;

/// A conditional Gaussian over prediction points.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn marginal_sd(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Exact multivariate normal log-density of `residuals` under covariance
/// `cov`: the quadratic form and log-determinant both come from one
/// triangular factor.
pub fn cholesky_loglik(residuals: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = residuals.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::invalid(format!(
            "covariance is {}x{} but residual has length {n}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::numeric("covariance is not positive definite"))?;
    let l = chol.l_dirty();
    let z = l
        .solve_lower_triangular(residuals)
        .ok_or_else(|| Error::numeric("singular triangular factor"))?;
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    Ok(-0.5 * z.norm_squared() - log_det_half - 0.5 * n as f64 * LN_2PI)
}

/// Condition jointly Gaussian predictions on observed values.
///
/// `cross_cov` is `cov(pred, obs)` with predictions on the rows. The mean
/// is `pred_mean + cross amp obs_cov^{-1} (obs - obs_mean)` and the
/// covariance the Schur complement `pred_cov - cross obs_cov^{-1} cross^T`.
pub fn conditional_gaussian(
    obs_values: &DVector<f64>,
    cross_cov: &DMatrix<f64>,
    obs_cov: &DMatrix<f64>,
    pred_cov: &DMatrix<f64>,
    obs_mean: &DVector<f64>,
    pred_mean: &DVector<f64>,
) -> Result<GaussianConditional> {
    let n = obs_values.len();
    let p = pred_mean.len();
    if obs_cov.nrows() != n || obs_cov.ncols() != n {
        return Err(Error::invalid("obs covariance dimension mismatch"));
    }
    if cross_cov.nrows() != p || cross_cov.ncols() != n {
        return Err(Error::invalid("cross covariance must be pred x obs"));
    }
    if pred_cov.nrows() != p || pred_cov.ncols() != p || obs_mean.len() != n {
        return Err(Error::invalid("prediction covariance dimension mismatch"));
    }
    let chol = Cholesky::new(obs_cov.clone())
        .ok_or_else(|| Error::numeric("observation covariance is not positive definite"))?;
    // solved = obs_cov^{-1} cross^T, so cross * solved^T... keep it direct:
    let solved = chol.solve(&cross_cov.transpose()); // n x p
    let residual = obs_values - obs_mean;
    let mean = pred_mean + solved.transpose() * &residual;
    let covariance = pred_cov - cross_cov * solved;
    Ok(GaussianConditional { mean, covariance })
}
