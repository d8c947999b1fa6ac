//! Square root transforms, gains and post-multipliers.

use crate::error::{EsrfError, Result};
use crate::linalg::{
    half_gain_inverse, op_norm, sqrt_pinv_psd, sqrt_psd, symmetrize, Mat, PsdMatrix, RANK_TOL_REL,
};
use crate::model::{Ensemble, StateSpaceModel};

/// `T = (I + h/(M−1)·EᵀΘE)^{-1/2}` with `Θ = GᵀC⁻¹G`.
pub fn etkf_transform(forecast: &Ensemble, model: &StateSpaceModel, h: f64) -> Result<Mat> {
    check_step(h)?;
    let e = forecast.deviations();
    let m = forecast.size();
    let theta = model.obs_precision();
    let inner = Mat::identity(m, m) + e.transpose() * theta * &e * (h / (m as f64 - 1.0));
    PsdMatrix::symmetrized(&inner)?.inv_sqrt()
}

/// `A = √P (I + h√P Θ √P)^{-1/2} √P^†` with `P` the forecast covariance.
pub fn eakf_transform(forecast: &Ensemble, model: &StateSpaceModel, h: f64) -> Result<Mat> {
    check_step(h)?;
    let p = PsdMatrix::symmetrized(&forecast.covariance())?;
    eakf_from_cov(&p, model, h)
}

pub(crate) fn eakf_from_cov(p: &PsdMatrix, model: &StateSpaceModel, h: f64) -> Result<Mat> {
    let d = p.dim();
    let root = sqrt_psd(p)?.into_matrix();
    let root_pinv = sqrt_pinv_psd(p, RANK_TOL_REL);
    let inner = Mat::identity(d, d) + &root * model.obs_precision() * &root * h;
    let mid = PsdMatrix::symmetrized(&inner)?.inv_sqrt()?;
    Ok(root * mid * root_pinv)
}

/// Remainder operator of the first-order expansion on the range of `P`:
/// `√P·g(S)·√P^†` with `S = √PΘ√P` and `g(x) = (1+hx)^{-1/2} − 1 + hx/2`.
pub fn expansion_remainder_operator(p: &PsdMatrix, model: &StateSpaceModel, h: f64) -> Result<Mat> {
    let root = sqrt_psd(p)?.into_matrix();
    let root_pinv = sqrt_pinv_psd(p, RANK_TOL_REL);
    let s = PsdMatrix::symmetrized(&(&root * model.obs_precision() * &root))?;
    let g = s.spectral_map(|x| {
        let y = h * x.max(0.0);
        // Series form avoids cancellation for small y.
        if y < 1e-3 {
            y * y * (0.375 - 0.3125 * y + 0.2734375 * y * y)
        } else {
            1.0 / (1.0 + y).sqrt() - 1.0 + 0.5 * y
        }
    });
    Ok(root * g * root_pinv)
}

/// `(I − (h/2)PΘ, A·E − (I − (h/2)PΘ)·E)`.
pub fn integral_transform_expansion(forecast: &Ensemble, model: &StateSpaceModel, h: f64) -> Result<(Mat, Mat)> {
    check_step(h)?;
    let d = forecast.dim();
    let e = forecast.deviations();
    let p = forecast.covariance();
    let linear = Mat::identity(d, d) - &p * model.obs_precision() * (0.5 * h);
    let a = eakf_transform(forecast, model, h)?;
    let remainder = a * &e - &linear * &e;
    Ok((linear, remainder))
}

/// `(3h²/8)‖P‖²‖GᵀC⁻¹G‖²`.
pub fn expansion_remainder_bound(p: &Mat, model: &StateSpaceModel, h: f64) -> f64 {
    0.375 * h * h * op_norm(p).powi(2) * op_norm(&model.obs_precision()).powi(2)
}

/// `K̃ = P Gᵀ (C + hGPGᵀ)^{-1/2} ((C + hGPGᵀ)^{1/2} + C^{1/2})^{-1}`.
pub fn whitaker_gain(forecast_cov: &PsdMatrix, model: &StateSpaceModel, h: f64) -> Result<Mat> {
    check_step(h)?;
    let g = model.obs_matrix();
    let pgt = forecast_cov.matrix() * g.transpose();
    let b = PsdMatrix::symmetrized(&(g * &pgt * h))?;
    Ok(pgt * half_gain_inverse(model.c(), &b)?)
}

/// Kalman gain `K`, deviation gain `K̂` and the norm of the expansion
/// remainder operator (zero where the update has no remainder).
#[derive(Clone, Debug)]
pub struct GainSet {
    pub k: Mat,
    pub k_hat: Mat,
    pub remainder_norm: f64,
}

/// Which deviation gain to pair with the Kalman gain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainKind {
    /// `K̂ = ½PGᵀC⁻¹` with the expansion remainder.
    HalfPrecision,
    /// `K̂ = K̃`.
    Whitaker,
    /// `K̂ = K/2`.
    HalfKalman,
    /// `K̂ = K`.
    Kalman,
}

pub fn compute_gains(kind: GainKind, p: &PsdMatrix, model: &StateSpaceModel, h: f64) -> Result<GainSet> {
    let k = crate::kalman::kalman_gain(model, p.matrix(), h)?;
    let (k_hat, remainder_norm) = match kind {
        GainKind::HalfPrecision => {
            let kh = p.matrix() * model.obs_matrix().transpose() * model.c_inv() * 0.5;
            (kh, op_norm(&expansion_remainder_operator(p, model, h)?))
        }
        GainKind::Whitaker => (whitaker_gain(p, model, h)?, 0.0),
        GainKind::HalfKalman => (&k * 0.5, 0.0),
        GainKind::Kalman => (k.clone(), 0.0),
    };
    Ok(GainSet {
        k,
        k_hat,
        remainder_norm,
    })
}

const ORTHO_TOL: f64 = 1e-10;

/// Checks `UᵀU = I` and `U·1 = λ·1` with `|λ| = 1`.
pub fn validate_post_multiplier(u: &Mat) -> Result<()> {
    let m = u.nrows();
    if u.ncols() != m {
        return Err(EsrfError::InvalidPostMultiplier(format!("expected a square matrix, got {:?}", u.shape())));
    }
    let defect = (u.transpose() * u - Mat::identity(m, m)).norm();
    if defect > ORTHO_TOL * (m as f64).sqrt() {
        return Err(EsrfError::InvalidPostMultiplier(format!("‖UᵀU − I‖_F = {defect:e}")));
    }
    let ones = crate::linalg::Vector::from_element(m, 1.0);
    let image = u * &ones;
    let lambda = image.sum() / m as f64;
    let off = (&image - &ones * lambda).norm();
    if off > ORTHO_TOL * (m as f64).sqrt() || (lambda.abs() - 1.0).abs() > ORTHO_TOL {
        return Err(EsrfError::InvalidPostMultiplier(format!(
            "the ones vector is not an eigenvector (residual {off:e}, λ = {lambda})"
        )));
    }
    Ok(())
}

/// `E·U` for a validated orthogonal `U` that keeps `1` as an eigenvector.
pub fn orthogonal_postmultiply(analysis_devs: &Mat, u: &Mat) -> Result<Mat> {
    if u.nrows() != analysis_devs.ncols() {
        return Err(EsrfError::Dimension(format!(
            "post-multiplier is {:?} for {} members",
            u.shape(),
            analysis_devs.ncols()
        )));
    }
    validate_post_multiplier(u)?;
    Ok(analysis_devs * u)
}

/// Householder reflection `I − 2vvᵀ/‖v‖²` with `v` projected orthogonal to `1`.
pub fn householder_fixing_ones(v: &crate::linalg::Vector) -> Mat {
    let m = v.len();
    let mut w = v.clone();
    let mean = w.mean();
    w.add_scalar_mut(-mean);
    let n2 = w.norm_squared();
    if n2 == 0.0 {
        return Mat::identity(m, m);
    }
    Mat::identity(m, m) - &w * w.transpose() * (2.0 / n2)
}

pub(crate) fn check_step(h: f64) -> Result<()> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(EsrfError::Config(format!("step must be non-negative, got {h}")));
    }
    Ok(())
}

/// Kalman analysis covariance `(I − hKG)P`, symmetrized.
pub fn kalman_analysis_cov(p: &Mat, k: &Mat, model: &StateSpaceModel, h: f64) -> Mat {
    let d = p.nrows();
    symmetrize(&((Mat::identity(d, d) - k * model.obs_matrix() * h) * p))
}
