//! Step-size threshold and inverse-covariance bound for the modified filter.

use crate::error::Result;
use crate::linalg::{max_eigenvalue, op_norm};
use crate::model::StateSpaceModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModifiedBounds {
    /// `h* = √(λ₋(Q)/λ₊(Q)) / ‖A‖`; infinite when `A = 0`.
    pub h_star: f64,
    /// `α_T = exp(2T‖A‖ / (1 − h*‖A‖))`; infinite when `Q` is isotropic.
    pub alpha_t: f64,
    /// `α_T‖(P_0^a)⁻¹‖ + Tα_T‖G‖²λ₊(C⁻¹)`, bound on `‖(P_k^a)⁻¹‖` for `h < h*`.
    pub p_star_a: f64,
}

impl ModifiedBounds {
    /// Same bound with the actual step `h < h*` in place of `h*`, using
    /// `(1 − h‖A‖)^{-2j} ≤ exp(2T‖A‖/(1 − h‖A‖))`.
    pub fn at_step(model: &StateSpaceModel, p0_inv_norm: f64, h: f64) -> Result<Self> {
        let a_norm = op_norm(model.require_linear("the modified filter bound")?);
        let base = modified_filter_bounds(model, p0_inv_norm)?;
        let alpha = alpha(a_norm, h, model.horizon());
        Ok(Self {
            h_star: base.h_star,
            alpha_t: alpha,
            p_star_a: p_star(model, alpha, p0_inv_norm),
        })
    }
}

fn alpha(a_norm: f64, h: f64, horizon: f64) -> f64 {
    if a_norm == 0.0 {
        return 1.0;
    }
    let denom = 1.0 - h * a_norm;
    if denom <= 0.0 {
        f64::INFINITY
    } else {
        (2.0 * horizon * a_norm / denom).exp()
    }
}

fn p_star(model: &StateSpaceModel, alpha: f64, p0_inv_norm: f64) -> f64 {
    let g = op_norm(model.obs_matrix());
    alpha * p0_inv_norm + model.horizon() * alpha * g * g * max_eigenvalue(model.c_inv())
}

pub fn modified_filter_bounds(model: &StateSpaceModel, p0_inv_norm: f64) -> Result<ModifiedBounds> {
    let a_norm = op_norm(model.require_linear("the modified filter bound")?);
    let q = model.q();
    let ratio = (q.lambda_min() / q.lambda_max()).sqrt();
    let h_star = if a_norm == 0.0 { f64::INFINITY } else { ratio / a_norm };
    let alpha_t = if a_norm == 0.0 {
        1.0
    } else if ratio >= 1.0 {
        f64::INFINITY
    } else {
        alpha(a_norm, h_star, model.horizon())
    };
    Ok(ModifiedBounds {
        h_star,
        alpha_t,
        p_star_a: p_star(model, alpha_t, p0_inv_norm),
    })
}
