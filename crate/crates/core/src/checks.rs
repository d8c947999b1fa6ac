//! Randomized identity and bound checks on generated instances.
//!
//! Each check draws its instances from a fixed seed and reports the worst
//! relative defect it saw.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::filter::{
    analysis_step, eakf_transform, etkf_transform, expansion_remainder_bound, forecast_step, kalman_analysis_cov,
    modified_filter_bounds, run_filter, whitaker_gain, EsrfVariant,
};
use crate::harness::fit_rate;
use crate::kalman::kalman_gain;
use crate::linalg::{min_eigenvalue, op_norm, sqrt_inv_integral, sqrt_psd, symmetrize, Mat, PsdMatrix, Vector};
use crate::model::{seeded_rng, simulate_reference, std_normal, Ensemble, GaussianPrior, StateSpaceModel, TimeGrid};
use crate::perturbation::{
    cross_moment, forecast_recursion_residual, perturb_reich, second_moment, solve_quadratic_perturbation,
    PerturbationKind, PerturbationSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} n={:<5} worst={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

fn result(name: &'static str, instances: usize, worst: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed: worst <= tolerance,
        instances,
        worst,
        tolerance,
        detail,
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std_normal(rng))
}

/// `BBᵀ + εI` for a Gaussian `B`.
pub fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let b = gaussian(d, d, rng);
    symmetrize(&(&b * b.transpose() + Mat::identity(d, d) * 0.2))
}

/// SPD matrix with log-uniform spectrum in `[1, cond]` and a random basis.
pub fn random_spd_with_condition(d: usize, cond: f64, rng: &mut ChaCha8Rng) -> Mat {
    let u = gaussian(d, d, rng).qr().q();
    let mut lambda = Vector::from_fn(d, |_, _| cond.powf(rng.random::<f64>()));
    lambda[0] = 1.0;
    if d > 1 {
        lambda[d - 1] = cond;
    }
    symmetrize(&(&u * Mat::from_diagonal(&lambda) * u.transpose()))
}

pub fn random_linear_model(d: usize, p: usize, rng: &mut ChaCha8Rng) -> StateSpaceModel {
    let a = gaussian(d, d, rng) * 0.5;
    let g = gaussian(p, d, rng);
    let q = random_spd(d, rng);
    let c = random_spd(p, rng);
    StateSpaceModel::linear(a, g, q, c, 1.0).expect("random SPD noise covariances")
}

/// A model, a forecast ensemble and a step size from the check corpus:
/// `d ≤ 4`, `p ≤ 3`, `M ∈ {d+2, 2d}`, `h ∈ steps`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: StateSpaceModel,
    pub forecast: Ensemble,
    pub h: f64,
}

pub fn random_instance(rng: &mut ChaCha8Rng, steps: &[f64]) -> Instance {
    let d = rng.random_range(1..=4);
    let p = rng.random_range(1..=3);
    let m = if rng.random::<bool>() { d + 2 } else { (2 * d).max(2) };
    let h = steps[rng.random_range(0..steps.len())];
    let model = random_linear_model(d, p, rng);
    let forecast = Ensemble::new(gaussian(d, m, rng)).expect("at least two members");
    Instance { model, forecast, h }
}

const CORPUS_STEPS: [f64; 3] = [0.0, 0.1, 0.5];

/// `‖A·E − E·T‖_F ≤ tol·(1 + ‖E‖_F)` for the EAKF and ETKF transforms.
pub fn check_adjoint_transforms(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance(&mut rng, &CORPUS_STEPS);
        let e = inst.forecast.deviations();
        let a = eakf_transform(&inst.forecast, &inst.model, inst.h)?;
        let t = etkf_transform(&inst.forecast, &inst.model, inst.h)?;
        worst = worst.max((&a * &e - &e * t).norm() / (1.0 + e.norm()));
    }
    Ok(result("eakf_etkf_adjoint", n, worst, 1e-9, String::new()))
}

/// `‖P^a − (I − hKG)P^f‖_F ≤ tol·(1 + ‖P^f‖_F)` for EAKF, ETKF and WH.
pub fn check_covariance_law(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 12);
    let variants = [
        EsrfVariant::eakf(PerturbationSpec::new(PerturbationKind::None)),
        EsrfVariant::etkf(PerturbationSpec::new(PerturbationKind::None)),
        EsrfVariant::whitaker_hamill(PerturbationSpec::new(PerturbationKind::None)),
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance(&mut rng, &CORPUS_STEPS);
        let dy = Vector::from_fn(inst.model.dim_obs(), |_, _| std_normal(&mut rng));
        let pf = inst.forecast.covariance();
        let k = kalman_gain(&inst.model, &pf, inst.h)?;
        let target = kalman_analysis_cov(&pf, &k, &inst.model, inst.h);
        for v in &variants {
            let out = analysis_step(&inst.forecast, v, &inst.model, inst.h, &dy)?;
            worst = worst.max((out.ensemble.covariance() - &target).norm() / (1.0 + pf.norm()));
        }
    }
    Ok(result("esrf_covariance_law", n, worst, 1e-9, String::new()))
}

/// `(I − hK̃G)P^f(I − hK̃G)ᵀ = (I − hKG)P^f` for the WH gain.
pub fn check_whitaker_ansatz(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 12);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance(&mut rng, &CORPUS_STEPS);
        let (d, h) = (inst.model.dim_state(), inst.h);
        let pf = inst.forecast.covariance();
        let kt = whitaker_gain(&PsdMatrix::symmetrized(&pf)?, &inst.model, h)?;
        let k = kalman_gain(&inst.model, &pf, h)?;
        let g = inst.model.obs_matrix();
        let l = Mat::identity(d, d) - &kt * g * h;
        let lhs = &l * &pf * l.transpose();
        let rhs = (Mat::identity(d, d) - k * g * h) * &pf;
        worst = worst.max((lhs - rhs).norm() / (1.0 + pf.norm()));
    }
    Ok(result("whitaker_ansatz", n, worst, 1e-9, String::new()))
}

/// Reich perturbations on full-rank ensembles: cross moment `Q/2`,
/// centering, and second moment `¼Q(P^a)⁻¹Q`, all relative.
pub fn check_reich_moments(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 14);
    let (mut cross, mut center, mut second): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let m = if rng.random::<bool>() { d + 2 } else { (2 * d).max(d + 1) };
        let q = PsdMatrix::symmetrized(&random_spd(d, &mut rng))?;
        let ens = Ensemble::new(gaussian(d, m, &mut rng))?;
        let w = perturb_reich(&ens, &q)?;
        let q_sqrt = sqrt_psd(&q)?.into_matrix();
        let half_q = q.matrix() * 0.5;
        cross = cross.max((cross_moment(&w, &ens, &q_sqrt) - &half_q).norm() / half_q.norm());
        let col_mean = w.column_mean();
        center = center.max(col_mean.norm() / (1.0 + w.norm()));
        let p_inv = PsdMatrix::symmetrized(&ens.covariance())?.inverse()?;
        let expected = q.matrix() * p_inv * q.matrix() * 0.25;
        second = second.max((second_moment(&w, &q_sqrt) - &expected).norm() / expected.norm());
    }
    let worst = cross.max(center).max(second);
    let detail = format!("cross={cross:.1e} centering={center:.1e} second={second:.1e}");
    Ok(result("reich_moments", n, worst, 1e-10, detail))
}

/// `‖A·E − (I − (h/2)PΘ)E‖_F ≤ (3h²/8)‖P‖²‖Θ‖²‖E‖_F`; reports the worst
/// ratio of measured remainder to bound (must stay ≤ 1).
pub fn check_expansion_remainder(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 15);
    let steps = [0.01, 0.1, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..n {
        let inst = random_instance(&mut rng, &steps);
        let (d, h) = (inst.model.dim_state(), inst.h);
        let e = inst.forecast.deviations();
        let p = inst.forecast.covariance();
        let a = eakf_transform(&inst.forecast, &inst.model, h)?;
        let linear = Mat::identity(d, d) - &p * inst.model.obs_precision() * (0.5 * h);
        let measured = (&a * &e - linear * &e).norm();
        let bound = expansion_remainder_bound(&p, &inst.model, h) * e.norm();
        let ratio = measured / bound;
        if ratio > 1.0 + 1e-12 {
            violations += 1;
        }
        worst = worst.max(ratio);
    }
    Ok(result("expansion_remainder_bound", n, worst, 1.0 + 1e-12, format!("violations={violations}")))
}

/// Quadrature `P^{-1/2}` against the spectral one on SPD matrices with
/// condition number up to `cond`.
pub fn check_integral_representation(n: usize, seed: u64, cond: f64, nodes: usize) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 16);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let p = PsdMatrix::symmetrized(&random_spd_with_condition(d, cond, &mut rng))?;
        let exact = p.inv_sqrt()?;
        let quad = sqrt_inv_integral(&p, nodes)?;
        worst = worst.max((quad.matrix() - &exact).norm() / exact.norm());
    }
    Ok(result("integral_representation", n, worst, 1e-6, format!("cond<={cond:e} nodes={nodes}")))
}

/// Quadratic perturbation residual relative to `‖Q‖_F`.
pub fn check_quadratic_residual(n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 17);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let p = rng.random_range(1..=3);
        let m = d + 1 + rng.random_range(0..=d);
        let h = [0.01, 0.1, 0.5][rng.random_range(0..3)];
        let model = random_linear_model(d, p, &mut rng);
        let ens = Ensemble::new(gaussian(d, m, &mut rng))?;
        let sol = solve_quadratic_perturbation(&ens, &model, h)?;
        worst = worst.max(sol.residual / model.q().matrix().norm());
    }
    Ok(result("quadratic_residual", n, worst, 1e-8, String::new()))
}

/// One analysis + quadratic-perturbation forecast cycle per step size; the
/// deviation from the first-order covariance recursion is fitted in `h`.
pub fn check_quadratic_recursion_order(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 18);
    let model = random_linear_model(2, 1, &mut rng);
    let forecast = Ensemble::new(gaussian(2, 6, &mut rng))?;
    let etkf = EsrfVariant::etkf(PerturbationSpec::new(PerturbationKind::Quadratic));
    let dy = Vector::from_element(1, 0.3);
    let mut table = Vec::new();
    for k in 4..=9 {
        let h = 2f64.powi(-k);
        let analysis = analysis_step(&forecast, &etkf, &model, h, &(&dy * h))?.ensemble;
        let next = forecast_step(&analysis, &model, h, &etkf.perturbation)?;
        let res = forecast_recursion_residual(&model, &forecast.covariance(), &next.covariance(), h)?;
        table.push((h, res));
    }
    let slope = fit_rate(&table).map(|f| f.slope).unwrap_or(f64::NAN);
    Ok(CheckResult {
        name: "quadratic_recursion_order",
        passed: slope >= 1.8,
        instances: table.len(),
        worst: slope,
        tolerance: 1.8,
        detail: format!("fitted slope {slope:.3} over h = 2^-4..2^-9"),
    })
}

/// Modified filter with anisotropic `Q` and `h < h*`: inverse analysis
/// covariance below the bound, and `P^a ≤ P^f` at every step.
pub fn check_modified_filter_bounds(seeds: usize, seed: u64) -> Result<CheckResult> {
    let model = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]),
        Mat::identity(1, 1),
        2.0,
    )?;
    let prior = GaussianPrior::standard(2);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_order: f64 = 0.0;
    let mut h_used = 0.0;
    for s in 0..seeds as u64 {
        let init = prior.sample_ensemble(16, &mut seeded_rng(seed + s, 1))?;
        let p0_inv = PsdMatrix::symmetrized(&init.covariance())?.inverse()?;
        let bounds = modified_filter_bounds(&model, op_norm(&p0_inv))?;
        // A dyadic step below h*.
        let h = 2f64.powi((bounds.h_star.log2().floor() as i32) - 1).min(0.0625);
        h_used = h;
        let grid = TimeGrid::new(model.horizon(), h, 1)?;
        let path = simulate_reference(&model, &grid, &prior, seed + s)?;
        let traj = run_filter(&EsrfVariant::modified(), &model, &path, h, &init)?;
        for k in 1..=traj.steps() {
            let pa = traj.analyses[k].covariance();
            let inv = PsdMatrix::symmetrized(&pa)?.inverse()?;
            worst_ratio = worst_ratio.max(op_norm(&inv) / bounds.p_star_a);
            let gap = min_eigenvalue(&(traj.forecasts[k].covariance() - &pa));
            worst_order = worst_order.max(-gap);
        }
    }
    let passed = worst_ratio <= 1.0 && worst_order <= 1e-10;
    Ok(CheckResult {
        name: "modified_filter_bounds",
        passed,
        instances: seeds,
        worst: worst_ratio,
        tolerance: 1.0,
        detail: format!("h={h_used} max(-λmin(P^f-P^a))={worst_order:.1e}"),
    })
}

/// Instance counts per check; `quick` shrinks them for smoke runs.
#[derive(Clone, Copy, Debug)]
pub struct SuiteSize {
    pub corpus: usize,
    pub remainder: usize,
    pub spd: usize,
    pub modified_seeds: usize,
}

impl SuiteSize {
    pub const FULL: SuiteSize = SuiteSize {
        corpus: 500,
        remainder: 1000,
        spd: 200,
        modified_seeds: 10,
    };
    pub const QUICK: SuiteSize = SuiteSize {
        corpus: 50,
        remainder: 100,
        spd: 20,
        modified_seeds: 2,
    };
}

pub const INTEGRAL_NODES: usize = 512;

/// Runs every check; a check that errors out is reported as failed.
pub fn run_identity_suite(size: SuiteSize, seed: u64) -> Vec<CheckResult> {
    let runs: Vec<(&'static str, Result<CheckResult>)> = vec![
        ("eakf_etkf_adjoint", check_adjoint_transforms(size.corpus, seed)),
        ("esrf_covariance_law", check_covariance_law(size.corpus, seed)),
        ("whitaker_ansatz", check_whitaker_ansatz(size.corpus, seed)),
        ("reich_moments", check_reich_moments(size.corpus, seed)),
        ("expansion_remainder_bound", check_expansion_remainder(size.remainder, seed)),
        ("integral_representation", check_integral_representation(size.spd, seed, 1e4, INTEGRAL_NODES)),
        ("quadratic_residual", check_quadratic_residual(size.spd, seed)),
        ("quadratic_recursion_order", check_quadratic_recursion_order(seed)),
        ("modified_filter_bounds", check_modified_filter_bounds(size.modified_seeds, seed)),
    ];
    runs.into_iter()
        .map(|(name, r)| {
            r.unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                instances: 0,
                worst: f64::NAN,
                tolerance: f64::NAN,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for r in run_identity_suite(SuiteSize::QUICK, 5) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn conditioned_spectrum() {
        let mut rng = seeded_rng(1, 0);
        let p = PsdMatrix::symmetrized(&random_spd_with_condition(3, 1e4, &mut rng)).unwrap();
        assert!((p.lambda_max() / p.lambda_min() - 1e4).abs() < 1e-6);
    }
}
