//! Deterministic model perturbations and their moment conditions.

use esrf::model::{seeded_rng, GaussianPrior, StateSpaceModel};
use esrf::perturbation::{
    check_assumption1, forecast_recursion_residual, perturb_reich, perturb_reich_pinv, solve_quadratic_perturbation,
};
use esrf::{Mat, PsdMatrix};

fn main() -> esrf::Result<()> {
    let q = PsdMatrix::new(Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]))?;
    let ens = GaussianPrior::standard(2).sample_ensemble(8, &mut seeded_rng(1, 1))?;

    let w = perturb_reich(&ens, &q)?;
    let report = check_assumption1(&w, &ens, &q, f64::INFINITY)?;
    println!("reich: cross-moment residual {:.2e}, centered {}", report.cross_moment_residual, report.centered_ok);

    // A rank-deficient ensemble: only the pseudo-inverse form is defined.
    let flat = esrf::model::Ensemble::new(Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]))?;
    println!("reich on a flat ensemble: {}", perturb_reich(&flat, &q).unwrap_err());
    let wp = perturb_reich_pinv(&flat, &q, 1e-10)?;
    let rp = check_assumption1(&wp, &flat, &q, f64::INFINITY)?;
    println!("reich-pinv: projected cross-moment residual {:.2e}", rp.projected_cross_moment_residual);

    let model = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        q.matrix().clone(),
        Mat::identity(1, 1),
        1.0,
    )?;
    for h in [0.1, 0.05, 0.025] {
        let quad = solve_quadratic_perturbation(&ens, &model, h)?;
        let next = esrf::filter::forecast_step(
            &ens,
            &model,
            h,
            &esrf::perturbation::PerturbationSpec::new(esrf::perturbation::PerturbationKind::Quadratic),
        )?;
        let exact = esrf::kalman::forecast_covariance(
            model.linear_drift().expect("linear"),
            q.matrix(),
            &ens.covariance(),
            h,
        );
        println!(
            "quadratic h={h}: residual {:.2e}, forecast cov gap {:.2e}, first-order recursion gap {:.2e}",
            quad.residual,
            (next.covariance() - exact).norm(),
            forecast_recursion_residual(&model.with_horizon(1.0)?, &ens.covariance(), &next.covariance(), h)?
        );
    }
    Ok(())
}
