//! EAKF, ETKF and Whitaker-Hamill updates of one forecast ensemble.

use esrf::filter::{analysis_step, eakf_transform, etkf_transform, kalman_analysis_cov, EsrfVariant};
use esrf::kalman::kalman_gain;
use esrf::model::{seeded_rng, GaussianPrior, StateSpaceModel};
use esrf::perturbation::{PerturbationKind, PerturbationSpec};
use esrf::{Mat, Vector};

fn main() -> esrf::Result<()> {
    let model = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]),
        1.0,
    )?;
    let h = 0.1;
    let forecast = GaussianPrior::standard(2).sample_ensemble(6, &mut seeded_rng(3, 1))?;
    let e = forecast.deviations();

    let a = eakf_transform(&forecast, &model, h)?;
    let t = etkf_transform(&forecast, &model, h)?;
    println!("‖AE − ET‖_F = {:.2e}", (&a * &e - &e * t).norm());

    let pf = forecast.covariance();
    let target = kalman_analysis_cov(&pf, &kalman_gain(&model, &pf, h)?, &model, h);
    let dy = Vector::from_row_slice(&[0.05, -0.02]);
    let none = PerturbationSpec::new(PerturbationKind::None);
    for v in [
        EsrfVariant::eakf(none.clone()),
        EsrfVariant::etkf(none.clone()),
        EsrfVariant::whitaker_hamill(none),
    ] {
        let out = analysis_step(&forecast, &v, &model, h, &dy)?;
        println!(
            "{:<7} covariance law defect {:.2e}, mean {:?}",
            v.name(),
            (out.ensemble.covariance() - &target).norm(),
            out.ensemble.mean().as_slice()
        );
    }
    Ok(())
}
