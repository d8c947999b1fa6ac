//! All filter variants on one shared observation path, with per-step
//! diagnostics for one of them.

use esrf::filter::{run_filter, EsrfVariant};
use esrf::kalman::run_kalman;
use esrf::model::{seeded_rng, simulate_reference, GaussianPrior, StateSpaceModel, TimeGrid};
use esrf::perturbation::{PerturbationKind, PerturbationSpec};
use esrf::Mat;

fn main() -> esrf::Result<()> {
    let model = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::identity(2, 2),
        Mat::identity(1, 1),
        2.0,
    )?;
    let prior = GaussianPrior::standard(2);
    let h = 1.0 / 64.0;
    let path = simulate_reference(&model, &TimeGrid::new(2.0, h, 4)?, &prior, 11)?;
    let init = prior.sample_ensemble(32, &mut seeded_rng(11, 1))?;
    let kf = run_kalman(&model, &path, h, &init.mean(), &init.covariance())?;
    let kf_mean = &kf.analyses.last().expect("non-empty").mean;

    let reich = PerturbationSpec::new(PerturbationKind::Reich);
    for v in [
        EsrfVariant::eakf(reich.clone()),
        EsrfVariant::etkf(reich.clone()),
        EsrfVariant::whitaker_hamill(reich),
        EsrfVariant::modified(),
        EsrfVariant::stochastic(5),
    ] {
        let traj = run_filter(&v, &model, &path, h, &init)?;
        let end = traj.analyses.last().expect("non-empty");
        println!(
            "{:<10} |mean − KF mean| = {:.4}  spread {:.4}",
            v.name(),
            (end.mean() - kf_mean).norm(),
            end.spread()
        );
    }
    let traj = run_filter(&EsrfVariant::etkf(PerturbationSpec::new(PerturbationKind::Reich)), &model, &path, h, &init)?;
    let mut csv = Vec::new();
    traj.write_diagnostics_csv(&mut csv)?;
    let text = String::from_utf8_lossy(&csv);
    for line in text.lines().take(3) {
        println!("{line}");
    }
    Ok(())
}
