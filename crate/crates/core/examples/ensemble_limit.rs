//! Discrete ETKF runs approaching the ensemble Kalman-Bucy system on one
//! shared path.

use esrf::filter::{run_filter, EsrfVariant};
use esrf::limit::{integrate_limit, member_gap};
use esrf::model::{seeded_rng, simulate_reference, GaussianPrior, StateSpaceModel, TimeGrid};
use esrf::perturbation::{PerturbationKind, PerturbationSpec};
use esrf::Mat;

fn main() -> esrf::Result<()> {
    let one = |v: f64| Mat::from_element(1, 1, v);
    let model = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 2.0)?;
    let prior = GaussianPrior::standard(1);
    let reich = PerturbationSpec::new(PerturbationKind::Reich);
    let path = simulate_reference(&model, &TimeGrid::new(2.0, 1.0 / 16.0, 512)?, &prior, 4)?;
    let init = prior.sample_ensemble(16, &mut seeded_rng(4, 1))?;
    let limit = integrate_limit(&model, &path, &init, &reich)?;
    println!("limit: sup spread {:.3}, mean identity residual {:.1e}", limit.sup_spread, limit.mean_identity_residual);

    for k in 4..=9 {
        let h = 2f64.powi(-k);
        let traj = run_filter(&EsrfVariant::etkf(reich.clone()), &model, &path, h, &init)?;
        println!("h = 2^-{k}: sup member gap {:.4}", member_gap(&traj, &limit)?.sup());
    }

    let mut csv = Vec::new();
    limit.write_snapshots_csv(&mut csv, &[0.0, 1.0, 2.0])?;
    print!("{}", String::from_utf8_lossy(&csv).lines().next().unwrap_or_default());
    println!(" ... ({} bytes)", csv.len());
    Ok(())
}
