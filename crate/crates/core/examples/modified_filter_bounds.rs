//! Step threshold and inverse-covariance bound of the modified filter, next to
//! the values observed along a run.

use esrf::filter::{modified_filter_bounds, run_filter, EsrfVariant, ModifiedBounds};
use esrf::linalg::op_norm;
use esrf::model::{seeded_rng, simulate_reference, GaussianPrior, StateSpaceModel, TimeGrid};
use esrf::{Mat, PsdMatrix};

fn main() -> esrf::Result<()> {
    let model = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]),
        Mat::identity(1, 1),
        2.0,
    )?;
    let prior = GaussianPrior::standard(2);
    let init = prior.sample_ensemble(16, &mut seeded_rng(9, 1))?;
    let p0_inv = op_norm(&PsdMatrix::symmetrized(&init.covariance())?.inverse()?);
    let b = modified_filter_bounds(&model, p0_inv)?;
    println!("h* = {:.4}, alpha_T = {:.3e}, bound = {:.3e}", b.h_star, b.alpha_t, b.p_star_a);

    let h = 0.0625;
    let at_h = ModifiedBounds::at_step(&model, p0_inv, h)?;
    println!("with h = {h}: alpha = {:.3e}, bound = {:.3e}", at_h.alpha_t, at_h.p_star_a);
    let path = simulate_reference(&model, &TimeGrid::new(2.0, h, 1)?, &prior, 9)?;
    let traj = run_filter(&EsrfVariant::modified(), &model, &path, h, &init)?;
    let worst = traj
        .analyses
        .iter()
        .map(|e| op_norm(&PsdMatrix::symmetrized(&e.covariance()).and_then(|p| p.inverse()).expect("invertible")))
        .fold(0.0, f64::max);
    println!("observed max ‖(P^a)^-1‖ = {worst:.3}");
    Ok(())
}
