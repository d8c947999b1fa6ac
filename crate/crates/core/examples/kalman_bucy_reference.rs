//! Riccati flow against its scalar closed form, and a Kalman-Bucy mean on a
//! simulated path written as CSV.

use esrf::kalman::{integrate_kalman_bucy, integrate_riccati};
use esrf::model::{simulate_reference, GaussianPrior, StateSpaceModel, TimeGrid};
use esrf::{Mat, Vector};

fn main() -> esrf::Result<()> {
    // dP/dt = 2aP + q − P²/c with a = −0.5, q = c = 1 has the stationary
    // value P∞ = a + √(a² + 1).
    let one = |v: f64| Mat::from_element(1, 1, v);
    let model = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 4.0)?;
    let steps = 4096;
    let covs = integrate_riccati(&model, &one(3.0), 4.0 / steps as f64, steps)?;
    let p_inf = -0.5 + (0.25f64 + 1.0).sqrt();
    println!("P(4) = {:.6}, P∞ = {:.6}", covs[steps][(0, 0)], p_inf);

    let grid = TimeGrid::new(4.0, 0.25, 64)?;
    let path = simulate_reference(&model, &grid, &GaussianPrior::standard(1), 7)?;
    let kb = integrate_kalman_bucy(&model, &path, &Vector::zeros(1), &one(1.0))?;
    let last = path.ref_trajectory.last().expect("non-empty")[0];
    println!("signal at T {last:.3}, filter mean {:.3}", kb.means.last().expect("non-empty")[0]);
    let mut out = Vec::new();
    kb.write_csv(&mut out)?;
    println!("{} CSV rows", out.iter().filter(|b| **b == b'\n').count() - 1);
    Ok(())
}
