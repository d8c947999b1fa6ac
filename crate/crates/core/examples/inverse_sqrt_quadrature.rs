//! `P^{-1/2}` by Gauss-Laguerre quadrature of the integral representation,
//! compared with the spectral root as the node count grows.

use esrf::checks::random_spd_with_condition;
use esrf::linalg::sqrt_inv_integral;
use esrf::model::seeded_rng;
use esrf::PsdMatrix;

fn main() -> esrf::Result<()> {
    let mut rng = seeded_rng(2, 0);
    for cond in [1e2, 1e4, 1e6] {
        let p = PsdMatrix::symmetrized(&random_spd_with_condition(4, cond, &mut rng))?;
        let exact = p.inv_sqrt()?;
        let errs: Vec<String> = [32, 128, 512, 1024]
            .iter()
            .map(|&n| {
                let q = sqrt_inv_integral(&p, n).expect("SPD input");
                format!("{n}:{:.1e}", (q.matrix() - &exact).norm() / exact.norm())
            })
            .collect();
        println!("cond {cond:e}  {}", errs.join("  "));
    }
    Ok(())
}
