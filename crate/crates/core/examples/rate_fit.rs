//! Log-log slopes of synthetic error tables.

use esrf::harness::{dyadic_steps, fit_rate};

fn main() -> esrf::Result<()> {
    let hs = dyadic_steps(4, 9);
    for (label, f) in [
        ("h", Box::new(|h: f64| h) as Box<dyn Fn(f64) -> f64>),
        ("h^2", Box::new(|h: f64| h * h)),
        ("h + 10h^2", Box::new(|h: f64| h + 10.0 * h * h)),
        ("h log(1/h)", Box::new(|h: f64| h * (1.0 / h).ln())),
    ] {
        let table: Vec<_> = hs.iter().map(|&h| (h, f(h))).collect();
        let fit = fit_rate(&table)?;
        println!("{label:<11} slope {:.3}  r² {:.4}", fit.slope, fit.r_squared);
    }
    Ok(())
}
