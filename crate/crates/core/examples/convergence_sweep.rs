//! Built-in scalar sweep with fitted rates, written as CSV and JSON lines.
//! Usage: `cargo run --release --example convergence_sweep [seeds] [out_dir]`

use esrf::harness::{emit_report, run_sweep, ReportFormat, SweepConfig};

fn main() -> esrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let out = args.next();
    let report = run_sweep(&SweepConfig::scalar_demo().with_seeds(seeds))?;
    for s in &report.summaries {
        println!(
            "{:<7} {:<13} slope {:.3} r² {:.4} {}",
            s.variant,
            s.error_kind.name(),
            s.slope.unwrap_or(f64::NAN),
            s.r_squared.unwrap_or(f64::NAN),
            if s.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        let dir = std::path::Path::new(&dir);
        emit_report(&report, dir, ReportFormat::Csv)?;
        emit_report(&report, dir, ReportFormat::Jsonl)?;
        println!("report written to {}", dir.display());
    }
    Ok(())
}
