//! Loads a TOML sweep configuration and runs it with a reduced seed count.
//! Usage: `cargo run --release --example config_sweep -- configs/oscillator.toml`

use std::path::PathBuf;

use esrf::config::load_sweep_config;
use esrf::harness::run_sweep;

fn main() -> esrf::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/oscillator.toml")));
    let mut cfg = load_sweep_config(&path)?;
    cfg.num_seeds = cfg.num_seeds.min(5);
    let report = run_sweep(&cfg)?;
    print!("{}", report.summary_csv()?);
    Ok(())
}
