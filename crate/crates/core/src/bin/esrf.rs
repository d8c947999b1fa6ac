use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use esrf::checks::{run_identity_suite, SuiteSize};
use esrf::config::load_sweep_config;
use esrf::harness::{emit_report, run_sweep, ConvergenceReport, ReportFormat, SweepConfig};

#[derive(Parser)]
#[command(name = "esrf", version, about = "Ensemble square root filter convergence sweeps and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Sweep configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for report files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Number of seeds (overrides the config).
    #[arg(long, global = true)]
    seeds: Option<usize>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    parallel: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by --config.
    Sweep,
    /// Run the randomized identity and bound checks.
    Check {
        /// Fewer instances per check.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Built-in scalar sweep (A = -0.5, Q = G = C = 1, T = 2, M = 16).
    Demo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Jsonl => ReportFormat::Jsonl,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> esrf::Result<bool> {
    match &cli.command {
        Command::Check { quick, seed } => {
            let size = if *quick { SuiteSize::QUICK } else { SuiteSize::FULL };
            let results = run_identity_suite(size, *seed);
            for r in &results {
                println!("{r}");
            }
            Ok(results.iter().all(|r| r.passed))
        }
        Command::Sweep => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| esrf::EsrfError::Config("sweep needs --config PATH".into()))?;
            sweep(cli, load_sweep_config(path)?)
        }
        Command::Demo => {
            let cfg = match &cli.config {
                Some(path) => load_sweep_config(path)?,
                None => SweepConfig::scalar_demo(),
            };
            sweep(cli, cfg)
        }
    }
}

fn sweep(cli: &Cli, mut cfg: SweepConfig) -> esrf::Result<bool> {
    if let Some(n) = cli.seeds {
        cfg.num_seeds = n;
    }
    if let Some(n) = cli.parallel {
        cfg.parallel = n;
    }
    let report = run_sweep(&cfg)?;
    print_summary(&report);
    if let Some(dir) = cli.out.clone().or_else(|| cfg.output_path.clone()) {
        for path in emit_report(&report, &dir, cli.format.into())? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(report.all_pass())
}

fn print_summary(report: &ConvergenceReport) {
    let m = &report.meta;
    println!(
        "seeds={} M={} T={} h_fine={} sup={:?}",
        m.num_seeds, m.ensemble_size, m.horizon, m.h_fine, m.sup_grid
    );
    for s in &report.summaries {
        let slope = s.slope.map_or("-".to_string(), |v| format!("{v:.3}"));
        let hi = s.window_hi.map_or("inf".to_string(), |v| v.to_string());
        println!(
            "{} {:<14} {:<16} slope={:<7} window=[{}, {}] monotone={:.2} failed={} {}",
            if s.pass { "PASS" } else { "FAIL" },
            s.variant,
            s.error_kind.name(),
            slope,
            s.window_lo,
            hi,
            s.monotone_fraction,
            s.failed_cells,
            s.note
        );
    }
}
