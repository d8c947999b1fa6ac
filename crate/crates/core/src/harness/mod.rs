//! Step-size sweeps, rate fits and reports.

pub mod fit;
pub mod report;
pub mod sweep;

pub use fit::{fit_rate, RateFit};
pub use report::{emit_report, parse_report, ConvergenceReport, ErrorKind, ErrorRow, ReportFormat, TableSummary};
pub use sweep::{dyadic_steps, pairwise_gap, run_sweep, SupGrid, SweepConfig};
