//! Convergence report, its CSV / JSON-lines forms and the parse-back path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EsrfError, Result};

use super::sweep::SupGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    CovForecast,
    CovAnalysis,
    Mean,
    Ensemble,
    PairwiseVariant,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [
        ErrorKind::CovForecast,
        ErrorKind::CovAnalysis,
        ErrorKind::Mean,
        ErrorKind::Ensemble,
        ErrorKind::PairwiseVariant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ErrorKind::CovForecast => "cov_forecast",
            ErrorKind::CovAnalysis => "cov_analysis",
            ErrorKind::Mean => "mean",
            ErrorKind::Ensemble => "ensemble",
            ErrorKind::PairwiseVariant => "pairwise_variant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EsrfError::Parse(format!("unknown error kind `{s}`")))
    }

    /// Accepted slope window `(lo, hi)`; `hi = None` means unbounded.
    pub fn slope_window(&self) -> (f64, Option<f64>) {
        match self {
            ErrorKind::CovForecast | ErrorKind::CovAnalysis => (0.8, Some(1.2)),
            ErrorKind::Mean | ErrorKind::Ensemble => (0.7, Some(1.3)),
            ErrorKind::PairwiseVariant => (0.7, None),
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::Jsonl),
            other => Err(EsrfError::Parse(format!("unknown format `{other}` (csv|jsonl)"))),
        }
    }

    fn ext(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Jsonl => "jsonl",
        }
    }
}

/// One `(variant, error_kind, h)` cell averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub variant: String,
    pub error_kind: ErrorKind,
    pub h: f64,
    pub error: f64,
    pub std_error: f64,
}

pub const ERROR_COLUMNS: [&str; 5] = ["variant", "error_kind", "h", "error", "std_error"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub variant: String,
    pub error_kind: ErrorKind,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub window_lo: f64,
    pub window_hi: Option<f64>,
    /// Fraction of seeds whose error at the smallest h is below the one at
    /// the largest h.
    pub monotone_fraction: f64,
    /// Seed-cells that raised an error (divergence, degenerate covariance).
    pub failed_cells: usize,
    pub pass: bool,
    pub note: String,
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "variant",
    "error_kind",
    "slope",
    "intercept",
    "r_squared",
    "window_lo",
    "window_hi",
    "monotone_fraction",
    "failed_cells",
    "pass",
    "note",
];

pub const MONOTONE_MIN_FRACTION: f64 = 0.9;

impl TableSummary {
    pub fn slope_in_window(&self) -> bool {
        match self.slope {
            Some(s) => s >= self.window_lo && self.window_hi.is_none_or(|hi| s <= hi),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub num_seeds: usize,
    pub base_seed: u64,
    pub h_fine: f64,
    pub ensemble_size: usize,
    pub horizon: f64,
    pub dim_state: usize,
    pub initial_offset: f64,
    pub sup_grid: SupGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub meta: ReportMeta,
    pub rows: Vec<ErrorRow>,
    pub summaries: Vec<TableSummary>,
}

impl ConvergenceReport {
    pub fn all_pass(&self) -> bool {
        self.summaries.iter().all(|s| s.pass)
    }

    pub fn summary(&self, variant: &str, kind: ErrorKind) -> Option<&TableSummary> {
        self.summaries.iter().find(|s| s.variant == variant && s.error_kind == kind)
    }

    /// `(h, error)` rows of one table, in sweep order.
    pub fn table(&self, variant: &str, kind: ErrorKind) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.error_kind == kind)
            .map(|r| (r.h, r.error))
            .collect()
    }

    pub fn errors_csv(&self) -> Result<String> {
        to_csv(&ERROR_COLUMNS, &self.rows)
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&SUMMARY_COLUMNS, &self.summaries)
    }

    pub fn errors_jsonl(&self) -> Result<String> {
        to_jsonl(&self.rows)
    }

    pub fn summary_jsonl(&self) -> Result<String> {
        to_jsonl(&self.summaries)
    }

    pub fn meta_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.meta).map(|s| s + "\n").map_err(|e| EsrfError::Parse(e.to_string()))
    }
}

fn to_csv<T: Serialize>(header: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| EsrfError::Parse(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| EsrfError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EsrfError::Parse(e.to_string()))
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| EsrfError::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| EsrfError::Parse(e.to_string()))
}

fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EsrfError::Parse(e.to_string())))
        .collect()
}

/// Writes `errors.<ext>`, `summary.<ext>` and `meta.json` into `dir`
/// (created if missing) and returns the paths written.
pub fn emit_report(report: &ConvergenceReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| EsrfError::io(dir, e))?;
    let (errors, summary) = match format {
        ReportFormat::Csv => (report.errors_csv()?, report.summary_csv()?),
        ReportFormat::Jsonl => (report.errors_jsonl()?, report.summary_jsonl()?),
    };
    let files = [
        (dir.join(format!("errors.{}", format.ext())), errors),
        (dir.join(format!("summary.{}", format.ext())), summary),
        (dir.join("meta.json"), report.meta_json()?),
    ];
    let mut written = Vec::new();
    for (path, text) in files {
        fs::write(&path, text).map_err(|e| EsrfError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads back what [`emit_report`] wrote.
pub fn parse_report(dir: &Path, format: ReportFormat) -> Result<ConvergenceReport> {
    let read = |name: String| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| EsrfError::io(&path, e))
    };
    let errors = read(format!("errors.{}", format.ext()))?;
    let summary = read(format!("summary.{}", format.ext()))?;
    let meta = serde_json::from_str(&read("meta.json".into())?).map_err(|e| EsrfError::Parse(e.to_string()))?;
    let (rows, summaries) = match format {
        ReportFormat::Csv => (from_csv(&errors)?, from_csv(&summary)?),
        ReportFormat::Jsonl => (from_jsonl(&errors)?, from_jsonl(&summary)?),
    };
    Ok(ConvergenceReport { meta, rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ReportMeta {
        ReportMeta {
            num_seeds: 3,
            base_seed: 7,
            h_fine: 1.0 / 1024.0,
            ensemble_size: 16,
            horizon: 2.0,
            dim_state: 1,
            initial_offset: 0.0,
            sup_grid: SupGrid::Fine,
        }
    }

    fn sample() -> ConvergenceReport {
        let rows = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| ErrorRow {
                variant: "etkf".into(),
                error_kind: ErrorKind::Mean,
                h,
                error: 0.3 * h + 1e-17,
                std_error: h / 7.0,
            })
            .collect();
        let summaries = vec![
            TableSummary {
                variant: "etkf".into(),
                error_kind: ErrorKind::Mean,
                slope: None,
                intercept: None,
                r_squared: None,
                window_lo: 0.7,
                window_hi: Some(1.3),
                monotone_fraction: 2.0 / 3.0,
                failed_cells: 1,
                pass: false,
                note: "fit unavailable, \"quoted\"".into(),
            },
            TableSummary {
                variant: "eakf~wh2002".into(),
                error_kind: ErrorKind::PairwiseVariant,
                slope: Some(1.0000000000000002),
                intercept: Some(-0.1),
                r_squared: Some(0.999),
                window_lo: 0.7,
                window_hi: None,
                monotone_fraction: 1.0,
                failed_cells: 0,
                pass: true,
                note: String::new(),
            },
        ];
        ConvergenceReport {
            meta: meta(),
            rows,
            summaries,
        }
    }

    #[test]
    fn empty_report_has_headers() {
        let r = ConvergenceReport {
            meta: meta(),
            rows: vec![],
            summaries: vec![],
        };
        assert_eq!(r.errors_csv().unwrap(), "variant,error_kind,h,error,std_error\n");
        assert!(r.all_pass());
    }

    #[test]
    fn round_trip_both_formats() {
        let r = sample();
        for format in [ReportFormat::Csv, ReportFormat::Jsonl] {
            let dir = tempfile::tempdir().unwrap();
            let paths = emit_report(&r, dir.path(), format).unwrap();
            assert_eq!(paths.len(), 3);
            assert_eq!(parse_report(dir.path(), format).unwrap(), r);
            let first = fs::read(&paths[0]).unwrap();
            emit_report(&r, dir.path(), format).unwrap();
            assert_eq!(fs::read(&paths[0]).unwrap(), first);
        }
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(matches!(
            emit_report(&sample(), &file.join("sub"), ReportFormat::Csv),
            Err(EsrfError::Io { .. })
        ));
    }

    #[test]
    fn windows() {
        let mut s = sample().summaries[1].clone();
        assert!(s.slope_in_window());
        s.slope = Some(0.69);
        assert!(!s.slope_in_window());
        assert_eq!(ErrorKind::parse("cov_analysis").unwrap(), ErrorKind::CovAnalysis);
        assert!(ErrorKind::parse("cov").is_err());
    }
}
