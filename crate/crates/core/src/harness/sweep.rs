//! Sweeps over step sizes and seeds on shared observation paths.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EsrfError, Result};
use crate::filter::{run_filter, EsrfVariant, FilterKind, FilterTrajectory};
use crate::kalman::{integrate_kalman_bucy, KalmanBucyTrajectory};
use crate::limit::{integrate_limit, member_gap, LimitTrajectory};
use crate::linalg::{op_norm, Mat, Vector};
use crate::model::{
    aggregate_increments, compensated_sum, integer_ratio, seeded_rng, simulate_reference, Ensemble, GaussianPrior,
    ObservationPath, StateSpaceModel, TimeGrid,
};
use crate::perturbation::{PerturbationKind, PerturbationSpec};

use super::fit::fit_rate;
use super::report::{ConvergenceReport, ErrorKind, ErrorRow, ReportMeta, TableSummary, MONOTONE_MIN_FRACTION};

/// Where the sup over `t ∈ [0, T]` is taken. `Fine` samples every fine grid
/// point against the piecewise-constant discrete trajectory; `Coarse` only the
/// points `t_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupGrid {
    #[default]
    Fine,
    Coarse,
}

impl SupGrid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(SupGrid::Fine),
            "coarse" => Ok(SupGrid::Coarse),
            other => Err(EsrfError::Parse(format!("unknown sup grid `{other}` (fine|coarse)"))),
        }
    }
}

pub const DEFAULT_SEEDS: usize = 50;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 16;
pub const DEFAULT_FINE_DIVISOR: f64 = 16.0;
const SHARED_PATH_TOL: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub model: StateSpaceModel,
    pub prior: GaussianPrior,
    pub variants: Vec<EsrfVariant>,
    /// Strictly decreasing.
    pub h_values: Vec<f64>,
    pub h_fine: f64,
    pub ensemble_size: usize,
    pub num_seeds: usize,
    pub base_seed: u64,
    pub error_kinds: Vec<ErrorKind>,
    /// Variant pairs compared under `pairwise_variant`.
    pub pairwise: Vec<(FilterKind, FilterKind)>,
    /// Worker threads; 0 picks the rayon default.
    pub parallel: usize,
    /// Discrete runs start from the limit's initial ensemble shifted by
    /// `√(c·h)` in every entry; 0 disables.
    pub initial_offset: f64,
    pub sup_grid: SupGrid,
    pub output_path: Option<PathBuf>,
}

impl SweepConfig {
    pub fn new(model: StateSpaceModel, prior: GaussianPrior, variants: Vec<EsrfVariant>, h_values: Vec<f64>) -> Self {
        let h_min = h_values.iter().cloned().fold(f64::INFINITY, f64::min);
        Self {
            model,
            prior,
            variants,
            h_fine: h_min / DEFAULT_FINE_DIVISOR,
            h_values,
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            num_seeds: DEFAULT_SEEDS,
            base_seed: 0,
            error_kinds: vec![
                ErrorKind::CovForecast,
                ErrorKind::CovAnalysis,
                ErrorKind::Mean,
                ErrorKind::Ensemble,
            ],
            pairwise: Vec::new(),
            parallel: 0,
            initial_offset: 0.0,
            sup_grid: SupGrid::Fine,
            output_path: None,
        }
    }

    /// Scalar model `A = −0.5`, `Q = G = C = 1`, `T = 2`, standard normal
    /// prior, EAKF/ETKF/WH with Reich perturbations, `h = 2⁻⁴ … 2⁻⁹`.
    pub fn scalar_demo() -> Self {
        let one = |v: f64| Mat::from_element(1, 1, v);
        let model = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 2.0).expect("valid scalar model");
        let reich = PerturbationSpec::new(PerturbationKind::Reich);
        let variants = vec![
            EsrfVariant::eakf(reich.clone()),
            EsrfVariant::etkf(reich.clone()),
            EsrfVariant::whitaker_hamill(reich),
        ];
        Self::new(model, GaussianPrior::standard(1), variants, dyadic_steps(4, 9))
    }

    pub fn with_seeds(mut self, n: usize) -> Self {
        self.num_seeds = n;
        self
    }

    pub fn with_base_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn with_ensemble_size(mut self, m: usize) -> Self {
        self.ensemble_size = m;
        self
    }

    pub fn with_error_kinds(mut self, kinds: Vec<ErrorKind>) -> Self {
        self.error_kinds = kinds;
        self
    }

    pub fn with_pairwise(mut self, pairs: Vec<(FilterKind, FilterKind)>) -> Self {
        self.pairwise = pairs;
        if !self.pairwise.is_empty() && !self.error_kinds.contains(&ErrorKind::PairwiseVariant) {
            self.error_kinds.push(ErrorKind::PairwiseVariant);
        }
        self
    }

    pub fn with_parallel(mut self, threads: usize) -> Self {
        self.parallel = threads;
        self
    }

    pub fn with_h_fine(mut self, h_fine: f64) -> Self {
        self.h_fine = h_fine;
        self
    }

    pub fn with_initial_offset(mut self, c: f64) -> Self {
        self.initial_offset = c;
        self
    }

    pub fn with_sup_grid(mut self, grid: SupGrid) -> Self {
        self.sup_grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EsrfError::Config(m));
        if self.h_values.is_empty() {
            return bad("h_values is empty".into());
        }
        if self.h_values.iter().any(|h| !(*h > 0.0)) {
            return bad("h_values must be positive".into());
        }
        if self.h_values.windows(2).any(|w| w[1] >= w[0]) {
            return bad("h_values must be strictly decreasing".into());
        }
        if !(self.h_fine > 0.0) {
            return bad(format!("h_fine must be positive, got {}", self.h_fine));
        }
        for &h in &self.h_values {
            integer_ratio(h, self.h_fine)?;
            TimeGrid::new(self.model.horizon(), h, 1)?;
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be at least 1".into());
        }
        if self.ensemble_size < 2 {
            return Err(EsrfError::DegenerateEnsemble(self.ensemble_size));
        }
        let d = self.model.dim_state();
        if self.prior.mean.len() != d {
            return Err(EsrfError::Dimension(format!("prior dimension {} vs model {d}", self.prior.mean.len())));
        }
        let needs_inverse = self
            .variants
            .iter()
            .any(|v| v.perturbation.kind == PerturbationKind::Reich && v.kind != FilterKind::StochasticEnkf);
        if needs_inverse && self.ensemble_size < d + 1 {
            return bad(format!(
                "reich perturbations need an invertible ensemble covariance: M = {} < d + 1 = {}",
                self.ensemble_size,
                d + 1
            ));
        }
        let mut seen = Vec::new();
        for v in &self.variants {
            if seen.contains(&v.kind) {
                return bad(format!("variant {} listed twice", v.name()));
            }
            seen.push(v.kind);
        }
        for (a, b) in &self.pairwise {
            if !seen.contains(a) || !seen.contains(b) || a == b {
                return bad(format!("pairwise comparison {a}~{b} needs two distinct configured variants"));
            }
        }
        if !(self.initial_offset >= 0.0) {
            return bad("initial_offset must be nonnegative".into());
        }
        Ok(())
    }
}

/// `2^{-lo} > … > 2^{-hi}`.
pub fn dyadic_steps(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(-k)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Source {
    Variant(usize),
    Pair(usize, usize),
}

#[derive(Clone, Debug)]
struct Table {
    label: String,
    kind: ErrorKind,
    source: Source,
    note: String,
}

fn plan_tables(cfg: &SweepConfig) -> Vec<Table> {
    let linear = cfg.model.linear_drift().is_some();
    let mut tables = Vec::new();
    for &kind in &cfg.error_kinds {
        if kind == ErrorKind::PairwiseVariant {
            continue;
        }
        for (i, v) in cfg.variants.iter().enumerate() {
            let mut note = String::new();
            if matches!(kind, ErrorKind::CovForecast | ErrorKind::CovAnalysis | ErrorKind::Mean) && !linear {
                note = "skipped: the Riccati / Kalman-Bucy reference needs a linear drift".into();
            }
            if kind == ErrorKind::Ensemble {
                if v.kind == FilterKind::StochasticEnkf {
                    note = "skipped: the stochastic EnKF has a different limit".into();
                } else if v.perturbation.kind == PerturbationKind::Quadratic {
                    note = "skipped: no continuous-time counterpart for quadratic perturbations".into();
                }
            }
            tables.push(Table {
                label: v.name().to_string(),
                kind,
                source: Source::Variant(i),
                note,
            });
        }
    }
    if cfg.error_kinds.contains(&ErrorKind::PairwiseVariant) {
        for (a, b) in &cfg.pairwise {
            let ia = cfg.variants.iter().position(|v| v.kind == *a).expect("validated");
            let ib = cfg.variants.iter().position(|v| v.kind == *b).expect("validated");
            tables.push(Table {
                label: format!("{a}~{b}"),
                kind: ErrorKind::PairwiseVariant,
                source: Source::Pair(ia, ib),
                note: String::new(),
            });
        }
    }
    tables
}

type Cell = std::result::Result<f64, String>;

/// Per-seed errors indexed `[table][h]`; `None` for skipped tables.
struct SeedOutcome {
    cells: Vec<Option<Vec<Cell>>>,
}

/// Runs every (seed, h, variant) cell and assembles the report. Seeds run in
/// parallel; results are folded in seed order so output does not depend on
/// the thread count.
pub fn run_sweep(cfg: &SweepConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let tables = plan_tables(cfg);
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|i| cfg.base_seed.wrapping_add(i)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| EsrfError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> =
        pool.install(|| seeds.par_iter().map(|&s| run_seed(cfg, &tables, s)).collect::<Result<_>>())?;
    Ok(assemble(cfg, &tables, &outcomes))
}

/// Fine-grid references shared by all cells of one seed.
struct SeedContext {
    path: ObservationPath,
    init: Ensemble,
    kalman_bucy: Option<std::result::Result<KalmanBucyTrajectory, String>>,
    limits: BTreeMap<u8, std::result::Result<LimitTrajectory, String>>,
}

fn limit_key(kind: PerturbationKind) -> u8 {
    match kind {
        PerturbationKind::Reich => 0,
        PerturbationKind::ReichPinv => 1,
        PerturbationKind::Quadratic => 2,
        PerturbationKind::None => 3,
    }
}

fn run_seed(cfg: &SweepConfig, tables: &[Table], seed: u64) -> Result<SeedOutcome> {
    let model = &cfg.model;
    let h_max = cfg.h_values[0];
    let grid = TimeGrid::new(model.horizon(), h_max, integer_ratio(h_max, cfg.h_fine)?)?;
    let path = simulate_reference(model, &grid, &cfg.prior, seed)?;
    check_shared_path(&path, &cfg.h_values)?;
    let init = cfg.prior.sample_ensemble(cfg.ensemble_size, &mut seeded_rng(seed, 1))?;

    let active: Vec<&Table> = tables.iter().filter(|t| t.note.is_empty()).collect();
    let needs_kb = active
        .iter()
        .any(|t| matches!(t.kind, ErrorKind::CovForecast | ErrorKind::CovAnalysis | ErrorKind::Mean));
    let kalman_bucy = needs_kb
        .then(|| integrate_kalman_bucy(model, &path, &init.mean(), &init.covariance()).map_err(|e| e.to_string()));
    let mut limits = BTreeMap::new();
    for t in active.iter().filter(|t| t.kind == ErrorKind::Ensemble) {
        if let Source::Variant(i) = t.source {
            let spec = &cfg.variants[i].perturbation;
            limits
                .entry(limit_key(spec.kind))
                .or_insert_with(|| integrate_limit(model, &path, &init, spec).map_err(|e| e.to_string()));
        }
    }
    let ctx = SeedContext {
        path,
        init,
        kalman_bucy,
        limits,
    };

    let mut cells: Vec<Option<Vec<Cell>>> = tables
        .iter()
        .map(|t| t.note.is_empty().then(|| Vec::with_capacity(cfg.h_values.len())))
        .collect();
    for &h in &cfg.h_values {
        let start = offset_ensemble(&ctx.init, cfg.initial_offset, h)?;
        let runs: Vec<std::result::Result<FilterTrajectory, String>> = cfg
            .variants
            .iter()
            .map(|v| {
                let v = v.clone().with_noise_seed(seed);
                run_filter(&v, model, &ctx.path, h, &start).map_err(|e| e.to_string())
            })
            .collect();
        for (t, out) in tables.iter().zip(cells.iter_mut()) {
            let Some(out) = out else { continue };
            out.push(cell_error(cfg, t, &ctx, &runs));
        }
    }
    Ok(SeedOutcome { cells })
}

fn check_shared_path(path: &ObservationPath, h_values: &[f64]) -> Result<()> {
    let total = path.total();
    let scale = 1.0 + path.obs_increments.iter().map(|v| v.norm()).sum::<f64>();
    for &h in h_values {
        let agg = aggregate_increments(path, h)?;
        let sum = compensated_sum(agg.iter(), total.len());
        let gap = (&sum - &total).norm();
        if gap > SHARED_PATH_TOL * scale {
            return Err(EsrfError::Config(format!(
                "aggregated increments at h = {h} disagree with the fine path total by {gap:e}"
            )));
        }
    }
    Ok(())
}

fn offset_ensemble(init: &Ensemble, c: f64, h: f64) -> Result<Ensemble> {
    if c == 0.0 {
        return Ok(init.clone());
    }
    let shift = (c * h).sqrt();
    Ensemble::new(init.members().map(|v| v + shift))
}

fn cell_error(
    cfg: &SweepConfig,
    table: &Table,
    ctx: &SeedContext,
    runs: &[std::result::Result<FilterTrajectory, String>],
) -> Cell {
    let run = |i: usize| runs[i].as_ref().map_err(|e| e.clone());
    match (&table.kind, &table.source) {
        (ErrorKind::PairwiseVariant, Source::Pair(a, b)) => Ok(pairwise_gap(run(*a)?, run(*b)?)),
        (kind, Source::Variant(i)) => {
            let traj = run(*i)?;
            match kind {
                ErrorKind::Ensemble => {
                    let key = limit_key(cfg.variants[*i].perturbation.kind);
                    let limit = ctx.limits[&key].as_ref().map_err(|e| e.clone())?;
                    let gap = member_gap(traj, limit).map_err(|e| e.to_string())?;
                    Ok(match cfg.sup_grid {
                        SupGrid::Fine => gap.sup(),
                        SupGrid::Coarse => {
                            let r = limit.grid.ratio_to_coarse(traj.grid.h).map_err(|e| e.to_string())?;
                            gap.gaps.iter().step_by(r).cloned().fold(0.0, f64::max)
                        }
                    })
                }
                _ => {
                    let kb = ctx.kalman_bucy.as_ref().expect("planned").as_ref().map_err(|e| e.clone())?;
                    Ok(reference_gap(*kind, traj, kb, cfg.sup_grid))
                }
            }
        }
        _ => unreachable!("pairwise tables carry a pair source"),
    }
}

/// Sup over `t` of the gap between the Riccati / Kalman-Bucy reference and
/// the discrete trajectory held constant on `[t_k, t_{k+1})`.
fn reference_gap(kind: ErrorKind, traj: &FilterTrajectory, kb: &KalmanBucyTrajectory, sup: SupGrid) -> f64 {
    let r = traj.grid.refinement;
    let stride = match sup {
        SupGrid::Fine => 1,
        SupGrid::Coarse => r,
    };
    let last = traj.steps();
    let fine_points = (0..kb.covs.len()).step_by(stride);
    match kind {
        ErrorKind::Mean => {
            let means: Vec<Vector> = traj.analysis_means();
            fine_points
                .map(|j| (&kb.means[j] - &means[(j / r).min(last)]).norm_squared())
                .fold(0.0, f64::max)
        }
        _ => {
            let covs = if kind == ErrorKind::CovForecast {
                traj.forecast_covs()
            } else {
                traj.analysis_covs()
            };
            fine_points
                .map(|j| op_norm(&(&kb.covs[j] - &covs[(j / r).min(last)])))
                .fold(0.0, f64::max)
        }
    }
}

/// `sup_k Σᵢ ‖X^{(i),a}_k − Y^{(i),a}_k‖²` for two runs on the same grid.
pub fn pairwise_gap(a: &FilterTrajectory, b: &FilterTrajectory) -> f64 {
    a.analyses
        .iter()
        .zip(&b.analyses)
        .map(|(x, y)| (x.members() - y.members()).norm_squared())
        .fold(0.0, f64::max)
}

/// Neumaier-compensated sum.
fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn assemble(cfg: &SweepConfig, tables: &[Table], outcomes: &[SeedOutcome]) -> ConvergenceReport {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let nh = cfg.h_values.len();
    for (ti, table) in tables.iter().enumerate() {
        let (lo, hi) = table.kind.slope_window();
        let mut summary = TableSummary {
            variant: table.label.clone(),
            error_kind: table.kind,
            slope: None,
            intercept: None,
            r_squared: None,
            window_lo: lo,
            window_hi: hi,
            monotone_fraction: 0.0,
            failed_cells: 0,
            pass: false,
            note: table.note.clone(),
        };
        if !table.note.is_empty() {
            summaries.push(summary);
            continue;
        }
        let per_seed: Vec<&Vec<Cell>> = outcomes.iter().map(|o| o.cells[ti].as_ref().expect("active")).collect();
        let mut fit_table = Vec::with_capacity(nh);
        let mut first_failure = None;
        for (hi_idx, &h) in cfg.h_values.iter().enumerate() {
            let mut ok = Vec::with_capacity(per_seed.len());
            for cells in &per_seed {
                match &cells[hi_idx] {
                    Ok(v) => ok.push(*v),
                    Err(e) => {
                        summary.failed_cells += 1;
                        first_failure.get_or_insert_with(|| format!("h = {h}: {e}"));
                    }
                }
            }
            if ok.is_empty() {
                continue;
            }
            let n = ok.len() as f64;
            let mean = neumaier(ok.iter().cloned()) / n;
            let std_error = if ok.len() > 1 {
                (neumaier(ok.iter().map(|v| (v - mean).powi(2))) / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            rows.push(ErrorRow {
                variant: table.label.clone(),
                error_kind: table.kind,
                h,
                error: mean,
                std_error,
            });
            fit_table.push((h, mean));
        }
        let comparable: Vec<(f64, f64)> = per_seed
            .iter()
            .filter_map(|cells| match (&cells[0], &cells[nh - 1]) {
                (Ok(a), Ok(b)) => Some((*a, *b)),
                _ => None,
            })
            .collect();
        if !comparable.is_empty() {
            let below = comparable.iter().filter(|(big, small)| small < big).count();
            summary.monotone_fraction = below as f64 / comparable.len() as f64;
        }
        let mut notes = Vec::new();
        match fit_rate(&fit_table) {
            Ok(f) => {
                summary.slope = Some(f.slope);
                summary.intercept = Some(f.intercept);
                summary.r_squared = Some(f.r_squared);
                if f.excluded > 0 {
                    notes.push(format!("{} rows excluded from the fit", f.excluded));
                }
            }
            Err(e) => notes.push(e.to_string()),
        }
        if let Some(f) = first_failure {
            notes.push(format!("failed cells, first at {f}"));
        }
        summary.note = notes.join("; ");
        summary.pass =
            summary.slope_in_window() && summary.failed_cells == 0 && summary.monotone_fraction >= MONOTONE_MIN_FRACTION;
        summaries.push(summary);
    }
    ConvergenceReport {
        meta: ReportMeta {
            num_seeds: cfg.num_seeds,
            base_seed: cfg.base_seed,
            h_fine: cfg.h_fine,
            ensemble_size: cfg.ensemble_size,
            horizon: cfg.model.horizon(),
            dim_state: cfg.model.dim_state(),
            initial_offset: cfg.initial_offset,
            sup_grid: cfg.sup_grid,
        },
        rows,
        summaries,
    }
}
