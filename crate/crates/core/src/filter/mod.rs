//! Discrete-time ensemble filters: EAKF, ETKF, Whitaker-Hamill, the modified
//! filter with Reich perturbations and the stochastic EnKF.

mod modified;
mod transforms;

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EsrfError, Result};
use crate::linalg::{op_norm, Mat, PsdMatrix, Vector};
use crate::model::{aggregate_increments, seeded_rng, std_normal, Ensemble, ObservationPath, StateSpaceModel, TimeGrid};
use crate::perturbation::{check_assumption1, PerturbationKind, PerturbationSpec};

pub use modified::{modified_filter_bounds, ModifiedBounds};
pub use transforms::{
    compute_gains, eakf_transform, etkf_transform, expansion_remainder_bound, expansion_remainder_operator,
    householder_fixing_ones, integral_transform_expansion, kalman_analysis_cov, orthogonal_postmultiply,
    validate_post_multiplier, whitaker_gain, GainKind, GainSet,
};

/// Threshold on `‖x̄‖` beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum FilterKind {
    #[serde(rename = "eakf")]
    Eakf,
    #[serde(rename = "etkf")]
    Etkf,
    #[serde(rename = "wh2002")]
    WhitakerHamill,
    #[serde(rename = "modified")]
    Modified,
    #[serde(rename = "stoch-enkf")]
    StochasticEnkf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Eakf,
        FilterKind::Etkf,
        FilterKind::WhitakerHamill,
        FilterKind::Modified,
        FilterKind::StochasticEnkf,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                EsrfError::Config(format!(
                    "unknown variant `{s}` (expected eakf, etkf, wh2002, modified or stoch-enkf)"
                ))
            })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Eakf => "eakf",
            FilterKind::Etkf => "etkf",
            FilterKind::WhitakerHamill => "wh2002",
            FilterKind::Modified => "modified",
            FilterKind::StochasticEnkf => "stoch-enkf",
        }
    }

    /// EAKF, ETKF and Whitaker-Hamill reproduce the Kalman analysis covariance.
    pub fn is_square_root(&self) -> bool {
        matches!(self, FilterKind::Eakf | FilterKind::Etkf | FilterKind::WhitakerHamill)
    }

    fn gain_kind(&self) -> GainKind {
        match self {
            FilterKind::Eakf | FilterKind::Etkf => GainKind::HalfPrecision,
            FilterKind::WhitakerHamill => GainKind::Whitaker,
            FilterKind::Modified => GainKind::HalfKalman,
            FilterKind::StochasticEnkf => GainKind::Kalman,
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How EAKF/ETKF deviations are updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransformRoute {
    /// Apply `A_k` (EAKF) or `T_k` (ETKF).
    #[default]
    Exact,
    /// `X − hK̂GX − h(K−K̂)Gx̄ + KΔY`, optionally plus the remainder columns.
    UnifiedExpansion { include_remainder: bool },
}

/// Generator of `M×M` orthogonal post-multipliers, called with the step
/// index and the ensemble size.
pub type PostMultiplier = Arc<dyn Fn(usize, usize) -> Mat + Send + Sync>;

#[derive(Clone)]
pub struct EsrfVariant {
    pub kind: FilterKind,
    pub perturbation: PerturbationSpec,
    pub post_multiplier: Option<PostMultiplier>,
    pub route: TransformRoute,
    /// Seed of the stochastic EnKF noise.
    pub noise_seed: u64,
}

impl fmt::Debug for EsrfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EsrfVariant")
            .field("kind", &self.kind)
            .field("perturbation", &self.perturbation)
            .field("post_multiplier", &self.post_multiplier.is_some())
            .field("route", &self.route)
            .field("noise_seed", &self.noise_seed)
            .finish()
    }
}

impl EsrfVariant {
    /// The modified filter only pairs with Reich perturbations; any other
    /// perturbation kind is rejected for it.
    pub fn new(kind: FilterKind, perturbation: PerturbationSpec) -> Result<Self> {
        if kind == FilterKind::Modified && perturbation.kind != PerturbationKind::Reich {
            return Err(EsrfError::Config(format!(
                "the modified filter uses reich perturbations, got {}",
                perturbation.kind.name()
            )));
        }
        Ok(Self {
            kind,
            perturbation,
            post_multiplier: None,
            route: TransformRoute::Exact,
            noise_seed: 0,
        })
    }

    pub fn eakf(perturbation: PerturbationSpec) -> Self {
        Self::new(FilterKind::Eakf, perturbation).expect("eakf accepts any perturbation")
    }

    pub fn etkf(perturbation: PerturbationSpec) -> Self {
        Self::new(FilterKind::Etkf, perturbation).expect("etkf accepts any perturbation")
    }

    pub fn whitaker_hamill(perturbation: PerturbationSpec) -> Self {
        Self::new(FilterKind::WhitakerHamill, perturbation).expect("wh2002 accepts any perturbation")
    }

    pub fn modified() -> Self {
        Self::new(FilterKind::Modified, PerturbationSpec::new(PerturbationKind::Reich))
            .expect("reich perturbation")
    }

    pub fn stochastic(noise_seed: u64) -> Self {
        let mut v = Self::new(FilterKind::StochasticEnkf, PerturbationSpec::new(PerturbationKind::None))
            .expect("stoch-enkf accepts any perturbation");
        v.noise_seed = noise_seed;
        v
    }

    pub fn with_route(mut self, route: TransformRoute) -> Self {
        self.route = route;
        self
    }

    pub fn with_post_multiplier(mut self, gen: PostMultiplier) -> Self {
        self.post_multiplier = Some(gen);
        self
    }

    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// Forecast ensemble together with the perturbation that produced it.
#[derive(Clone, Debug)]
pub struct ForecastOutput {
    pub ensemble: Ensemble,
    pub perturbation: Mat,
}

/// `X^f = X^a + h·drift(X^a) + h·Q^{1/2}Ŵ`.
pub fn forecast_step(analysis: &Ensemble, model: &StateSpaceModel, h: f64, pert: &PerturbationSpec) -> Result<Ensemble> {
    forecast_step_detailed(analysis, model, h, pert).map(|f| f.ensemble)
}

pub fn forecast_step_detailed(
    analysis: &Ensemble,
    model: &StateSpaceModel,
    h: f64,
    pert: &PerturbationSpec,
) -> Result<ForecastOutput> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(EsrfError::Config(format!("forecast step must be positive, got {h}")));
    }
    let w = pert.generate(analysis, model, h)?;
    let x = analysis.members();
    let mut next = x + model.drift().eval_columns(x) * h;
    if pert.kind != PerturbationKind::None {
        next += model.q_sqrt() * &w * h;
    }
    Ok(ForecastOutput {
        ensemble: Ensemble::new(next)?,
        perturbation: w,
    })
}

/// Stochastic forecast `X + h·drift(X) + Q^{1/2}·W̃`, `W̃ ~ N(0, h·I)`.
fn stochastic_forecast<R: Rng>(analysis: &Ensemble, model: &StateSpaceModel, h: f64, rng: &mut R) -> Result<Ensemble> {
    let x = analysis.members();
    let noise = Mat::from_fn(x.nrows(), x.ncols(), |_, _| std_normal(rng) * h.sqrt());
    Ensemble::new(x + model.drift().eval_columns(x) * h + model.q_sqrt() * noise)
}

/// Analysis ensemble with the quantities used to build it.
#[derive(Clone, Debug)]
pub struct AnalysisOutput {
    pub ensemble: Ensemble,
    pub gains: GainSet,
    /// `‖mean(X^a) − (x̄^f + K(ΔY − hGx̄^f))‖`.
    pub implied_mean_residual: f64,
}

/// One analysis step of a deterministic variant. The stochastic EnKF needs a
/// noise source; use [`analysis_step_with_rng`] for it.
pub fn analysis_step(
    forecast: &Ensemble,
    variant: &EsrfVariant,
    model: &StateSpaceModel,
    h: f64,
    dy: &Vector,
) -> Result<AnalysisOutput> {
    analysis_impl::<ChaCha8Rng>(forecast, variant, model, h, dy, 0, None)
}

pub fn analysis_step_with_rng<R: Rng>(
    forecast: &Ensemble,
    variant: &EsrfVariant,
    model: &StateSpaceModel,
    h: f64,
    dy: &Vector,
    step: usize,
    rng: &mut R,
) -> Result<AnalysisOutput> {
    analysis_impl(forecast, variant, model, h, dy, step, Some(rng))
}

fn analysis_impl<R: Rng>(
    forecast: &Ensemble,
    variant: &EsrfVariant,
    model: &StateSpaceModel,
    h: f64,
    dy: &Vector,
    step: usize,
    rng: Option<&mut R>,
) -> Result<AnalysisOutput> {
    transforms::check_step(h)?;
    if dy.len() != model.dim_obs() {
        return Err(EsrfError::Dimension(format!(
            "observation increment has length {}, expected {}",
            dy.len(),
            model.dim_obs()
        )));
    }
    if forecast.dim() != model.dim_state() {
        return Err(EsrfError::Dimension(format!(
            "ensemble dimension {} does not match the model ({})",
            forecast.dim(),
            model.dim_state()
        )));
    }
    let stats = forecast.stats();
    let p = PsdMatrix::symmetrized(&stats.covariance)?;
    let gains = compute_gains(variant.kind.gain_kind(), &p, model, h)?;
    let g = model.obs_matrix();
    let xf = forecast.members();
    let innovation = dy - g * &stats.mean * h;
    let target_mean = &stats.mean + &gains.k * &innovation;

    let members = match variant.kind {
        FilterKind::Eakf | FilterKind::Etkf => match variant.route {
            TransformRoute::Exact => {
                let devs = if variant.kind == FilterKind::Eakf {
                    eakf_transform(forecast, model, h)? * &stats.deviations
                } else {
                    &stats.deviations * etkf_transform(forecast, model, h)?
                };
                let devs = post_multiply(variant, devs, step)?;
                shift(xf, &(devs - &stats.deviations), &(&target_mean - &stats.mean))
            }
            TransformRoute::UnifiedExpansion { include_remainder } => {
                let mut x = unified(xf, &stats.mean, &gains, g, dy, h);
                if include_remainder {
                    let (_, rem) = integral_transform_expansion(forecast, model, h)?;
                    x += rem;
                }
                if variant.post_multiplier.is_some() {
                    let e = Ensemble::new(x)?;
                    let mean = e.mean();
                    let devs = post_multiply(variant, e.deviations(), step)?;
                    Ensemble::from_mean_and_deviations(&mean, &devs)?.into_members()
                } else {
                    x
                }
            }
        },
        FilterKind::WhitakerHamill => {
            let x = unified(xf, &stats.mean, &gains, g, dy, h);
            if variant.post_multiplier.is_some() {
                let e = Ensemble::new(x)?;
                let mean = e.mean();
                let devs = post_multiply(variant, e.deviations(), step)?;
                Ensemble::from_mean_and_deviations(&mean, &devs)?.into_members()
            } else {
                x
            }
        }
        FilterKind::Modified => {
            // X^f + K(ΔY − (h/2)G(X^f + x̄^f))
            let mut x = xf.clone();
            for (j, col) in xf.column_iter().enumerate() {
                let r = dy - g * (col + &stats.mean) * (0.5 * h);
                x.set_column(j, &(col + &gains.k * r));
            }
            x
        }
        FilterKind::StochasticEnkf => {
            let rng = rng.ok_or_else(|| {
                EsrfError::Config("the stochastic EnKF needs a noise source (analysis_step_with_rng)".into())
            })?;
            let c_sqrt = model.c_sqrt();
            let mut x = xf.clone();
            for (j, col) in xf.column_iter().enumerate() {
                let v = Vector::from_fn(model.dim_obs(), |_, _| std_normal(rng) * h.sqrt());
                let dyi = dy + c_sqrt * v;
                x.set_column(j, &(col + &gains.k * (dyi - g * col * h)));
            }
            x
        }
    };
    let ensemble = Ensemble::new(members)?;
    let implied_mean_residual = (ensemble.mean() - &target_mean).norm();
    Ok(AnalysisOutput {
        ensemble,
        gains,
        implied_mean_residual,
    })
}

/// `X − hK̂GX − h(K−K̂)Gx̄ + KΔY` applied column-wise.
fn unified(xf: &Mat, mean: &Vector, gains: &GainSet, g: &Mat, dy: &Vector, h: f64) -> Mat {
    let common = -(&gains.k - &gains.k_hat) * g * mean * h + &gains.k * dy;
    let mut x = xf - &gains.k_hat * g * xf * h;
    for mut col in x.column_iter_mut() {
        col += &common;
    }
    x
}

/// `X + ΔE + δ·1ᵀ`.
fn shift(x: &Mat, dev_change: &Mat, mean_change: &Vector) -> Mat {
    let mut out = x + dev_change;
    for mut col in out.column_iter_mut() {
        col += mean_change;
    }
    out
}

fn post_multiply(variant: &EsrfVariant, devs: Mat, step: usize) -> Result<Mat> {
    match &variant.post_multiplier {
        Some(gen) => orthogonal_postmultiply(&devs, &gen(step, devs.ncols())),
        None => Ok(devs),
    }
}

/// Per-step diagnostics of a filter run.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub forecast_cov_norm: f64,
    pub analysis_cov_norm: f64,
    pub spread_forecast: f64,
    pub spread_analysis: f64,
    pub gain_norm: f64,
    pub k_hat_norm: f64,
    pub remainder_norm: f64,
    /// `‖P^a − (I − hKG)P^f‖ / ‖P^f‖`.
    pub cov_law_residual: f64,
    pub implied_mean_residual: f64,
    pub cross_moment_residual: f64,
    pub centering_residual: f64,
    pub second_moment_norm: f64,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 14] = [
    "step",
    "t",
    "forecast_cov_norm",
    "analysis_cov_norm",
    "spread_forecast",
    "spread_analysis",
    "gain_norm",
    "k_hat_norm",
    "remainder_norm",
    "cov_law_residual",
    "implied_mean_residual",
    "cross_moment_residual",
    "centering_residual",
    "second_moment_norm",
];

/// Analysis ensembles at `t_0..t_L` plus forecasts and diagnostics.
#[derive(Clone, Debug)]
pub struct FilterTrajectory {
    pub variant: FilterKind,
    pub grid: TimeGrid,
    /// `forecasts[0]` is the initial ensemble.
    pub forecasts: Vec<Ensemble>,
    pub analyses: Vec<Ensemble>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl FilterTrajectory {
    pub fn steps(&self) -> usize {
        self.analyses.len() - 1
    }

    pub fn analysis_covs(&self) -> Vec<Mat> {
        self.analyses.iter().map(Ensemble::covariance).collect()
    }

    pub fn forecast_covs(&self) -> Vec<Mat> {
        self.forecasts.iter().map(Ensemble::covariance).collect()
    }

    pub fn analysis_means(&self) -> Vec<Vector> {
        self.analyses.iter().map(Ensemble::mean).collect()
    }

    /// Diagnostics CSV in [`DIAGNOSTIC_COLUMNS`] order.
    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for d in &self.diagnostics {
            w.serialize(d).map_err(crate::kalman::csv_err)?;
        }
        w.flush().map_err(|e| EsrfError::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Runs `variant` over the path's coarse increments at step `h`.
pub fn run_filter(
    variant: &EsrfVariant,
    model: &StateSpaceModel,
    path: &ObservationPath,
    h: f64,
    init: &Ensemble,
) -> Result<FilterTrajectory> {
    let increments = aggregate_increments(path, h)?;
    let refinement = path.fine_grid.ratio_to_coarse(h)?;
    let grid = TimeGrid::new(path.fine_grid.horizon(), h, refinement)?;
    run_filter_on_increments(variant, model, &increments, grid, init)
}

/// Runs `variant` over explicit coarse increments.
pub fn run_filter_on_increments(
    variant: &EsrfVariant,
    model: &StateSpaceModel,
    increments: &[Vector],
    grid: TimeGrid,
    init: &Ensemble,
) -> Result<FilterTrajectory> {
    if init.dim() != model.dim_state() {
        return Err(EsrfError::Dimension(format!(
            "initial ensemble dimension {} does not match the model ({})",
            init.dim(),
            model.dim_state()
        )));
    }
    let h = grid.h;
    let mut rng = seeded_rng(variant.noise_seed, 2);
    let kappa = variant.perturbation.kappa_bound.unwrap_or(f64::INFINITY);
    let mut forecasts = Vec::with_capacity(increments.len() + 1);
    let mut analyses = Vec::with_capacity(increments.len() + 1);
    let mut diagnostics = Vec::with_capacity(increments.len());
    forecasts.push(init.clone());
    analyses.push(init.clone());
    for (k, dy) in increments.iter().enumerate() {
        let prev = analyses.last().expect("non-empty");
        let (forecast, pert) = if variant.kind == FilterKind::StochasticEnkf {
            (stochastic_forecast(prev, model, h, &mut rng)?, None)
        } else {
            let out = forecast_step_detailed(prev, model, h, &variant.perturbation)?;
            (out.ensemble, Some(out.perturbation))
        };
        let out = if variant.kind == FilterKind::StochasticEnkf {
            analysis_step_with_rng(&forecast, variant, model, h, dy, k + 1, &mut rng)?
        } else {
            analysis_impl::<ChaCha8Rng>(&forecast, variant, model, h, dy, k + 1, None)?
        };
        let mean_norm = out.ensemble.mean().norm();
        if !(mean_norm <= DIVERGENCE_LIMIT) {
            return Err(EsrfError::Divergence {
                step: k + 1,
                detail: format!("{} ensemble mean norm {mean_norm:e}", variant.name()),
            });
        }
        let pf = forecast.covariance();
        let pa = out.ensemble.covariance();
        let law = kalman_analysis_cov(&pf, &out.gains.k, model, h);
        let pf_norm = pf.norm();
        let cov_law_residual = if pf_norm > 0.0 { (&pa - law).norm() / pf_norm } else { pa.norm() };
        let (cross, centering, second) = match (&pert, variant.perturbation.kind) {
            (Some(w), kind) if kind != PerturbationKind::None => {
                let r = check_assumption1(w, prev, model.q(), kappa)?;
                (r.cross_moment_residual, r.centering_residual, r.second_moment_norm)
            }
            _ => (f64::NAN, f64::NAN, f64::NAN),
        };
        diagnostics.push(StepDiagnostics {
            step: k + 1,
            t: grid.time(k + 1),
            forecast_cov_norm: op_norm(&pf),
            analysis_cov_norm: op_norm(&pa),
            spread_forecast: pf.trace(),
            spread_analysis: pa.trace(),
            gain_norm: op_norm(&out.gains.k),
            k_hat_norm: op_norm(&out.gains.k_hat),
            remainder_norm: out.gains.remainder_norm,
            cov_law_residual,
            implied_mean_residual: out.implied_mean_residual,
            cross_moment_residual: cross,
            centering_residual: centering,
            second_moment_norm: second,
        });
        forecasts.push(forecast);
        analyses.push(out.ensemble);
    }
    Ok(FilterTrajectory {
        variant: variant.kind,
        grid,
        forecasts,
        analyses,
        diagnostics,
    })
}

#[cfg(test)]
mod tests;
