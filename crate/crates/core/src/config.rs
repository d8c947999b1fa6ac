//! TOML sweep configuration.
//!
//! ```toml
//! [model]
//! dim_state = 1
//! dim_obs = 1
//! horizon = 2.0
//! obs_matrix = [[1.0]]
//! model_noise_cov = [[1.0]]
//! obs_noise_cov = [[1.0]]
//!
//! [model.drift]
//! kind = "linear"            # or "linear_plus_tanh": A·x + tanh(x)
//! matrix = [[-0.5]]
//!
//! [prior]                    # optional, defaults to N(0, I)
//! mean = [0.0]
//! cov = [[1.0]]
//!
//! [sweep]
//! variants = ["eakf", "etkf", "wh2002"]
//! perturbation = "reich"     # reich | reich-pinv | quadratic | none
//! h_values = [0.0625, 0.03125, 0.015625, 0.0078125]
//! # optional: h_fine (h_min/16), ensemble_size (16), num_seeds (50),
//! # base_seed (0), error_kinds, pairwise = [["eakf", "wh2002"]],
//! # parallel (0 = all cores), initial_offset (0), sup_grid ("fine"),
//! # output_path
//! ```
//!
//! Errors carry the file name and the line of the offending field.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::error::{EsrfError, Result};
use crate::filter::{EsrfVariant, FilterKind};
use crate::harness::{ErrorKind, SupGrid, SweepConfig};
use crate::linalg::{Mat, PsdMatrix, Vector};
use crate::model::{Drift, GaussianPrior, StateSpaceModel};
use crate::perturbation::{PerturbationKind, PerturbationSpec};

type Rows = Vec<Vec<f64>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    model: Spanned<RawModel>,
    prior: Option<Spanned<RawPrior>>,
    sweep: Spanned<RawSweep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    dim_state: Spanned<usize>,
    dim_obs: Spanned<usize>,
    horizon: Spanned<f64>,
    obs_matrix: Spanned<Rows>,
    model_noise_cov: Spanned<Rows>,
    obs_noise_cov: Spanned<Rows>,
    drift: Spanned<RawDrift>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDrift {
    kind: Spanned<String>,
    matrix: Spanned<Rows>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    mean: Spanned<Vec<f64>>,
    cov: Spanned<Rows>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    variants: Spanned<Vec<String>>,
    perturbation: Option<Spanned<String>>,
    h_values: Spanned<Vec<f64>>,
    h_fine: Option<Spanned<f64>>,
    ensemble_size: Option<Spanned<usize>>,
    num_seeds: Option<Spanned<usize>>,
    base_seed: Option<Spanned<u64>>,
    error_kinds: Option<Spanned<Vec<String>>>,
    pairwise: Option<Spanned<Vec<[String; 2]>>>,
    parallel: Option<Spanned<usize>>,
    initial_offset: Option<Spanned<f64>>,
    sup_grid: Option<Spanned<String>>,
    output_path: Option<Spanned<String>>,
}

struct Ctx<'a> {
    path: &'a str,
    text: &'a str,
}

impl Ctx<'_> {
    fn line(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, span: &Spanned<T>, field: &str, message: impl Into<String>) -> EsrfError {
        EsrfError::ConfigField {
            path: self.path.to_string(),
            line: self.line(span.span().start),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn matrix(&self, raw: &Spanned<Rows>, field: &str, rows: usize, cols: usize) -> Result<Mat> {
        let data = raw.get_ref();
        if data.len() != rows || data.iter().any(|r| r.len() != cols) {
            return Err(self.err(raw, field, format!("expected a {rows}x{cols} matrix")));
        }
        Ok(Mat::from_fn(rows, cols, |i, j| data[i][j]))
    }

    fn wrap<T, S>(&self, span: &Spanned<S>, field: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.err(span, field, e.to_string()))
    }
}

pub fn load_sweep_config(path: &Path) -> Result<SweepConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| EsrfError::io(path, e))?;
    parse_sweep_config(&text, &path.display().to_string())
}

/// Parses a config document; `path` only labels error messages.
pub fn parse_sweep_config(text: &str, path: &str) -> Result<SweepConfig> {
    let ctx = Ctx { path, text };
    let raw: RawFile = toml::from_str(text).map_err(|e| EsrfError::ConfigField {
        path: path.to_string(),
        line: e.span().map_or(1, |s| ctx.line(s.start)),
        field: "<document>".into(),
        message: e.message().to_string(),
    })?;

    let m = raw.model.get_ref();
    let (d, p) = (*m.dim_state.get_ref(), *m.dim_obs.get_ref());
    if d == 0 {
        return Err(ctx.err(&m.dim_state, "model.dim_state", "must be at least 1"));
    }
    if p == 0 {
        return Err(ctx.err(&m.dim_obs, "model.dim_obs", "must be at least 1"));
    }
    let drift_raw = m.drift.get_ref();
    let a = ctx.matrix(&drift_raw.matrix, "model.drift.matrix", d, d)?;
    let drift = match drift_raw.kind.get_ref().as_str() {
        "linear" => Drift::Linear(a),
        "linear_plus_tanh" => Drift::linear_plus_tanh(a),
        other => {
            return Err(ctx.err(
                &drift_raw.kind,
                "model.drift.kind",
                format!("unknown drift `{other}` (linear|linear_plus_tanh)"),
            ))
        }
    };
    let g = ctx.matrix(&m.obs_matrix, "model.obs_matrix", p, d)?;
    let q = ctx.matrix(&m.model_noise_cov, "model.model_noise_cov", d, d)?;
    let c = ctx.matrix(&m.obs_noise_cov, "model.obs_noise_cov", p, p)?;
    let model = ctx.wrap(&raw.model, "model", StateSpaceModel::new(drift, g, q, c, *m.horizon.get_ref()))?;

    let prior = match &raw.prior {
        None => GaussianPrior::standard(d),
        Some(pr) => {
            let pr = pr.get_ref();
            if pr.mean.get_ref().len() != d {
                return Err(ctx.err(&pr.mean, "prior.mean", format!("expected {d} entries")));
            }
            let cov = ctx.matrix(&pr.cov, "prior.cov", d, d)?;
            ctx.wrap(&pr.cov, "prior.cov", PsdMatrix::new(cov.clone()))?;
            GaussianPrior {
                mean: Vector::from_vec(pr.mean.get_ref().clone()),
                cov,
            }
        }
    };

    let s = raw.sweep.get_ref();
    let pert_kind = match &s.perturbation {
        Some(v) => ctx.wrap(v, "sweep.perturbation", PerturbationKind::parse(v.get_ref()))?,
        None => PerturbationKind::Reich,
    };
    let pert = PerturbationSpec::new(pert_kind);
    let mut variants = Vec::new();
    for name in s.variants.get_ref() {
        let kind = ctx.wrap(&s.variants, "sweep.variants", FilterKind::parse(name))?;
        let spec = if kind == FilterKind::StochasticEnkf {
            PerturbationSpec::new(PerturbationKind::None)
        } else {
            pert.clone()
        };
        variants.push(ctx.wrap(&s.variants, "sweep.variants", EsrfVariant::new(kind, spec))?);
    }
    let mut cfg = SweepConfig::new(model, prior, variants, s.h_values.get_ref().clone());
    if let Some(v) = &s.h_fine {
        cfg.h_fine = *v.get_ref();
    }
    if let Some(v) = &s.ensemble_size {
        cfg.ensemble_size = *v.get_ref();
    }
    if let Some(v) = &s.num_seeds {
        cfg.num_seeds = *v.get_ref();
    }
    if let Some(v) = &s.base_seed {
        cfg.base_seed = *v.get_ref();
    }
    if let Some(v) = &s.error_kinds {
        cfg.error_kinds = v
            .get_ref()
            .iter()
            .map(|k| ctx.wrap(v, "sweep.error_kinds", ErrorKind::parse(k)))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = &s.pairwise {
        let pairs = v
            .get_ref()
            .iter()
            .map(|[a, b]| {
                Ok((
                    ctx.wrap(v, "sweep.pairwise", FilterKind::parse(a))?,
                    ctx.wrap(v, "sweep.pairwise", FilterKind::parse(b))?,
                ))
            })
            .collect::<Result<_>>()?;
        cfg = cfg.with_pairwise(pairs);
    }
    if let Some(v) = &s.parallel {
        cfg.parallel = *v.get_ref();
    }
    if let Some(v) = &s.initial_offset {
        cfg.initial_offset = *v.get_ref();
    }
    if let Some(v) = &s.sup_grid {
        cfg.sup_grid = ctx.wrap(v, "sweep.sup_grid", SupGrid::parse(v.get_ref()))?;
    }
    if let Some(v) = &s.output_path {
        cfg.output_path = Some(PathBuf::from(v.get_ref()));
    }
    ctx.wrap(&raw.sweep, "sweep", cfg.validate())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
[model]
dim_state = 1
dim_obs = 1
horizon = 2
obs_matrix = [[1.0]]
model_noise_cov = [[1.0]]
obs_noise_cov = [[1.0]]

[model.drift]
kind = "linear"
matrix = [[-0.5]]

[sweep]
variants = ["eakf", "etkf", "wh2002"]
h_values = [0.0625, 0.03125, 0.015625, 0.0078125]
num_seeds = 4
pairwise = [["eakf", "wh2002"]]
sup_grid = "coarse"
"#;

    fn line_of(e: EsrfError) -> (usize, String) {
        match e {
            EsrfError::ConfigField { line, field, .. } => (line, field),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_scalar_config() {
        let cfg = parse_sweep_config(SCALAR, "scalar.toml").unwrap();
        assert_eq!(cfg.variants.len(), 3);
        assert_eq!(cfg.num_seeds, 4);
        assert_eq!(cfg.ensemble_size, 16);
        assert_eq!(cfg.h_fine, 0.0078125 / 16.0);
        assert_eq!(cfg.sup_grid, SupGrid::Coarse);
        assert!(cfg.error_kinds.contains(&ErrorKind::PairwiseVariant));
        assert_eq!(cfg.model.horizon(), 2.0);
    }

    #[test]
    fn field_errors_point_at_lines() {
        let bad = SCALAR.replace("matrix = [[-0.5]]", "matrix = [[-0.5, 1.0]]");
        assert_eq!(line_of(parse_sweep_config(&bad, "x").unwrap_err()), (12, "model.drift.matrix".into()));
        let bad = SCALAR.replace("\"wh2002\"]\nh_values", "\"kf\"]\nh_values");
        assert_eq!(line_of(parse_sweep_config(&bad, "x").unwrap_err()), (15, "sweep.variants".into()));
        let bad = SCALAR.replace("num_seeds = 4", "num_seeds = \"four\"");
        assert_eq!(line_of(parse_sweep_config(&bad, "x").unwrap_err()).0, 17);
        let bad = SCALAR.replace("num_seeds = 4", "num_seeds = 0");
        assert_eq!(line_of(parse_sweep_config(&bad, "x").unwrap_err()).1, "sweep");
        let bad = SCALAR.replace("sup_grid", "sup_grids");
        assert!(parse_sweep_config(&bad, "x").is_err());
    }

    #[test]
    fn nonlinear_drift_and_prior() {
        let text = SCALAR.replace("kind = \"linear\"", "kind = \"linear_plus_tanh\"").replace(
            "[sweep]",
            "[prior]\nmean = [0.5]\ncov = [[2.0]]\n\n[sweep]",
        );
        let cfg = parse_sweep_config(&text, "x").unwrap();
        assert!(cfg.model.linear_drift().is_none());
        assert_eq!(cfg.prior.mean[0], 0.5);
    }
}
