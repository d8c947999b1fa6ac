//! Discrete Kalman filter and the Kalman-Bucy filter on the fine grid.

use std::io::Write;

use crate::error::{EsrfError, Result};
use crate::linalg::{op_norm, solve_right_spd, symmetrize, Mat, PsdMatrix, Vector};
use crate::model::{aggregate_increments, ObservationPath, StateSpaceModel, TimeGrid};

/// Blow-up threshold for `‖P_t‖`.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forecast,
    Analysis,
}

#[derive(Clone, Debug)]
pub struct KalmanState {
    pub mean: Vector,
    pub cov: PsdMatrix,
    pub phase: Phase,
    pub step_index: usize,
}

impl KalmanState {
    pub fn initial(mean: Vector, cov: &Mat) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(EsrfError::Dimension(format!(
                "mean has length {}, covariance is {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        Ok(Self {
            mean,
            cov: PsdMatrix::symmetrized(cov)?,
            phase: Phase::Analysis,
            step_index: 0,
        })
    }
}

/// Forecast, analysis and gain of one Kalman step.
#[derive(Clone, Debug)]
pub struct KalmanStep {
    pub forecast: KalmanState,
    pub analysis: KalmanState,
    pub gain: Mat,
}

/// `K = P Gᵀ (C + h G P Gᵀ)⁻¹` by a Cholesky solve.
pub fn kalman_gain(model: &StateSpaceModel, p: &Mat, h: f64) -> Result<Mat> {
    let g = model.obs_matrix();
    let pgt = p * g.transpose();
    let s = model.c().matrix() + (g * &pgt) * h;
    solve_right_spd(&pgt, &symmetrize(&s))
}

/// `(I + hA) P (I + hA)ᵀ + hQ`.
pub fn forecast_covariance(a: &Mat, q: &Mat, p: &Mat, h: f64) -> Mat {
    let d = a.nrows();
    let m = Mat::identity(d, d) + a * h;
    symmetrize(&(&m * p * m.transpose() + q * h))
}

pub fn kalman_step_detailed(
    state: &KalmanState,
    model: &StateSpaceModel,
    h: f64,
    dy: &Vector,
) -> Result<KalmanStep> {
    let a = model.require_linear("the Kalman filter")?;
    if state.phase != Phase::Analysis {
        return Err(EsrfError::Config("kalman_step expects an analysis state".into()));
    }
    if dy.len() != model.dim_obs() {
        return Err(EsrfError::Dimension(format!(
            "observation increment has length {}, expected {}",
            dy.len(),
            model.dim_obs()
        )));
    }
    let d = model.dim_state();
    let xf = &state.mean + a * &state.mean * h;
    let pf = forecast_covariance(a, model.q().matrix(), state.cov.matrix(), h);
    let k = kalman_gain(model, &pf, h)?;
    let g = model.obs_matrix();
    let xa = &xf + &k * (dy - g * &xf * h);
    let pa = (Mat::identity(d, d) - &k * g * h) * &pf;
    let step_index = state.step_index + 1;
    Ok(KalmanStep {
        forecast: KalmanState {
            mean: xf,
            cov: PsdMatrix::symmetrized(&pf)?,
            phase: Phase::Forecast,
            step_index,
        },
        analysis: KalmanState {
            mean: xa,
            cov: PsdMatrix::symmetrized(&pa)?,
            phase: Phase::Analysis,
            step_index,
        },
        gain: k,
    })
}

/// One forecast/analysis cycle with observation increment `dy`.
pub fn kalman_step(state: &KalmanState, model: &StateSpaceModel, h: f64, dy: &Vector) -> Result<KalmanState> {
    kalman_step_detailed(state, model, h, dy).map(|s| s.analysis)
}

/// Discrete Kalman filter run over a coarse grid.
#[derive(Clone, Debug)]
pub struct KalmanRun {
    pub grid: TimeGrid,
    /// Index `k` holds step `k`; entry 0 is the initial state (also used as forecast 0).
    pub forecasts: Vec<KalmanState>,
    pub analyses: Vec<KalmanState>,
    pub gains: Vec<Mat>,
}

pub fn run_kalman(
    model: &StateSpaceModel,
    path: &ObservationPath,
    h: f64,
    mean0: &Vector,
    cov0: &Mat,
) -> Result<KalmanRun> {
    model.require_linear("the Kalman filter")?;
    let increments = aggregate_increments(path, h)?;
    let grid = TimeGrid::new(path.fine_grid.horizon(), h, path.fine_grid.ratio_to_coarse(h)?)?;
    let init = KalmanState::initial(mean0.clone(), cov0)?;
    let mut forecasts = vec![init.clone()];
    let mut analyses = vec![init];
    let mut gains = Vec::with_capacity(increments.len());
    for dy in &increments {
        let step = kalman_step_detailed(analyses.last().unwrap(), model, h, dy)?;
        forecasts.push(step.forecast);
        analyses.push(step.analysis);
        gains.push(step.gain);
    }
    Ok(KalmanRun {
        grid,
        forecasts,
        analyses,
        gains,
    })
}

/// Kalman-Bucy mean and Riccati covariance at every fine grid point.
#[derive(Clone, Debug)]
pub struct KalmanBucyTrajectory {
    pub grid: TimeGrid,
    pub means: Vec<Vector>,
    pub covs: Vec<Mat>,
    /// `sup_t ‖P_t‖` over the grid.
    pub sup_cov_norm: f64,
}

impl KalmanBucyTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    /// CSV with columns `t`, mean components, covariance upper triangle.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.means.first().map_or(0, |m| m.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("mean_{i}")));
        for i in 0..d {
            for j in i..d {
                header.push(format!("cov_{i}_{j}"));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for (k, (m, p)) in self.means.iter().zip(&self.covs).enumerate() {
            let mut row = vec![self.grid.time(k).to_string()];
            row.extend(m.iter().map(|v| v.to_string()));
            for i in 0..d {
                for j in i..d {
                    row.push(p[(i, j)].to_string());
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| EsrfError::Parse(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> EsrfError {
    EsrfError::Parse(e.to_string())
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub(crate) fn clamp_psd(p: &Mat) -> Mat {
    let s = symmetrize(p);
    if s.clone().cholesky().is_some() {
        return s;
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return s;
    }
    let l = eig.eigenvalues.map(|v| v.max(0.0));
    symmetrize(&(&eig.eigenvectors * Mat::from_diagonal(&l) * eig.eigenvectors.transpose()))
}

/// Explicit Euler for `dP = (AP + PAᵀ + Q − P GᵀC⁻¹G P)dt` with `steps`
/// steps of size `dt`; returns `steps + 1` covariances.
pub fn integrate_riccati(model: &StateSpaceModel, p0: &Mat, dt: f64, steps: usize) -> Result<Vec<Mat>> {
    let a = model.require_linear("the Riccati equation")?;
    let theta = model.obs_precision();
    let q = model.q().matrix();
    let mut p = clamp_psd(p0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(p.clone());
    for j in 0..steps {
        let rhs = a * &p + &p * a.transpose() + q - &p * &theta * &p;
        p = clamp_psd(&(&p + rhs * dt));
        let n = op_norm(&p);
        if !(n <= DIVERGENCE_LIMIT) {
            return Err(EsrfError::Divergence {
                step: j + 1,
                detail: format!("Riccati covariance norm {n:e}"),
            });
        }
        out.push(p.clone());
    }
    Ok(out)
}

/// Kalman-Bucy filter started from `(mean0, cov0)` and driven by the path's
/// fine increments.
pub fn integrate_kalman_bucy(
    model: &StateSpaceModel,
    path: &ObservationPath,
    mean0: &Vector,
    cov0: &Mat,
) -> Result<KalmanBucyTrajectory> {
    let a = model.require_linear("the Kalman-Bucy filter")?;
    let dt = path.fine_step();
    let covs = integrate_riccati(model, cov0, dt, path.len())?;
    let g = model.obs_matrix();
    let gt_cinv = g.transpose() * model.c_inv();
    let mut x = mean0.clone();
    let mut means = Vec::with_capacity(covs.len());
    means.push(x.clone());
    for (dy, p) in path.obs_increments.iter().zip(&covs) {
        x = &x + a * &x * dt + p * &gt_cinv * (dy - g * &x * dt);
        means.push(x.clone());
    }
    let sup_cov_norm = covs.iter().map(op_norm).fold(0.0, f64::max);
    Ok(KalmanBucyTrajectory {
        grid: path.fine_grid,
        means,
        covs,
        sup_cov_norm,
    })
}
