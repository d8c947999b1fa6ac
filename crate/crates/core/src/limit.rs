//! Ensemble Kalman-Bucy system integrated by Euler on the fine grid.

use std::io::Write;

use crate::error::{EsrfError, Result};
use crate::filter::FilterTrajectory;
use crate::linalg::{min_eigenvalue, op_norm, pinv_psd, Mat, PsdMatrix, Vector};
use crate::model::{Ensemble, ObservationPath, StateSpaceModel, TimeGrid};
use crate::perturbation::{perturb_continuous, PerturbationKind, PerturbationSpec};

/// Per-step record of the limit ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitDiagnostics {
    pub cov_norm: f64,
    pub spread: f64,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug)]
pub struct LimitTrajectory {
    pub grid: TimeGrid,
    /// Members at every fine grid point, `fine_steps + 1` entries.
    pub ensembles: Vec<Ensemble>,
    pub diagnostics: Vec<LimitDiagnostics>,
    pub sup_spread: f64,
    /// Largest gap between the ensemble-mean increment and an Euler step of
    /// the Kalman-Bucy mean equation driven by the ensemble covariance.
    pub mean_identity_residual: f64,
}

impl LimitTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    pub fn covariances(&self) -> Vec<Mat> {
        self.ensembles.iter().map(Ensemble::covariance).collect()
    }

    pub fn means(&self) -> Vec<Vector> {
        self.ensembles.iter().map(Ensemble::mean).collect()
    }

    /// Snapshot CSV at the requested times (nearest fine point at or below):
    /// `t, x_<component>_<member>...`.
    pub fn write_snapshots_csv<W: Write>(&self, out: W, times: &[f64]) -> Result<()> {
        let (d, m) = self.ensembles[0].members().shape();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for j in 0..m {
            for i in 0..d {
                header.push(format!("x_{i}_{j}"));
            }
        }
        w.write_record(&header).map_err(crate::kalman::csv_err)?;
        for &t in times {
            let k = self.grid.nu(t);
            let mut row = vec![self.grid.time(k).to_string()];
            row.extend(self.ensembles[k].members().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(crate::kalman::csv_err)?;
        }
        w.flush().map_err(|e| EsrfError::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Euler scheme on the path's fine grid:
/// `X += h(f(X) + Q^{1/2}Ŵ) + P GᵀC⁻¹(ΔY − (h/2)G(X + x̄))`, with `P` the
/// ensemble covariance and `Ŵ = ½Q^{1/2}P⁻¹(X − x̄)` for the Reich kind.
pub fn integrate_limit(
    model: &StateSpaceModel,
    path: &ObservationPath,
    init: &Ensemble,
    pert: &PerturbationSpec,
) -> Result<LimitTrajectory> {
    if init.dim() != model.dim_state() {
        return Err(EsrfError::Dimension(format!(
            "initial ensemble dimension {} does not match the model ({})",
            init.dim(),
            model.dim_state()
        )));
    }
    if pert.kind == PerturbationKind::Quadratic {
        return Err(EsrfError::UnsupportedModel(
            "the quadratic perturbation has no continuous-time counterpart; use reich".into(),
        ));
    }
    let dt = path.fine_step();
    let g = model.obs_matrix();
    let gain_right = g.transpose() * model.c_inv();
    let q_sqrt = model.q_sqrt();
    let mut ensembles = Vec::with_capacity(path.len() + 1);
    let mut diagnostics = Vec::with_capacity(path.len() + 1);
    let mut residual: f64 = 0.0;
    let mut x = init.clone();
    for (j, dy) in path.obs_increments.iter().enumerate() {
        let stats = x.stats();
        let p = PsdMatrix::symmetrized(&stats.covariance)?;
        diagnostics.push(LimitDiagnostics {
            cov_norm: op_norm(p.matrix()),
            spread: stats.spread,
            min_eigenvalue: min_eigenvalue(p.matrix()),
        });
        let w = match pert.kind {
            PerturbationKind::Reich => perturb_continuous(&x, model.q(), &p).map_err(|e| match e {
                EsrfError::SingularCovariance(detail) => EsrfError::DegenerateCovariance { step: j, detail },
                other => other,
            })?,
            PerturbationKind::ReichPinv => {
                q_sqrt * pinv_psd(&p, pert.rank_tol)?.matrix() * &stats.deviations * 0.5
            }
            _ => Mat::zeros(x.dim(), x.size()),
        };
        let gain = p.matrix() * &gain_right;
        let members = x.members();
        let drift = model.drift().eval_columns(members);
        let mut next = members + (&drift + q_sqrt * &w) * dt;
        for (col, mut out) in members.column_iter().zip(next.column_iter_mut()) {
            out += &gain * (dy - g * (col + &stats.mean) * (0.5 * dt));
        }
        let next = Ensemble::new(next)?;
        let expected = &stats.mean + drift.column_mean() * dt + &gain * (dy - g * &stats.mean * dt);
        let scale = 1.0 + stats.mean.norm();
        residual = residual.max((next.mean() - expected).norm() / scale);
        ensembles.push(x);
        x = next;
    }
    let stats = x.stats();
    diagnostics.push(LimitDiagnostics {
        cov_norm: op_norm(&stats.covariance),
        spread: stats.spread,
        min_eigenvalue: min_eigenvalue(&stats.covariance),
    });
    ensembles.push(x);
    let sup_spread = diagnostics.iter().map(|d| d.spread).fold(0.0, f64::max);
    Ok(LimitTrajectory {
        grid: path.fine_grid,
        ensembles,
        diagnostics,
        sup_spread,
        mean_identity_residual: residual,
    })
}

/// `Σᵢ‖X^{(i),a}_{η(t)} − X^{(i)}_t‖²` at every fine time, with its running sup.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberGap {
    pub times: Vec<f64>,
    pub gaps: Vec<f64>,
    pub running_sup: Vec<f64>,
}

impl MemberGap {
    pub fn sup(&self) -> f64 {
        self.running_sup.last().copied().unwrap_or(0.0)
    }
}

pub fn member_gap(discrete: &FilterTrajectory, limit: &LimitTrajectory) -> Result<MemberGap> {
    let m_d = discrete.analyses[0].size();
    let m_l = limit.ensembles[0].size();
    if m_d != m_l {
        return Err(EsrfError::Dimension(format!("ensemble sizes differ: {m_d} vs {m_l}")));
    }
    let r = limit.grid.ratio_to_coarse(discrete.grid.h)?;
    if limit.ensembles.len() != discrete.steps() * r + 1 {
        return Err(EsrfError::Dimension(format!(
            "limit has {} fine points, discrete grid needs {}",
            limit.ensembles.len(),
            discrete.steps() * r + 1
        )));
    }
    let mut times = Vec::with_capacity(limit.ensembles.len());
    let mut gaps = Vec::with_capacity(limit.ensembles.len());
    let mut running_sup = Vec::with_capacity(limit.ensembles.len());
    let mut sup: f64 = 0.0;
    for (j, e) in limit.ensembles.iter().enumerate() {
        let gap = (discrete.analyses[j / r].members() - e.members()).norm_squared();
        sup = sup.max(gap);
        times.push(limit.grid.time(j));
        gaps.push(gap);
        running_sup.push(sup);
    }
    Ok(MemberGap {
        times,
        gaps,
        running_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{run_filter, EsrfVariant};
    use crate::kalman::integrate_riccati;
    use crate::model::{seeded_rng, simulate_reference, GaussianPrior};

    fn one(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn reich() -> PerturbationSpec {
        PerturbationSpec::new(PerturbationKind::Reich)
    }

    #[test]
    fn frozen_dynamics() {
        let m = StateSpaceModel::linear(Mat::zeros(2, 2), Mat::zeros(1, 2), Mat::identity(2, 2), one(1.0), 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 0.1, 2).unwrap();
        let path = simulate_reference(&m, &grid, &GaussianPrior::standard(2), 1).unwrap();
        let init = GaussianPrior::standard(2).sample_ensemble(5, &mut seeded_rng(1, 1)).unwrap();
        let traj = integrate_limit(&m, &path, &init, &PerturbationSpec::new(PerturbationKind::None)).unwrap();
        for e in &traj.ensembles {
            assert_eq!(e, &init);
        }
    }

    #[test]
    fn mean_follows_kalman_bucy_step() {
        let m = StateSpaceModel::linear(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            Mat::identity(2, 2),
            one(1.0),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 0.05, 8).unwrap();
        let path = simulate_reference(&m, &grid, &GaussianPrior::standard(2), 3).unwrap();
        let init = GaussianPrior::standard(2).sample_ensemble(8, &mut seeded_rng(3, 1)).unwrap();
        let traj = integrate_limit(&m, &path, &init, &reich()).unwrap();
        assert!(traj.mean_identity_residual <= 1e-12, "{}", traj.mean_identity_residual);
        for e in &traj.ensembles {
            assert!(e.deviations().column_sum().norm() <= 1e-12 * (1.0 + e.members().norm()));
        }
        assert!(traj.sup_spread.is_finite());
    }

    #[test]
    fn covariance_tracks_riccati() {
        let m = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 0.01, 4).unwrap();
        let mut within = 0;
        let n = 100;
        for seed in 0..n {
            let path = simulate_reference(&m, &grid, &GaussianPrior::standard(1), seed).unwrap();
            let init = GaussianPrior::standard(1).sample_ensemble(64, &mut seeded_rng(seed, 1)).unwrap();
            let traj = integrate_limit(&m, &path, &init, &reich()).unwrap();
            let ric = integrate_riccati(&m, &init.covariance(), path.fine_step(), path.len()).unwrap();
            let pt = traj.ensembles.last().unwrap().covariance()[(0, 0)];
            let pr = ric.last().unwrap()[(0, 0)];
            if (pt - pr).abs() <= 0.25 * pr {
                within += 1;
            }
        }
        assert_eq!(within, n);
    }

    #[test]
    fn singular_covariance_aborts() {
        let m = StateSpaceModel::linear(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), 1.0)
            .unwrap();
        let grid = TimeGrid::new(1.0, 0.5, 1).unwrap();
        let path = simulate_reference(&m, &grid, &GaussianPrior::standard(2), 1).unwrap();
        let init = Ensemble::new(Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            integrate_limit(&m, &path, &init, &reich()),
            Err(EsrfError::DegenerateCovariance { step: 0, .. })
        ));
        let q = PerturbationSpec::new(PerturbationKind::Quadratic);
        assert!(matches!(integrate_limit(&m, &path, &init, &q), Err(EsrfError::UnsupportedModel(_))));
    }

    #[test]
    fn gap_cases() {
        let m = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 0.25, 4).unwrap();
        let path = simulate_reference(&m, &grid, &GaussianPrior::standard(1), 2).unwrap();
        let init = GaussianPrior::standard(1).sample_ensemble(4, &mut seeded_rng(2, 1)).unwrap();
        let limit = integrate_limit(&m, &path, &init, &reich()).unwrap();

        // A discrete trajectory built from the limit's own coarse points.
        let mut fake = run_filter(&EsrfVariant::etkf(reich()), &m, &path, 0.25, &init).unwrap();
        fake.analyses = (0..=4).map(|k| limit.ensembles[4 * k].clone()).collect();
        let gap = member_gap(&fake, &limit).unwrap();
        for (j, g) in gap.gaps.iter().enumerate() {
            if j % 4 == 0 {
                assert_eq!(*g, 0.0);
            }
        }

        let mut shifted = limit.clone();
        let c = 0.3;
        for e in shifted.ensembles.iter_mut() {
            *e = Ensemble::new(e.members().map(|v| v + c)).unwrap();
        }
        let gap = member_gap(&fake, &shifted).unwrap();
        for j in (0..gap.gaps.len()).step_by(4) {
            assert!((gap.gaps[j] - 4.0 * c * c).abs() < 1e-12);
        }

        let other = GaussianPrior::standard(1).sample_ensemble(5, &mut seeded_rng(2, 1)).unwrap();
        let limit5 = integrate_limit(&m, &path, &other, &reich()).unwrap();
        assert!(matches!(member_gap(&fake, &limit5), Err(EsrfError::Dimension(_))));
    }

    fn coarsened(path: &ObservationPath, factor: usize) -> ObservationPath {
        let mut p = path.clone();
        let h = path.fine_step() * factor as f64;
        p.obs_increments = crate::model::aggregate_increments(path, h).unwrap();
        p.fine_grid = TimeGrid {
            h,
            steps: path.len() / factor,
            refinement: 1,
        };
        p
    }

    #[test]
    fn fine_grid_self_convergence() {
        // RMS terminal member error against a 64x finer solution on the same
        // Brownian path; halving the step should roughly halve it.
        let m = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 1.0 / 16.0, 64).unwrap();
        let (mut e1, mut e2) = (0.0, 0.0);
        for seed in 0..200 {
            let init = GaussianPrior::standard(1).sample_ensemble(6, &mut seeded_rng(seed, 1)).unwrap();
            let path = simulate_reference(&m, &grid, &GaussianPrior::standard(1), seed).unwrap();
            let terminal = |p: &ObservationPath| {
                integrate_limit(&m, p, &init, &reich()).unwrap().ensembles.last().unwrap().members().clone()
            };
            let reference = terminal(&path);
            e1 += (terminal(&coarsened(&path, 64)) - &reference).norm_squared();
            e2 += (terminal(&coarsened(&path, 32)) - &reference).norm_squared();
        }
        let ratio = (e1 / e2).sqrt();
        assert!((1.6..=2.4).contains(&ratio), "{ratio}");
    }
}
