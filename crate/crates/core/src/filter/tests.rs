use super::*;
use crate::kalman::{run_kalman, KalmanState};
use crate::linalg::min_eigenvalue;
use crate::model::{simulate_reference, Drift, GaussianPrior};

fn one(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

fn random_model(d: usize, p: usize, seed: u64) -> StateSpaceModel {
    let mut rng = seeded_rng(seed, 9);
    let a = Mat::from_fn(d, d, |_, _| 0.5 * std_normal(&mut rng));
    let g = Mat::from_fn(p, d, |_, _| std_normal(&mut rng));
    let b = Mat::from_fn(p, p, |_, _| std_normal(&mut rng));
    let c = crate::linalg::symmetrize(&(&b * b.transpose() + Mat::identity(p, p) * 0.2));
    let bq = Mat::from_fn(d, d, |_, _| std_normal(&mut rng));
    let q = crate::linalg::symmetrize(&(&bq * bq.transpose() + Mat::identity(d, d) * 0.2));
    StateSpaceModel::linear(a, g, q, c, 1.0).unwrap()
}

fn random_ensemble(d: usize, m: usize, seed: u64) -> Ensemble {
    let mut rng = seeded_rng(seed, 0);
    Ensemble::new(Mat::from_fn(d, m, |_, _| std_normal(&mut rng))).unwrap()
}

fn oscillator() -> StateSpaceModel {
    StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::identity(2, 2),
        one(1.0),
        1.0,
    )
    .unwrap()
}

fn none() -> PerturbationSpec {
    PerturbationSpec::new(PerturbationKind::None)
}

fn reich() -> PerturbationSpec {
    PerturbationSpec::new(PerturbationKind::Reich)
}

#[test]
fn forecast_examples() {
    let e = random_ensemble(2, 4, 1);
    let zero = StateSpaceModel::linear(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), 1.0)
        .unwrap();
    assert_eq!(forecast_step(&e, &zero, 0.3, &none()).unwrap(), e);

    let m = StateSpaceModel::linear(one(1.0), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
    let e = Ensemble::new(Mat::from_row_slice(1, 2, &[2.0, 0.0])).unwrap();
    let f = forecast_step(&e, &m, 0.1, &none()).unwrap();
    assert!((f.members()[(0, 0)] - 2.2).abs() < 1e-15);

    let e = Ensemble::new(Mat::from_row_slice(1, 3, &[-1.0, 0.0, 1.0])).unwrap();
    let h = 0.1;
    let f = forecast_step(&e, &m, h, &reich()).unwrap();
    let scale = 1.0 + h * 1.0 + h / 2.0;
    for (got, dev) in f.deviations().iter().zip([-1.0, 0.0, 1.0]) {
        assert!((got - scale * dev).abs() < 1e-14);
    }
}

#[test]
fn reich_forecast_covariance_recursion() {
    for seed in 0..10 {
        let m = random_model(3, 2, seed);
        let e = random_ensemble(3, 7, seed);
        let h = 0.05;
        let f = forecast_step(&e, &m, h, &reich()).unwrap();
        let a = m.linear_drift().unwrap();
        let pa = e.covariance();
        let q = m.q().matrix();
        let prop = Mat::identity(3, 3) + a * h;
        let p_inv = PsdMatrix::symmetrized(&pa).unwrap().inverse().unwrap();
        // (I+hA)P(I+hA)ᵀ + (h/2)((I+hA)Q + Q(I+hA)ᵀ) + (h²/4)QP⁻¹Q
        let expected = &prop * &pa * prop.transpose()
            + (&prop * q + q * prop.transpose()) * (0.5 * h)
            + q * p_inv * q * (0.25 * h * h);
        assert!((f.covariance() - &expected).norm() <= 1e-10 * expected.norm());
    }
}

#[test]
fn covariance_law_and_mean_for_square_root_variants() {
    let kinds = [FilterKind::Eakf, FilterKind::Etkf, FilterKind::WhitakerHamill];
    for kind in kinds {
        let variant = EsrfVariant::new(kind, none()).unwrap();
        for seed in 0..100 {
            let (d, p, mm) = (1 + seed as usize % 3, 1 + seed as usize % 2, 3 + seed as usize % 5);
            let m = random_model(d, p, seed);
            let f = random_ensemble(d, mm, 1000 + seed);
            let h = 0.02 + 0.01 * (seed % 7) as f64;
            let dy = Vector::from_fn(p, |i, _| 0.1 * (i as f64 + 1.0));
            let out = analysis_step(&f, &variant, &m, h, &dy).unwrap();
            // Independent Kalman oracle
            let state = KalmanState::initial(f.mean(), &f.covariance()).unwrap();
            let pf = f.covariance();
            let k = crate::kalman::kalman_gain(&m, &pf, h).unwrap();
            let pa_expected = (Mat::identity(d, d) - &k * m.obs_matrix() * h) * &pf;
            let mean_expected = &state.mean + &k * (&dy - m.obs_matrix() * &state.mean * h);
            let pa = out.ensemble.covariance();
            assert!((&pa - &pa_expected).norm() <= 1e-9 * pf.norm(), "{kind} seed {seed}");
            assert!((out.ensemble.mean() - &mean_expected).norm() <= 1e-10 * (1.0 + mean_expected.norm()));
            let dev = out.ensemble.deviations();
            assert!(dev.column_sum().norm() <= 1e-12 * dev.norm().max(1e-300) * 10.0);
            assert!(min_eigenvalue(&(&pf - &pa)) >= -1e-10);
        }
    }
}

#[test]
fn eakf_and_etkf_agree() {
    for seed in 0..20 {
        let m = random_model(3, 2, seed);
        let f = random_ensemble(3, 2 + seed as usize % 6, seed);
        let dy = Vector::from_element(2, 0.3);
        let a = analysis_step(&f, &EsrfVariant::eakf(none()), &m, 0.2, &dy).unwrap();
        let t = analysis_step(&f, &EsrfVariant::etkf(none()), &m, 0.2, &dy).unwrap();
        assert!((a.ensemble.members() - t.ensemble.members()).norm() <= 1e-9 * f.members().norm());
    }
}

#[test]
fn zero_innovation_keeps_mean() {
    let m = oscillator();
    let x = Mat::from_row_slice(2, 3, &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
    let f = Ensemble::new(x).unwrap();
    let h = 0.1;
    let dy = m.obs_matrix() * f.mean() * h;
    for kind in FilterKind::ALL {
        let v = EsrfVariant::new(kind, if kind == FilterKind::Modified { reich() } else { none() }).unwrap();
        if kind == FilterKind::StochasticEnkf {
            continue;
        }
        let out = analysis_step(&f, &v, &m, h, &dy).unwrap();
        assert!((out.ensemble.mean() - f.mean()).norm() < 1e-14, "{kind}");
    }
}

#[test]
fn dimension_mismatch_rejected() {
    let m = oscillator();
    let f = random_ensemble(2, 4, 2);
    let r = analysis_step(&f, &EsrfVariant::eakf(none()), &m, 0.1, &Vector::zeros(2));
    assert!(matches!(r, Err(EsrfError::Dimension(_))));
}

#[test]
fn expansion_route_matches_exact_with_remainder() {
    let m = random_model(2, 2, 3);
    let f = random_ensemble(2, 5, 3);
    let dy = Vector::from_element(2, -0.2);
    let h = 0.1;
    let exact = analysis_step(&f, &EsrfVariant::eakf(none()), &m, h, &dy).unwrap();
    let full = EsrfVariant::eakf(none()).with_route(TransformRoute::UnifiedExpansion { include_remainder: true });
    let got = analysis_step(&f, &full, &m, h, &dy).unwrap();
    assert!((exact.ensemble.members() - got.ensemble.members()).norm() < 1e-12);
    let trunc = EsrfVariant::etkf(none()).with_route(TransformRoute::UnifiedExpansion { include_remainder: false });
    let got = analysis_step(&f, &trunc, &m, h, &dy).unwrap();
    let gap = (exact.ensemble.members() - got.ensemble.members()).norm();
    let bound = expansion_remainder_bound(&f.covariance(), &m, h) * op_norm(&f.deviations());
    assert!(gap > 0.0 && gap <= bound * (1.0 + 1e-9));
}

#[test]
fn post_multiplier_keeps_covariance() {
    let m = oscillator();
    let fine = TimeGrid::new(1.0, 0.1, 4).unwrap();
    let path = simulate_reference(&m, &fine, &GaussianPrior::standard(2), 5).unwrap();
    let init = GaussianPrior::standard(2).sample_ensemble(6, &mut seeded_rng(5, 1)).unwrap();
    let gen: PostMultiplier = Arc::new(|step, mm| {
        let v = Vector::from_fn(mm, |i, _| ((i + 1) * (step + 2)) as f64 % 5.0);
        householder_fixing_ones(&v)
    });
    for kind in [FilterKind::Eakf, FilterKind::Etkf, FilterKind::WhitakerHamill] {
        let base = EsrfVariant::new(kind, reich()).unwrap();
        let plain = run_filter(&base, &m, &path, 0.1, &init).unwrap();
        let rotated = run_filter(&base.clone().with_post_multiplier(gen.clone()), &m, &path, 0.1, &init).unwrap();
        let (a, b) = (plain.analyses.last().unwrap(), rotated.analyses.last().unwrap());
        assert!((a.covariance() - b.covariance()).norm() < 1e-10);
        assert!((a.mean() - b.mean()).norm() < 1e-10);
        assert!((a.members() - b.members()).norm() > 1e-6);
    }
    let bad: PostMultiplier = Arc::new(|_, mm| Mat::identity(mm, mm) * 2.0);
    let r = run_filter(&EsrfVariant::eakf(reich()).with_post_multiplier(bad), &m, &path, 0.1, &init);
    assert!(matches!(r, Err(EsrfError::InvalidPostMultiplier(_))));
}

#[test]
fn empty_run_returns_init() {
    let m = oscillator();
    let init = random_ensemble(2, 4, 0);
    let grid = TimeGrid::new(0.0, 0.1, 1).unwrap();
    let traj = run_filter_on_increments(&EsrfVariant::eakf(reich()), &m, &[], grid, &init).unwrap();
    assert_eq!(traj.analyses, vec![init]);
    assert!(traj.diagnostics.is_empty());
}

#[test]
fn large_ensemble_tracks_kalman() {
    let m = StateSpaceModel::linear(one(-0.5), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
    let fine = TimeGrid::new(1.0, 0.05, 1).unwrap();
    let path = simulate_reference(&m, &fine, &GaussianPrior::standard(1), 11).unwrap();
    let init = GaussianPrior::standard(1).sample_ensemble(64, &mut seeded_rng(11, 1)).unwrap();
    let kf = run_kalman(&m, &path, 0.05, &init.mean(), &init.covariance()).unwrap();
    let kalman_pa = kf.analyses.last().unwrap().cov.matrix()[(0, 0)];
    for kind in [FilterKind::Eakf, FilterKind::Etkf, FilterKind::WhitakerHamill] {
        let traj = run_filter(&EsrfVariant::new(kind, reich()).unwrap(), &m, &path, 0.05, &init).unwrap();
        let pa = traj.analyses.last().unwrap().covariance()[(0, 0)];
        assert!((pa - kalman_pa).abs() <= 0.2 * kalman_pa, "{kind}: {pa} vs {kalman_pa}");
    }
}

#[test]
fn modified_filter_inverse_covariance_bound() {
    let m = StateSpaceModel::linear(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.25])),
        one(1.0),
        1.0,
    )
    .unwrap();
    let init = GaussianPrior::standard(2).sample_ensemble(8, &mut seeded_rng(21, 1)).unwrap();
    let p0_inv = PsdMatrix::symmetrized(&init.covariance()).unwrap().inverse().unwrap();
    let bounds = modified_filter_bounds(&m, op_norm(&p0_inv)).unwrap();
    assert!(bounds.h_star.is_finite() && bounds.alpha_t.is_finite());
    let h = 0.05;
    assert!(h < bounds.h_star);
    let fine = TimeGrid::new(1.0, h, 1).unwrap();
    let path = simulate_reference(&m, &fine, &GaussianPrior::standard(2), 21).unwrap();
    let traj = run_filter(&EsrfVariant::modified(), &m, &path, h, &init).unwrap();
    for (k, pa) in traj.analysis_covs().iter().enumerate() {
        let inv = PsdMatrix::symmetrized(pa).unwrap().inverse().unwrap();
        assert!(op_norm(&inv) <= bounds.p_star_a, "step {k}");
    }
    for d in &traj.diagnostics {
        assert!(d.analysis_cov_norm <= d.forecast_cov_norm + 1e-12);
    }
}

#[test]
fn isotropic_noise_gives_infinite_alpha() {
    let b = modified_filter_bounds(&oscillator(), 1.0).unwrap();
    assert!(b.alpha_t.is_infinite());
    let finite = ModifiedBounds::at_step(&oscillator(), 1.0, 0.1).unwrap();
    assert!(finite.alpha_t.is_finite());
}

#[test]
fn modified_requires_reich() {
    assert!(EsrfVariant::new(FilterKind::Modified, none()).is_err());
}

#[test]
fn whitaker_half_gain_limits_are_first_order() {
    let m = random_model(2, 2, 8);
    let p = PsdMatrix::symmetrized(&random_ensemble(2, 5, 8).covariance()).unwrap();
    let limit = p.matrix() * m.obs_matrix().transpose() * m.c_inv() * 0.5;
    let errs: Vec<(f64, f64)> = [0.004, 0.002, 0.001]
        .iter()
        .map(|&h| {
            let g = compute_gains(GainKind::Whitaker, &p, &m, h).unwrap();
            (op_norm(&(&g.k_hat - &limit)), op_norm(&(&g.k - &g.k_hat - &limit)))
        })
        .collect();
    for w in errs.windows(2) {
        for r in [w[0].0 / w[1].0, w[0].1 / w[1].1] {
            assert!((1.6..=2.4).contains(&r), "ratio {r}");
        }
    }
}

#[test]
fn nonlinear_trace_contraction() {
    let m = StateSpaceModel::new(Drift::linear_plus_tanh(one(-1.0)), one(1.0), one(1.0), one(1.0), 1.0).unwrap();
    let fine = TimeGrid::new(1.0, 0.05, 2).unwrap();
    let path = simulate_reference(&m, &fine, &GaussianPrior::standard(1), 4).unwrap();
    let init = GaussianPrior::standard(1).sample_ensemble(10, &mut seeded_rng(4, 1)).unwrap();
    for kind in [FilterKind::Eakf, FilterKind::Etkf, FilterKind::WhitakerHamill] {
        let traj = run_filter(&EsrfVariant::new(kind, reich()).unwrap(), &m, &path, 0.05, &init).unwrap();
        for d in &traj.diagnostics {
            assert!(d.spread_analysis <= d.spread_forecast + 1e-12);
            assert!(d.cov_law_residual < 1e-9);
        }
    }
}

#[test]
fn stochastic_enkf_is_unbiased() {
    // Near-zero model noise keeps the gain deterministic so the analysis
    // mean is an unbiased estimate of the Kalman mean.
    let m = StateSpaceModel::linear(one(0.0), one(1.0), one(1e-12), one(1.0), 1.0).unwrap();
    let x = Mat::from_fn(1, 200, |_, j| -1.0 + 2.0 * j as f64 / 199.0);
    let init = Ensemble::new(x).unwrap();
    let h = 0.1;
    let dy = Vector::from_element(1, 0.05);
    let grid = TimeGrid::new(h, h, 1).unwrap();
    let kalman = {
        let s = KalmanState::initial(init.mean(), &init.covariance()).unwrap();
        crate::kalman::kalman_step(&s, &m, h, &dy).unwrap().mean[0]
    };
    let n = 500;
    let means: Vec<f64> = (0..n)
        .map(|s| {
            let traj = run_filter_on_increments(&EsrfVariant::stochastic(s), &m, std::slice::from_ref(&dy), grid, &init).unwrap();
            traj.analyses[1].mean()[0]
        })
        .collect();
    let avg = means.iter().sum::<f64>() / n as f64;
    let sd = (means.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!((avg - kalman).abs() <= 3.0 * se, "{avg} vs {kalman} ± {se}");
}

#[test]
fn diagnostics_csv_header() {
    let m = oscillator();
    let fine = TimeGrid::new(1.0, 0.25, 1).unwrap();
    let path = simulate_reference(&m, &fine, &GaussianPrior::standard(2), 1).unwrap();
    let init = random_ensemble(2, 5, 1);
    let traj = run_filter(&EsrfVariant::etkf(reich()), &m, &path, 0.25, &init).unwrap();
    let mut buf = Vec::new();
    traj.write_diagnostics_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), DIAGNOSTIC_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn divergence_is_reported() {
    let m = StateSpaceModel::linear(one(200.0), one(0.0), one(1.0), one(1.0), 1.0).unwrap();
    let init = Ensemble::new(Mat::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
    let grid = TimeGrid::new(1.0, 0.1, 1).unwrap();
    let incs = vec![Vector::zeros(1); 10];
    let r = run_filter_on_increments(&EsrfVariant::eakf(none()), &m, &incs, grid, &init);
    assert!(matches!(r, Err(EsrfError::Divergence { .. })));
}
