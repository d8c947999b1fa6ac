//! Deterministic model perturbations for the forecast step, their
//! continuous-time counterparts and moment checks.

use crate::error::{EsrfError, Result};
use crate::linalg::{pinv_psd, sqrt_psd, symmetrize, Mat, PsdMatrix, RANK_TOL_REL};
use crate::model::{covariance_of, Ensemble, StateSpaceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    Reich,
    ReichPinv,
    Quadratic,
    None,
}

impl PerturbationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reich" => Ok(Self::Reich),
            "reich-pinv" => Ok(Self::ReichPinv),
            "quadratic" => Ok(Self::Quadratic),
            "none" => Ok(Self::None),
            other => Err(EsrfError::Config(format!(
                "unknown perturbation `{other}` (expected reich, reich-pinv, quadratic or none)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Reich => "reich",
            Self::ReichPinv => "reich-pinv",
            Self::Quadratic => "quadratic",
            Self::None => "none",
        }
    }
}

/// Branch of `𝒲 = −Ẽ/h ± J·Φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuadraticSign {
    #[default]
    Plus,
    Minus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Frobenius bound on the perturbation second moment. `None` until a
    /// bound has been computed (see [`reich_kappa`]).
    pub kappa_bound: Option<f64>,
    /// Relative cut-off for the pseudo-inverse.
    pub rank_tol: f64,
    pub sign: QuadraticSign,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind) -> Self {
        Self {
            kind,
            kappa_bound: None,
            rank_tol: RANK_TOL_REL,
            sign: QuadraticSign::Plus,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(EsrfError::Config(format!("kappa must be positive and finite, got {kappa}")));
        }
        self.kappa_bound = Some(kappa);
        Ok(self)
    }

    /// Perturbations `Ŵ` (one column per member) for a forecast of step `h`
    /// from `analysis`.
    pub fn generate(&self, analysis: &Ensemble, model: &StateSpaceModel, h: f64) -> Result<Mat> {
        match self.kind {
            PerturbationKind::Reich => perturb_reich(analysis, model.q()),
            PerturbationKind::ReichPinv => perturb_reich_pinv(analysis, model.q(), self.rank_tol),
            PerturbationKind::Quadratic => {
                solve_quadratic_perturbation_with(analysis, model, h, self.sign).map(|q| q.perturbation)
            }
            PerturbationKind::None => Ok(Mat::zeros(analysis.dim(), analysis.size())),
        }
    }
}

/// Invertible covariance or a singular-covariance error.
fn invertible(cov: &Mat, what: &str) -> Result<PsdMatrix> {
    let p = PsdMatrix::symmetrized(cov)?;
    let lmax = p.lambda_max();
    let lmin = p.lambda_min();
    if !(lmax > 0.0) || lmin <= RANK_TOL_REL * lmax {
        return Err(EsrfError::SingularCovariance(format!(
            "{what}: eigenvalues in [{lmin:e}, {lmax:e}]"
        )));
    }
    Ok(p)
}

/// `Ŵ = ½ Q^{1/2} (P^a)⁻¹ (X − x̄)`.
pub fn perturb_reich(analysis: &Ensemble, q: &PsdMatrix) -> Result<Mat> {
    let stats = analysis.stats();
    let p = invertible(&stats.covariance, "analysis covariance")?;
    let q_sqrt = sqrt_psd(q)?.into_matrix();
    Ok(q_sqrt * p.inverse()? * stats.deviations * 0.5)
}

/// Reich perturbation with `(P^a)^†` in place of the inverse.
pub fn perturb_reich_pinv(analysis: &Ensemble, q: &PsdMatrix, rank_tol: f64) -> Result<Mat> {
    let stats = analysis.stats();
    let p = PsdMatrix::symmetrized(&stats.covariance)?;
    let pinv = pinv_psd(&p, rank_tol)?;
    let q_sqrt = sqrt_psd(q)?.into_matrix();
    Ok(q_sqrt * pinv.matrix() * stats.deviations * 0.5)
}

/// Solution of the quadratic perturbation equation.
#[derive(Clone, Debug)]
pub struct QuadraticPerturbation {
    /// `Ŵ` columns, centered.
    pub perturbation: Mat,
    /// `𝒲 = Q^{1/2}Ŵ/√(M−1)`.
    pub scaled: Mat,
    /// Symmetric root `S^{1/2}` of `S = (I+hA)P^a(I+hA)ᵀ/h² + Q/h`.
    pub j_root: Mat,
    /// `‖Ẽ𝒲ᵀ + 𝒲Ẽᵀ + h𝒲𝒲ᵀ − Q‖_F`.
    pub residual: f64,
}

pub fn solve_quadratic_perturbation(
    analysis: &Ensemble,
    model: &StateSpaceModel,
    h: f64,
) -> Result<QuadraticPerturbation> {
    solve_quadratic_perturbation_with(analysis, model, h, QuadraticSign::Plus)
}

/// Builds `𝒲 = −Ẽ/h ± S^{1/2}Φ` where `Φ` is `d×M` with orthonormal rows,
/// `Φ·1 = 0`, and row space containing the rows of `Ẽ`. Then
/// `(Ẽ + h𝒲)(Ẽ + h𝒲)ᵀ = h²S` and the quadratic equation holds exactly.
/// Needs `M ≥ d + 1`.
pub fn solve_quadratic_perturbation_with(
    analysis: &Ensemble,
    model: &StateSpaceModel,
    h: f64,
    sign: QuadraticSign,
) -> Result<QuadraticPerturbation> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(EsrfError::Config(format!("quadratic perturbation needs h > 0, got {h}")));
    }
    let a = model.require_linear("the quadratic perturbation")?;
    let (d, m) = (analysis.dim(), analysis.size());
    if m < d + 1 {
        return Err(EsrfError::Config(format!(
            "quadratic perturbation needs at least {} members, got {m}",
            d + 1
        )));
    }
    let q = model.q().matrix();
    let prop = Mat::identity(d, d) + a * h;
    let e_tilde = &prop * analysis.deviations() / ((m - 1) as f64).sqrt();
    let s = symmetrize(&(&e_tilde * e_tilde.transpose() / (h * h) + q / h));
    let j_root = sqrt_psd(&PsdMatrix::symmetrized(&s)?)?.into_matrix();
    let phi = orthonormal_completion(&e_tilde)?;
    let jphi = &j_root * phi;
    let scaled = match sign {
        QuadraticSign::Plus => -&e_tilde / h + jphi,
        QuadraticSign::Minus => -&e_tilde / h - jphi,
    };
    let lhs = &e_tilde * scaled.transpose() + &scaled * e_tilde.transpose() + &scaled * scaled.transpose() * h;
    let residual = (lhs - q).norm();
    let q_inv_sqrt = model.q().inv_sqrt()?;
    let perturbation = q_inv_sqrt * &scaled * ((m - 1) as f64).sqrt();
    Ok(QuadraticPerturbation {
        perturbation,
        scaled,
        j_root,
        residual,
    })
}

/// `Φ` (`d×M`) with `ΦΦᵀ = I`, `Φ1 = 0` and `Ẽ = (ẼẼᵀ)^{1/2}Φ`.
fn orthonormal_completion(e: &Mat) -> Result<Mat> {
    let (d, m) = e.shape();
    let gram = PsdMatrix::symmetrized(&(e * e.transpose()))?;
    let cut = RANK_TOL_REL * gram.lambda_max().max(f64::MIN_POSITIVE);
    let eig = gram.matrix().clone().symmetric_eigen();
    let mut range_rows: Vec<usize> = Vec::new();
    let mut null_cols: Vec<usize> = Vec::new();
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cut {
            range_rows.push(i);
        } else {
            null_cols.push(i);
        }
    }
    // Rows U_rᵀẼ/√λ are orthonormal and orthogonal to 1.
    let mut phi = Mat::zeros(d, m);
    let mut basis = Mat::zeros(range_rows.len(), m);
    for (r, &i) in range_rows.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        let row = u.transpose() * e / eig.eigenvalues[i].sqrt();
        basis.set_row(r, &row);
        phi += u * row;
    }
    if !null_cols.is_empty() {
        let ones = Mat::from_element(m, m, 1.0 / m as f64);
        let proj = symmetrize(&(Mat::identity(m, m) - ones - basis.transpose() * &basis));
        let peig = proj.symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| peig.eigenvalues[y].total_cmp(&peig.eigenvalues[x]));
        for (k, &i) in null_cols.iter().enumerate() {
            let idx = order[k];
            if peig.eigenvalues[idx] < 0.5 {
                return Err(EsrfError::Config("not enough members to complete the perturbation basis".into()));
            }
            let b = peig.eigenvectors.column(idx);
            phi += eig.eigenvectors.column(i) * b.transpose();
        }
    }
    Ok(phi)
}

/// Result of checking the three moment conditions on a perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct Assumption1Report {
    /// Cross moment `E(Ŵ−ŵ)ᵀQ^{1/2}/(M−1)` equals `Q/2`.
    pub cross_moment_ok: bool,
    pub cross_moment_residual: f64,
    /// Residual against `ΠQ/2`, `Π` the projector onto the deviation span.
    pub projected_cross_moment_residual: f64,
    /// Frobenius norm of the second moment is at most κ.
    pub second_moment_ok: bool,
    pub second_moment_norm: f64,
    /// Column mean vanishes.
    pub centered_ok: bool,
    pub centering_residual: f64,
}

impl Assumption1Report {
    pub fn all_ok(&self) -> bool {
        self.cross_moment_ok && self.second_moment_ok && self.centered_ok
    }
}

const MOMENT_TOL: f64 = 1e-9;

fn centered(w: &Mat) -> (Mat, f64) {
    let mean = w.column_mean();
    let mut c = w.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (c, mean.norm())
}

/// Cross moment `(1/(M−1)) Σ (X−x̄)(Ŵ−ŵ)ᵀ Q^{1/2}`.
pub fn cross_moment(perturbation: &Mat, analysis: &Ensemble, q_sqrt: &Mat) -> Mat {
    let (wc, _) = centered(perturbation);
    analysis.deviations() * wc.transpose() * q_sqrt / (analysis.size() as f64 - 1.0)
}

/// Second moment `(1/(M−1)) Σ Q^{1/2}(Ŵ−ŵ)(Ŵ−ŵ)ᵀQ^{1/2}`.
pub fn second_moment(perturbation: &Mat, q_sqrt: &Mat) -> Mat {
    let (wc, _) = centered(perturbation);
    let s = q_sqrt * &wc;
    covariance_of(&s)
}

pub fn check_assumption1(perturbation: &Mat, analysis: &Ensemble, q: &PsdMatrix, kappa: f64) -> Result<Assumption1Report> {
    if perturbation.shape() != analysis.members().shape() {
        return Err(EsrfError::Dimension(format!(
            "perturbation is {:?}, ensemble is {:?}",
            perturbation.shape(),
            analysis.members().shape()
        )));
    }
    let q_sqrt = sqrt_psd(q)?.into_matrix();
    let half_q = q.matrix() * 0.5;
    let cm = cross_moment(perturbation, analysis, &q_sqrt);
    let cross_moment_residual = (&cm - &half_q).norm();
    let pcov = PsdMatrix::symmetrized(&analysis.covariance())?;
    let proj = pcov.range_projector(RANK_TOL_REL);
    let projected_cross_moment_residual = (&cm - &proj * &half_q).norm();
    let second_moment_norm = second_moment(perturbation, &q_sqrt).norm();
    let (_, mean_norm) = centered(perturbation);
    let scale = perturbation.norm() / (perturbation.ncols() as f64).sqrt();
    Ok(Assumption1Report {
        cross_moment_ok: cross_moment_residual <= MOMENT_TOL * half_q.norm(),
        cross_moment_residual,
        projected_cross_moment_residual,
        second_moment_ok: second_moment_norm <= kappa,
        second_moment_norm,
        centered_ok: mean_norm <= MOMENT_TOL * scale,
        centering_residual: mean_norm,
    })
}

/// `Ŵ_t = ½ Q^{1/2} P_t⁻¹ (X_t − x̄_t)`.
pub fn perturb_continuous(ensemble: &Ensemble, q: &PsdMatrix, p_t: &PsdMatrix) -> Result<Mat> {
    let p_inv = invertible(p_t.matrix(), "limit covariance")?.inverse()?;
    let q_sqrt = sqrt_psd(q)?.into_matrix();
    Ok(q_sqrt * p_inv * ensemble.deviations() * 0.5)
}

/// One sample for the perturbation approximation bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assumption3Sample {
    /// `Σᵢ‖ΔŴ^{(i)}‖²`.
    pub lhs: f64,
    pub h_sq: f64,
    /// `Σᵢ‖ΔX^{(i)}‖²`.
    pub member_gap: f64,
}

pub fn check_assumption3(
    discrete_pert: &Mat,
    continuous_pert: &Mat,
    discrete_ens: &Ensemble,
    continuous_ens: &Ensemble,
    h: f64,
) -> Result<Assumption3Sample> {
    if discrete_pert.shape() != continuous_pert.shape()
        || discrete_ens.members().shape() != continuous_ens.members().shape()
        || discrete_pert.shape() != discrete_ens.members().shape()
    {
        return Err(EsrfError::Dimension("assumption 3 inputs have mismatched shapes".into()));
    }
    Ok(Assumption3Sample {
        lhs: (discrete_pert - continuous_pert).norm_squared(),
        h_sq: h * h,
        member_gap: (discrete_ens.members() - continuous_ens.members()).norm_squared(),
    })
}

/// Least-squares `R` in `lhs ≈ R·(h² + gap)` through the origin.
pub fn fit_r_t(samples: &[Assumption3Sample]) -> Option<f64> {
    let (num, den) = samples.iter().fold((0.0, 0.0), |(n, d), s| {
        let x = s.h_sq + s.member_gap;
        (n + s.lhs * x, d + x * x)
    });
    (den > 0.0).then(|| num / den)
}

/// `κ = ¼‖Q‖²_F · p` with `p` a bound on `‖(P^a)⁻¹‖_F`.
pub fn reich_kappa(q: &PsdMatrix, inv_cov_bound: f64) -> f64 {
    0.25 * q.matrix().norm_squared() * inv_cov_bound
}

/// Upper bound on `sup_k ‖P_k^f‖` from the one-step recursion
/// `b_k = (1 + 2h‖A‖ + h²‖A‖²) b_{k−1} + 2h(1 + h‖A‖)‖Q‖ + h²κ·max(1, ‖Q‖)`.
pub fn forecast_cov_bound(a_norm: f64, q_norm: f64, kappa: f64, p0_norm: f64, h: f64, steps: usize) -> f64 {
    let growth = 1.0 + 2.0 * h * a_norm + h * h * a_norm * a_norm;
    let forcing = 2.0 * h * (1.0 + h * a_norm) * q_norm + h * h * kappa * q_norm.max(1.0);
    let mut b = p0_norm;
    let mut sup = b;
    for _ in 0..steps {
        b = growth * b + forcing;
        sup = sup.max(b);
    }
    sup
}

/// `Σᵢ‖Q^{1/2}Ŵ^{(i)}‖²` and its bound `√M(M−1)κ`.
pub fn perturbation_energy(perturbation: &Mat, q_sqrt: &Mat, kappa: f64) -> (f64, f64) {
    let m = perturbation.ncols() as f64;
    ((q_sqrt * perturbation).norm_squared(), m.sqrt() * (m - 1.0) * kappa)
}

/// Deviation from the one-step covariance recursion
/// `P_k − [P_{k−1} + h(AP_{k−1} + P_{k−1}Aᵀ + Q − K G P_{k−1})]`.
pub fn forecast_recursion_residual(model: &StateSpaceModel, pf_prev: &Mat, pf: &Mat, h: f64) -> Result<f64> {
    let a = model.require_linear("the covariance recursion")?;
    let k = crate::kalman::kalman_gain(model, pf_prev, h)?;
    let g = model.obs_matrix();
    let step = a * pf_prev + pf_prev * a.transpose() + model.q().matrix() - k * g * pf_prev;
    Ok(crate::linalg::op_norm(&(pf - pf_prev - step * h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::model::{seeded_rng, std_normal};

    fn random_ensemble(d: usize, m: usize, seed: u64) -> Ensemble {
        let mut rng = seeded_rng(seed, 0);
        Ensemble::new(Mat::from_fn(d, m, |_, _| std_normal(&mut rng))).unwrap()
    }

    fn random_spd(d: usize, seed: u64) -> PsdMatrix {
        let mut rng = seeded_rng(seed, 3);
        let b = Mat::from_fn(d, d, |_, _| std_normal(&mut rng));
        PsdMatrix::symmetrized(&(&b * b.transpose() + Mat::identity(d, d) * 0.5)).unwrap()
    }

    fn model(a: Mat, q: Mat) -> StateSpaceModel {
        let d = a.nrows();
        StateSpaceModel::linear(a, Mat::identity(d, d), q, Mat::identity(d, d), 1.0).unwrap()
    }

    #[test]
    fn reich_hand_example() {
        let e = Ensemble::new(Mat::from_row_slice(1, 3, &[-1.0, 0.0, 1.0])).unwrap();
        let w = perturb_reich(&e, &PsdMatrix::identity(1)).unwrap();
        for (got, want) in w.iter().zip([-0.5, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        let cm = cross_moment(&w, &e, &Mat::identity(1, 1));
        assert!((cm[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reich_identity_covariance_halves_deviations() {
        // Deviations ±√1.5 along each axis give P = I with M = 4.
        let s = 1.5f64.sqrt();
        let x = Mat::from_row_slice(2, 4, &[s, -s, 0.0, 0.0, 0.0, 0.0, s, -s]);
        let e = Ensemble::new(x).unwrap();
        assert!((e.covariance() - Mat::identity(2, 2)).norm() < 1e-14);
        let w = perturb_reich(&e, &PsdMatrix::identity(2)).unwrap();
        assert!((w - e.deviations() * 0.5).norm() < 1e-14);
    }

    #[test]
    fn reich_moments_on_random_ensembles() {
        for seed in 0..10 {
            let e = random_ensemble(3, 6, seed);
            let q = random_spd(3, seed);
            let w = perturb_reich(&e, &q).unwrap();
            let q_sqrt = sqrt_psd(&q).unwrap().into_matrix();
            let cm = cross_moment(&w, &e, &q_sqrt);
            let half_q = q.matrix() * 0.5;
            assert!((cm - &half_q).norm() <= 1e-10 * half_q.norm());
            let sm = second_moment(&w, &q_sqrt);
            let p_inv = PsdMatrix::symmetrized(&e.covariance()).unwrap().inverse().unwrap();
            let expected = q.matrix() * p_inv * q.matrix() * 0.25;
            assert!((sm - &expected).norm() <= 1e-10 * expected.norm());
            let report = check_assumption1(&w, &e, &q, expected.norm() * 1.001).unwrap();
            assert!(report.all_ok(), "{report:?}");
        }
    }

    #[test]
    fn reich_rejects_rank_deficient() {
        let e = random_ensemble(3, 3, 1);
        assert!(matches!(
            perturb_reich(&e, &PsdMatrix::identity(3)),
            Err(EsrfError::SingularCovariance(_))
        ));
    }

    #[test]
    fn pinv_variant_cases() {
        let e = random_ensemble(2, 5, 2);
        let q = random_spd(2, 2);
        let a = perturb_reich(&e, &q).unwrap();
        let b = perturb_reich_pinv(&e, &q, RANK_TOL_REL).unwrap();
        assert!((a - b).norm() < 1e-10);

        let x = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 3.0, 3.0]);
        let e = Ensemble::new(x).unwrap();
        let w = perturb_reich_pinv(&e, &PsdMatrix::identity(2), RANK_TOL_REL).unwrap();
        assert!(w.row(1).norm() < 1e-14);
        let report = check_assumption1(&w, &e, &PsdMatrix::identity(2), 10.0).unwrap();
        assert!(report.projected_cross_moment_residual < 1e-12);
        assert!(!report.cross_moment_ok);

        let flat = Ensemble::new(Mat::from_element(2, 4, 0.3)).unwrap();
        let w = perturb_reich_pinv(&flat, &PsdMatrix::identity(2), RANK_TOL_REL).unwrap();
        assert_eq!(w, Mat::zeros(2, 4));
    }

    #[test]
    fn quadratic_residual_random() {
        for seed in 0..5 {
            let e = random_ensemble(2, 4, 10 + seed);
            let q = random_spd(2, seed);
            let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]);
            let m = model(a, q.matrix().clone());
            for sign in [QuadraticSign::Plus, QuadraticSign::Minus] {
                let sol = solve_quadratic_perturbation_with(&e, &m, 0.1, sign).unwrap();
                assert!(sol.residual <= 1e-8 * q.matrix().norm(), "residual {}", sol.residual);
                assert!(sol.perturbation.column_sum().norm() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_scalar_and_degenerate() {
        let e = Ensemble::new(Mat::from_row_slice(1, 3, &[-1.0, 0.0, 1.0])).unwrap();
        let m = model(Mat::zeros(1, 1), Mat::identity(1, 1));
        let sol = solve_quadratic_perturbation(&e, &m, 0.1).unwrap();
        assert!((sol.j_root[(0, 0)] - 110f64.sqrt()).abs() < 1e-12);

        let flat = Ensemble::new(Mat::from_element(2, 3, 1.0)).unwrap();
        let m = model(Mat::zeros(2, 2), Mat::identity(2, 2));
        let sol = solve_quadratic_perturbation(&flat, &m, 1.0).unwrap();
        assert!((&sol.j_root - Mat::identity(2, 2)).norm() < 1e-14);
        assert!((&sol.scaled * sol.scaled.transpose() - Mat::identity(2, 2)).norm() < 1e-12);
        assert!(sol.residual < 1e-12);

        assert!(matches!(solve_quadratic_perturbation(&e, &model(Mat::zeros(1, 1), Mat::identity(1, 1)), 0.0), Err(EsrfError::Config(_))));
    }

    #[test]
    fn quadratic_forecast_recursion_is_exact() {
        let e = random_ensemble(2, 5, 7);
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]);
        let m = model(a.clone(), Mat::identity(2, 2));
        let h = 0.05;
        let w = solve_quadratic_perturbation(&e, &m, h).unwrap().perturbation;
        let forecast = e.members() + (&a * e.members() + m.q_sqrt() * &w) * h;
        let pf = Ensemble::new(forecast).unwrap().covariance();
        let expected = crate::kalman::forecast_covariance(&a, m.q().matrix(), &e.covariance(), h);
        assert!((pf - expected).norm() < 1e-10);
    }

    #[test]
    fn assumption1_failures() {
        let e = random_ensemble(2, 5, 3);
        let q = PsdMatrix::identity(2);
        let zero = Mat::zeros(2, 5);
        let r = check_assumption1(&zero, &e, &q, 1.0).unwrap();
        assert!(!r.cross_moment_ok);
        assert!((r.cross_moment_residual - (q.matrix() * 0.5).norm()).abs() < 1e-15);
        assert!(r.centered_ok);

        let mut w = perturb_reich(&e, &q).unwrap();
        for mut col in w.column_iter_mut() {
            col += Vector::from_element(2, 0.25);
        }
        let r = check_assumption1(&w, &e, &q, 100.0).unwrap();
        assert!(!r.centered_ok);
        assert!(r.cross_moment_ok);
    }

    #[test]
    fn continuous_perturbation_cases() {
        let e = Ensemble::new(Mat::from_row_slice(1, 2, &[3.0, -3.0])).unwrap();
        let q = PsdMatrix::new(Mat::from_element(1, 1, 4.0)).unwrap();
        let p = PsdMatrix::new(Mat::from_element(1, 1, 2.0)).unwrap();
        let w = perturb_continuous(&e, &q, &p).unwrap();
        assert!((w[(0, 0)] - 1.5).abs() < 1e-15);

        let e = random_ensemble(2, 6, 4);
        let w = perturb_continuous(&e, &PsdMatrix::identity(2), &PsdMatrix::identity(2)).unwrap();
        assert!((w - e.deviations() * 0.5).norm() < 1e-15);

        let q = random_spd(2, 9);
        let pt = PsdMatrix::symmetrized(&e.covariance()).unwrap();
        let w = perturb_continuous(&e, &q, &pt).unwrap();
        let cm = cross_moment(&w, &e, &sqrt_psd(&q).unwrap().into_matrix());
        assert!((cm - q.matrix() * 0.5).norm() <= 1e-10 * q.matrix().norm());

        let singular = PsdMatrix::new(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(perturb_continuous(&e, &q, &singular).is_err());
    }

    #[test]
    fn assumption3_cases() {
        let e = random_ensemble(2, 4, 5);
        let w = perturb_reich(&e, &PsdMatrix::identity(2)).unwrap();
        let s = check_assumption3(&w, &w, &e, &e, 0.1).unwrap();
        assert_eq!(s.lhs, 0.0);
        assert_eq!(s.member_gap, 0.0);
        let shifted = w.map(|v| v + 0.5);
        let s = check_assumption3(&w, &shifted, &e, &e, 0.1).unwrap();
        // 2 components per column, c = 0.5 each.
        assert!((s.lhs - 4.0 * 2.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn forecast_bound_iteration() {
        assert_eq!(forecast_cov_bound(0.0, 0.0, 0.0, 2.0, 0.1, 10), 2.0);
        let b = forecast_cov_bound(1.0, 1.0, 1.0, 1.0, 0.1, 10);
        let mut x: f64 = 1.0;
        for _ in 0..10 {
            x = 1.21 * x + 0.2 * 1.1 + 0.01;
        }
        assert!((b - x).abs() < 1e-12);
    }
}
