//! Dense matrix primitives used by the filters: symmetric PSD roots,
//! pseudo-inverses, the half-gain inverse of the Whitaker-Hamill update and a
//! quadrature evaluation of `P^{-1/2}` that serves as an independent check on
//! the eigendecomposition route.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EsrfError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry defect accepted by [`PsdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Default eigenvalue floor, relative to the largest eigenvalue magnitude.
pub const EIGEN_FLOOR_REL: f64 = 1e-12;
/// Default rank cutoff for pseudo-inverses, relative to the largest eigenvalue.
pub const RANK_TOL_REL: f64 = 1e-10;

/// A symmetric positive semidefinite matrix together with its clamped
/// eigendecomposition.
///
/// Eigenvalues in `[-eigen_floor, eigen_floor)` are clamped to zero; anything
/// below `-eigen_floor` is rejected at construction.
#[derive(Clone, Debug)]
pub struct PsdMatrix {
    data: Mat,
    eigen_floor: f64,
    values: Vector,
    vectors: Mat,
}

impl PsdMatrix {
    /// Validates symmetry (relative defect at most [`SYMMETRY_TOL`]) and
    /// positive semidefiniteness with the default floor.
    pub fn new(data: Mat) -> Result<Self> {
        check_square(&data)?;
        let defect = symmetry_defect(&data);
        if defect > SYMMETRY_TOL {
            return Err(EsrfError::NotSymmetric(defect));
        }
        Self::build(symmetrize(&data), None)
    }

    /// Symmetrizes `(P + Pᵀ)/2` first. For matrices assembled by arithmetic
    /// that is symmetric only up to rounding.
    pub fn symmetrized(data: &Mat) -> Result<Self> {
        check_square(data)?;
        Self::build(symmetrize(data), None)
    }

    pub fn with_floor(data: Mat, eigen_floor: f64) -> Result<Self> {
        check_square(&data)?;
        let defect = symmetry_defect(&data);
        if defect > SYMMETRY_TOL {
            return Err(EsrfError::NotSymmetric(defect));
        }
        Self::build(symmetrize(&data), Some(eigen_floor.max(0.0)))
    }

    pub fn identity(n: usize) -> Self {
        Self {
            data: Mat::identity(n, n),
            eigen_floor: EIGEN_FLOOR_REL,
            values: Vector::from_element(n, 1.0),
            vectors: Mat::identity(n, n),
        }
    }

    fn build(data: Mat, floor: Option<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(data.clone());
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let eigen_floor = floor.unwrap_or(EIGEN_FLOOR_REL * scale);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -eigen_floor {
            return Err(EsrfError::NotPsd {
                min_eigenvalue: min,
                floor: eigen_floor,
            });
        }
        let values = eig
            .eigenvalues
            .map(|v| if v < eigen_floor { 0.0 } else { v });
        Ok(Self {
            data,
            eigen_floor,
            values,
            vectors: eig.eigenvectors,
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.data
    }

    pub fn into_matrix(self) -> Mat {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn eigen_floor(&self) -> f64 {
        self.eigen_floor
    }

    /// Clamped eigenvalues, in the order returned by the decomposition.
    pub fn eigenvalues(&self) -> &Vector {
        &self.values
    }

    pub fn lambda_max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn lambda_min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `V·diag(g(λ))·Vᵀ` over the clamped spectrum.
    pub fn spectral_map(&self, g: impl Fn(f64) -> f64) -> Mat {
        let mapped = self.values.map(g);
        let scaled = &self.vectors * Mat::from_diagonal(&mapped);
        symmetrize(&(scaled * self.vectors.transpose()))
    }

    /// Inverse via the clamped spectrum; fails when any eigenvalue was clamped to zero.
    pub fn inverse(&self) -> Result<Mat> {
        if self.values.iter().any(|&v| v <= 0.0) {
            return Err(EsrfError::NotInvertible(format!(
                "smallest clamped eigenvalue {:e}",
                self.lambda_min()
            )));
        }
        Ok(self.spectral_map(|v| 1.0 / v))
    }

    /// Eigendecomposition route to `P^{-1/2}`.
    pub fn inv_sqrt(&self) -> Result<Mat> {
        if self.values.iter().any(|&v| v <= 0.0) {
            return Err(EsrfError::NotInvertible(format!(
                "smallest clamped eigenvalue {:e}",
                self.lambda_min()
            )));
        }
        Ok(self.spectral_map(|v| 1.0 / v.sqrt()))
    }

    /// Orthogonal projector onto the range, eigenvalues above `rank_tol·λ_max`.
    pub fn range_projector(&self, rank_tol: f64) -> Mat {
        let cut = rank_tol * self.lambda_max();
        self.spectral_map(|v| if v > cut { 1.0 } else { 0.0 })
    }
}

/// Symmetric PSD square root `S` with `S·S = P`.
pub fn sqrt_psd(p: &PsdMatrix) -> Result<PsdMatrix> {
    let root = p.spectral_map(f64::sqrt);
    let values = p.values.map(f64::sqrt);
    Ok(PsdMatrix {
        data: root,
        eigen_floor: p.eigen_floor.sqrt(),
        values,
        vectors: p.vectors.clone(),
    })
}

/// Moore-Penrose pseudo-inverse. Eigenvalues at or below `rank_tol·λ_max`
/// are treated as zero.
pub fn pinv_psd(p: &PsdMatrix, rank_tol: f64) -> Result<PsdMatrix> {
    if !(rank_tol > 0.0) {
        return Err(EsrfError::Config(format!("rank_tol must be positive, got {rank_tol}")));
    }
    let cut = rank_tol * p.lambda_max();
    let inv = |v: f64| if v > cut && v > 0.0 { 1.0 / v } else { 0.0 };
    Ok(PsdMatrix {
        data: p.spectral_map(inv),
        eigen_floor: 0.0,
        values: p.values.map(inv),
        vectors: p.vectors.clone(),
    })
}

/// Pseudo-inverse of the symmetric root, `(√P)^†`.
pub fn sqrt_pinv_psd(p: &PsdMatrix, rank_tol: f64) -> Mat {
    let cut = rank_tol * p.lambda_max();
    p.spectral_map(|v| if v > cut && v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
}

/// `(C+B)^{-1/2}·((C+B)^{1/2} + C^{1/2})^{-1}`, the matrix factor in the
/// Whitaker-Hamill deviation gain. Equals `C^{-1}/2` when `B = 0`.
pub fn half_gain_inverse(c: &PsdMatrix, b: &PsdMatrix) -> Result<Mat> {
    if c.dim() != b.dim() {
        return Err(EsrfError::Dimension(format!(
            "half_gain_inverse: C is {0}x{0}, B is {1}x{1}",
            c.dim(),
            b.dim()
        )));
    }
    if c.values.iter().any(|&v| v <= 0.0) {
        return Err(EsrfError::NotInvertible("C must be strictly positive definite".into()));
    }
    let sum = PsdMatrix::symmetrized(&(c.matrix() + b.matrix()))?;
    let sum_inv_root = sum.inv_sqrt()?;
    let denom = sqrt_psd(&sum)?.into_matrix() + sqrt_psd(c)?.into_matrix();
    let denom_inv = denom
        .lu()
        .try_inverse()
        .ok_or_else(|| EsrfError::NotInvertible("(C+B)^{1/2} + C^{1/2}".into()))?;
    Ok(sum_inv_root * denom_inv)
}

/// Generalized Gauss-Laguerre rule for the weight `t^{-1/2}·e^{-t}` on `(0, ∞)`.
///
/// Nodes come from the Jacobi matrix (Golub-Welsch); weights from the
/// Christoffel formula evaluated with a rescaled orthonormal recurrence, kept
/// in log form because they underflow for the outer nodes.
#[derive(Clone, Debug)]
pub struct GaussLaguerreRule {
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl GaussLaguerreRule {
    const ALPHA: f64 = -0.5;

    pub fn new(n: usize) -> Self {
        let alpha = Self::ALPHA;
        let mut jacobi = Mat::zeros(n, n);
        for k in 0..n {
            jacobi[(k, k)] = 2.0 * k as f64 + alpha + 1.0;
            if k + 1 < n {
                let b = ((k as f64 + 1.0) * (k as f64 + 1.0 + alpha)).sqrt();
                jacobi[(k, k + 1)] = b;
                jacobi[(k + 1, k)] = b;
            }
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().cloned().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite nodes"));

        // mu0 = Γ(1/2) = √π
        let log_mu0 = 0.5 * std::f64::consts::PI.ln();
        let log_weights = nodes
            .iter()
            .map(|&x| {
                let mut p_prev = 0.0;
                let mut p = (-0.5 * log_mu0).exp();
                let mut sum = p * p;
                let mut log_scale = 0.0;
                for k in 0..n.saturating_sub(1) {
                    let a_k = 2.0 * k as f64 + alpha + 1.0;
                    let b_k = (k as f64 * (k as f64 + alpha)).max(0.0).sqrt();
                    let b_next = ((k as f64 + 1.0) * (k as f64 + 1.0 + alpha)).sqrt();
                    let p_next = ((x - a_k) * p - b_k * p_prev) / b_next;
                    p_prev = p;
                    p = p_next;
                    sum += p * p;
                    if p.abs() > 1e100 {
                        p /= 1e100;
                        p_prev /= 1e100;
                        sum /= 1e200;
                        log_scale += 100.0 * std::f64::consts::LN_10;
                    }
                }
                -(sum.ln() + 2.0 * log_scale)
            })
            .collect();
        Self { nodes, log_weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached rule for `n` nodes.
    pub fn cached(n: usize) -> Arc<Self> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussLaguerreRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("rule cache poisoned");
        guard.entry(n).or_insert_with(|| Arc::new(Self::new(n))).clone()
    }
}

/// `P^{-1/2} = (1/√π)∫₀^∞ t^{-1/2} e^{-tP} dt` by generalized Gauss-Laguerre
/// quadrature. The substitution `t = s/c` with `c` between cheap lower and
/// upper spectral bounds centers the spectrum of `P/c` around one; the
/// exponentials are matrix exponentials, so no eigendecomposition is involved.
pub fn sqrt_inv_integral(p: &PsdMatrix, quad_nodes: usize) -> Result<PsdMatrix> {
    if quad_nodes < 16 {
        return Err(EsrfError::Config(format!("quad_nodes must be at least 16, got {quad_nodes}")));
    }
    let m = p.matrix();
    let n = m.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| EsrfError::NotInvertible("P is not strictly positive definite".into()))?;
    let inv = chol.inverse();
    let upper = m.norm();
    let lower = 1.0 / inv.norm();
    if !(lower > 0.0) || !upper.is_finite() {
        return Err(EsrfError::NotInvertible("P has no usable spectral bounds".into()));
    }
    let c = (upper * lower).sqrt();
    let scaled = m / c;
    let rule = GaussLaguerreRule::cached(quad_nodes);

    let mut acc = Mat::zeros(n, n);
    for (&s, &lw) in rule.nodes.iter().zip(&rule.log_weights) {
        // w·e^{s}·e^{-sP/c}; the scalar part stays moderate, the matrix part decays.
        let factor = (lw + s).exp();
        if factor == 0.0 {
            continue;
        }
        let e = (&scaled * (-s)).exp();
        acc += e * factor;
    }
    let result = acc / (std::f64::consts::PI.sqrt() * c.sqrt());
    PsdMatrix::symmetrized(&result)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// `‖P − Pᵀ‖_F / max(‖P‖_F, tiny)`.
pub fn symmetry_defect(m: &Mat) -> f64 {
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / scale
}

/// Spectral (operator 2-) norm.
pub fn op_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized first).
pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix (symmetrized first).
pub fn max_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `X·S = B` for symmetric positive definite `S` without forming `S^{-1}`.
pub fn solve_right_spd(b: &Mat, s: &Mat) -> Result<Mat> {
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| EsrfError::NotInvertible("system matrix is not positive definite".into()))?;
    // X S = B  <=>  S Xᵀ = Bᵀ
    Ok(chol.solve(&b.transpose()).transpose())
}

fn check_square(m: &Mat) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(EsrfError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}
