//! State-space model, ensembles, time grids and the shared observation path.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{EsrfError, Result};
use crate::linalg::{sqrt_psd, Mat, PsdMatrix, Vector};

/// Drift function of a nonlinear model.
pub type DriftFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;

/// Signal drift: `A·x` or a Lipschitz map with a declared bound.
#[derive(Clone)]
pub enum Drift {
    Linear(Mat),
    Lipschitz {
        f: DriftFn,
        lipschitz_bound: f64,
        label: String,
    },
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Linear(a) => f.debug_tuple("Linear").field(a).finish(),
            Drift::Lipschitz {
                lipschitz_bound,
                label,
                ..
            } => f
                .debug_struct("Lipschitz")
                .field("label", label)
                .field("lipschitz_bound", lipschitz_bound)
                .finish(),
        }
    }
}

impl Drift {
    /// `f(x) = A·x + tanh(x)` componentwise; Lipschitz with constant `‖A‖ + 1`.
    pub fn linear_plus_tanh(a: Mat) -> Self {
        let bound = crate::linalg::op_norm(&a) + 1.0;
        let label = "linear_plus_tanh".to_string();
        Drift::Lipschitz {
            f: Arc::new(move |x: &Vector| &a * x + x.map(f64::tanh)),
            lipschitz_bound: bound,
            label,
        }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        match self {
            Drift::Linear(a) => a * x,
            Drift::Lipschitz { f, .. } => f(x),
        }
    }

    /// Applies the drift to every column.
    pub fn eval_columns(&self, x: &Mat) -> Mat {
        match self {
            Drift::Linear(a) => a * x,
            Drift::Lipschitz { f, .. } => {
                let mut out = Mat::zeros(x.nrows(), x.ncols());
                for (j, col) in x.column_iter().enumerate() {
                    out.set_column(j, &f(&col.into_owned()));
                }
                out
            }
        }
    }
}

/// Linear-Gaussian observation of a (possibly nonlinear) diffusion:
/// `dX = drift(X)dt + Q^{1/2}dW`, `dY = G·X dt + C^{1/2}dV` on `[0, T]`.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    dim_state: usize,
    dim_obs: usize,
    drift: Drift,
    obs_matrix: Mat,
    model_noise_cov: PsdMatrix,
    obs_noise_cov: PsdMatrix,
    horizon: f64,
    q_sqrt: Mat,
    c_sqrt: Mat,
    c_inv: Mat,
}

impl StateSpaceModel {
    pub fn new(drift: Drift, obs_matrix: Mat, q: Mat, c: Mat, horizon: f64) -> Result<Self> {
        let d = obs_matrix.ncols();
        let p = obs_matrix.nrows();
        if d == 0 || p == 0 {
            return Err(EsrfError::ModelValidation("state and observation dimensions must be at least 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(EsrfError::ModelValidation(format!("horizon must be positive, got {horizon}")));
        }
        if q.shape() != (d, d) {
            return Err(EsrfError::ModelValidation(format!("Q must be {d}x{d}, got {:?}", q.shape())));
        }
        if c.shape() != (p, p) {
            return Err(EsrfError::ModelValidation(format!("C must be {p}x{p}, got {:?}", c.shape())));
        }
        let qm = positive_definite("Q", q)?;
        let cm = positive_definite("C", c)?;
        match &drift {
            Drift::Linear(a) => {
                if a.shape() != (d, d) {
                    return Err(EsrfError::ModelValidation(format!("A must be {d}x{d}, got {:?}", a.shape())));
                }
            }
            Drift::Lipschitz {
                f, lipschitz_bound, ..
            } => {
                if !(*lipschitz_bound > 0.0) || !lipschitz_bound.is_finite() {
                    return Err(EsrfError::ModelValidation(format!(
                        "lipschitz_bound must be positive and finite, got {lipschitz_bound}"
                    )));
                }
                spot_check_lipschitz(f, *lipschitz_bound, d)?;
            }
        }
        let q_sqrt = sqrt_psd(&qm)?.into_matrix();
        let c_sqrt = sqrt_psd(&cm)?.into_matrix();
        let c_inv = cm.inverse()?;
        Ok(Self {
            dim_state: d,
            dim_obs: p,
            drift,
            obs_matrix,
            model_noise_cov: qm,
            obs_noise_cov: cm,
            horizon,
            q_sqrt,
            c_sqrt,
            c_inv,
        })
    }

    pub fn linear(a: Mat, g: Mat, q: Mat, c: Mat, horizon: f64) -> Result<Self> {
        Self::new(Drift::Linear(a), g, q, c, horizon)
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    /// `A` when the drift is linear.
    pub fn linear_drift(&self) -> Option<&Mat> {
        match &self.drift {
            Drift::Linear(a) => Some(a),
            Drift::Lipschitz { .. } => None,
        }
    }

    pub fn require_linear(&self, what: &str) -> Result<&Mat> {
        self.linear_drift()
            .ok_or_else(|| EsrfError::UnsupportedModel(format!("{what} requires a linear drift")))
    }

    pub fn obs_matrix(&self) -> &Mat {
        &self.obs_matrix
    }

    pub fn q(&self) -> &PsdMatrix {
        &self.model_noise_cov
    }

    pub fn c(&self) -> &PsdMatrix {
        &self.obs_noise_cov
    }

    pub fn q_sqrt(&self) -> &Mat {
        &self.q_sqrt
    }

    pub fn c_sqrt(&self) -> &Mat {
        &self.c_sqrt
    }

    pub fn c_inv(&self) -> &Mat {
        &self.c_inv
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `Gᵀ C⁻¹ G`.
    pub fn obs_precision(&self) -> Mat {
        self.obs_matrix.transpose() * &self.c_inv * &self.obs_matrix
    }

    /// Same model on a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(EsrfError::ModelValidation(format!("horizon must be positive, got {horizon}")));
        }
        let mut m = self.clone();
        m.horizon = horizon;
        Ok(m)
    }
}

fn positive_definite(name: &str, m: Mat) -> Result<PsdMatrix> {
    let psd = PsdMatrix::new(m).map_err(|e| EsrfError::ModelValidation(format!("{name}: {e}")))?;
    if !(psd.lambda_min() > 0.0) {
        return Err(EsrfError::ModelValidation(format!(
            "{name} must be positive definite, smallest eigenvalue {:e}",
            psd.lambda_min()
        )));
    }
    Ok(psd)
}

fn spot_check_lipschitz(f: &DriftFn, bound: f64, d: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11f5_c4ec);
    for _ in 0..64 {
        let x = Vector::from_fn(d, |_, _| 2.0 * std_normal(&mut rng));
        let y = &x + Vector::from_fn(d, |_, _| 0.5 * std_normal(&mut rng));
        let fx = f(&x);
        if fx.len() != d {
            return Err(EsrfError::ModelValidation(format!(
                "drift maps R^{d} to R^{}",
                fx.len()
            )));
        }
        let lhs = (fx - f(&y)).norm();
        let rhs = bound * (&x - &y).norm();
        if lhs > rhs * (1.0 + 1e-12) {
            return Err(EsrfError::ModelValidation(format!(
                "Lipschitz spot-check failed: |f(x)-f(y)| = {lhs:e} > {bound}·|x-y| = {rhs:e}"
            )));
        }
    }
    Ok(())
}

/// `M` state vectors stored as the columns of a `d×M` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Mat,
}

/// Mean, deviations, covariance and spread of an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub mean: Vector,
    pub deviations: Mat,
    pub covariance: Mat,
    pub spread: f64,
}

impl Ensemble {
    pub fn new(members: Mat) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(EsrfError::DegenerateEnsemble(members.ncols()));
        }
        Ok(Self { members })
    }

    /// Rebuilds members as `mean·1ᵀ + deviations`.
    pub fn from_mean_and_deviations(mean: &Vector, deviations: &Mat) -> Result<Self> {
        let mut members = deviations.clone();
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Self::new(members)
    }

    pub fn members(&self) -> &Mat {
        &self.members
    }

    pub fn into_members(self) -> Mat {
        self.members
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> Vector {
        self.members.column_mean()
    }

    pub fn deviations(&self) -> Mat {
        let mean = self.mean();
        let mut dev = self.members.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        dev
    }

    pub fn covariance(&self) -> Mat {
        let dev = self.deviations();
        covariance_of(&dev)
    }

    /// Trace of the covariance.
    pub fn spread(&self) -> f64 {
        let dev = self.deviations();
        dev.norm_squared() / (self.size() as f64 - 1.0)
    }

    pub fn stats(&self) -> EnsembleStats {
        let mean = self.mean();
        let mut deviations = self.members.clone();
        for mut col in deviations.column_iter_mut() {
            col -= &mean;
        }
        let covariance = covariance_of(&deviations);
        let spread = covariance.trace();
        EnsembleStats {
            mean,
            deviations,
            covariance,
            spread,
        }
    }
}

/// `E·Eᵀ/(M−1)`, symmetrized.
pub fn covariance_of(deviations: &Mat) -> Mat {
    let m = deviations.ncols() as f64;
    let cov = deviations * deviations.transpose() / (m - 1.0);
    crate::linalg::symmetrize(&cov)
}

/// Free-function form of [`Ensemble::stats`].
pub fn ensemble_stats(e: &Ensemble) -> EnsembleStats {
    e.stats()
}

/// Gaussian law `N(m₀, P₀)` for the reference start and the initial ensemble.
/// `P₀` may be singular (a point mass when zero).
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: Vector,
    pub cov: Mat,
}

impl GaussianPrior {
    pub fn standard(d: usize) -> Self {
        Self {
            mean: Vector::zeros(d),
            cov: Mat::identity(d, d),
        }
    }

    pub fn point(x0: Vector) -> Self {
        let d = x0.len();
        Self {
            mean: x0,
            cov: Mat::zeros(d, d),
        }
    }

    fn root(&self) -> Result<Mat> {
        Ok(sqrt_psd(&PsdMatrix::symmetrized(&self.cov)?)?.into_matrix())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vector> {
        let root = self.root()?;
        let z = Vector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        Ok(&self.mean + root * z)
    }

    pub fn sample_ensemble<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Ensemble> {
        let d = self.mean.len();
        let root = self.root()?;
        let z = Mat::from_fn(d, size, |_, _| StandardNormal.sample(rng));
        let mut members = root * z;
        for mut col in members.column_iter_mut() {
            col += &self.mean;
        }
        Ensemble::new(members)
    }
}

/// One standard normal draw.
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic generator for `(seed, stream)`. Stream 0 drives the
/// reference path, stream 1 the initial ensemble, higher streams filter noise.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform partition `t_k = k·h`, `k = 0..=steps`, with `refinement` fine
/// sub-steps of size `h/refinement` per coarse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub h: f64,
    pub steps: usize,
    pub refinement: usize,
}

const GRID_TOL: f64 = 1e-9;

impl TimeGrid {
    pub fn new(horizon: f64, h: f64, refinement: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(EsrfError::Config(format!("step must be positive, got {h}")));
        }
        if refinement == 0 {
            return Err(EsrfError::Config("refinement must be at least 1".into()));
        }
        let steps = (horizon / h).round();
        if (steps * h - horizon).abs() > GRID_TOL * horizon.max(h) {
            return Err(EsrfError::Config(format!(
                "step {h} does not divide the horizon {horizon}"
            )));
        }
        Ok(Self {
            h,
            steps: steps as usize,
            refinement,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.h * self.steps as f64
    }

    pub fn fine_step(&self) -> f64 {
        self.h / self.refinement as f64
    }

    pub fn fine_steps(&self) -> usize {
        self.steps * self.refinement
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// `ν(t) = k` for `t ∈ [t_k, t_{k+1})`, clamped to the last index.
    pub fn nu(&self, t: f64) -> usize {
        let k = (t / self.h + GRID_TOL).floor().max(0.0) as usize;
        k.min(self.steps)
    }

    /// `η(t) = t_{ν(t)}`.
    pub fn eta(&self, t: f64) -> f64 {
        self.time(self.nu(t))
    }

    pub fn nu_plus(&self, t: f64) -> usize {
        self.nu(t) + 1
    }

    pub fn eta_plus(&self, t: f64) -> f64 {
        self.time(self.nu_plus(t))
    }

    /// Integer ratio `h / fine`, or a configuration error.
    pub fn ratio_to(&self, fine: f64) -> Result<usize> {
        integer_ratio(self.h, fine)
    }

    /// Integer ratio `coarse / h`, or a configuration error.
    pub fn ratio_to_coarse(&self, coarse: f64) -> Result<usize> {
        integer_ratio(coarse, self.h)
    }
}

pub(crate) fn integer_ratio(coarse: f64, fine: f64) -> Result<usize> {
    let r = (coarse / fine).round();
    if r < 1.0 || (r * fine - coarse).abs() > GRID_TOL * coarse {
        return Err(EsrfError::Config(format!(
            "step {coarse} is not an integer multiple of the fine step {fine}"
        )));
    }
    Ok(r as usize)
}

/// Empirical second moments of the reference trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefMoment {
    /// Time average of `‖X_t‖²` over the fine grid.
    pub mean_sq: f64,
    /// Largest `‖X_t‖²` on the fine grid.
    pub max_sq: f64,
}

/// Fine-grid reference trajectory and observation increments shared by every
/// filter run of one seed.
#[derive(Clone, Debug)]
pub struct ObservationPath {
    pub fine_grid: TimeGrid,
    /// `X^ref` at the `fine_steps + 1` fine grid points.
    pub ref_trajectory: Vec<Vector>,
    /// `ΔY` over each fine interval.
    pub obs_increments: Vec<Vector>,
    /// `C^{1/2}ΔV` over each fine interval.
    pub obs_noise_increments: Vec<Vector>,
    pub rng_seed: u64,
    pub ref_moment: RefMoment,
}

impl ObservationPath {
    pub fn fine_step(&self) -> f64 {
        self.fine_grid.h
    }

    pub fn len(&self) -> usize {
        self.obs_increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_increments.is_empty()
    }

    /// `Y_T` as the compensated sum of all fine increments.
    pub fn total(&self) -> Vector {
        compensated_sum(self.obs_increments.iter(), self.obs_increments.first().map_or(0, |v| v.len()))
    }
}

/// Euler-Maruyama reference path on the fine grid of `grid` (step `h/r`).
///
/// Each fine increment is `h_f·G·X_t + C^{1/2}·√h_f·ζ` with the state at the
/// left endpoint, and the state advances by
/// `X + h_f·drift(X) + Q^{1/2}·√h_f·ξ`.
pub fn simulate_reference(
    model: &StateSpaceModel,
    grid: &TimeGrid,
    prior: &GaussianPrior,
    seed: u64,
) -> Result<ObservationPath> {
    if prior.mean.len() != model.dim_state() {
        return Err(EsrfError::Dimension(format!(
            "prior has dimension {}, model {}",
            prior.mean.len(),
            model.dim_state()
        )));
    }
    let (d, p) = (model.dim_state(), model.dim_obs());
    let hf = grid.fine_step();
    let n = grid.fine_steps();
    let sq = hf.sqrt();
    let fine_grid = TimeGrid {
        h: hf,
        steps: n,
        refinement: 1,
    };
    let mut rng = seeded_rng(seed, 0);
    let mut x = prior.sample(&mut rng)?;
    let mut traj = Vec::with_capacity(n + 1);
    let mut incs = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut sum_sq = x.norm_squared();
    let mut max_sq = x.norm_squared();
    traj.push(x.clone());
    for _ in 0..n {
        let zeta = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let xi = Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let noise = model.c_sqrt() * zeta * sq;
        let dy = model.obs_matrix() * &x * hf + &noise;
        x = &x + model.drift().eval(&x) * hf + model.q_sqrt() * xi * sq;
        let nsq = x.norm_squared();
        sum_sq += nsq;
        max_sq = max_sq.max(nsq);
        incs.push(dy);
        noises.push(noise);
        traj.push(x.clone());
    }
    Ok(ObservationPath {
        fine_grid,
        ref_trajectory: traj,
        obs_increments: incs,
        obs_noise_increments: noises,
        rng_seed: seed,
        ref_moment: RefMoment {
            mean_sq: sum_sq / (n + 1) as f64,
            max_sq,
        },
    })
}

/// Coarse increments `ΔY_k`, each the sum of `r = h/h_fine` consecutive fine
/// increments.
pub fn aggregate_increments(path: &ObservationPath, h: f64) -> Result<Vec<Vector>> {
    let r = integer_ratio(h, path.fine_step())?;
    if !path.len().is_multiple_of(r) {
        return Err(EsrfError::Config(format!(
            "{} fine increments do not split into blocks of {r}",
            path.len()
        )));
    }
    let p = path.obs_increments.first().map_or(0, |v| v.len());
    Ok(path
        .obs_increments
        .chunks(r)
        .map(|block| compensated_sum(block.iter(), p))
        .collect())
}

/// Neumaier-compensated componentwise sum.
pub fn compensated_sum<'a>(items: impl Iterator<Item = &'a Vector>, dim: usize) -> Vector {
    let mut sum = Vector::zeros(dim);
    let mut comp = Vector::zeros(dim);
    for v in items {
        for i in 0..dim {
            let t = sum[i] + v[i];
            if sum[i].abs() >= v[i].abs() {
                comp[i] += (sum[i] - t) + v[i];
            } else {
                comp[i] += (v[i] - t) + sum[i];
            }
            sum[i] = t;
        }
    }
    sum + comp
}
