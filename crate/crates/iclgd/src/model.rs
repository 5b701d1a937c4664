//! Regression scenario and estimators.
//!
//! The data model: covariates `x ~ N(0, I_n)`, responses `y = W1 x + sigma z`
//! with `z ~ N(0, I_m)`, and a base weight matrix `W0`. Given `N` in-context
//! pairs stacked as `X` (n x N) and `Y` (m x N), three estimators produce new
//! weights `W`:
//!
//! - one step of gradient descent on the mean-squared training loss,
//!   `W = W0 - (eta/N) (W0 X - Y) X^T`;
//! - the minimum-`||W - W0||_F` interpolant (least norm, `N < n`);
//! - ordinary least squares (`N > n`).
//!
//! The pointwise generalization loss at a test pair `(xhat, zhat)` is
//! `||W1 xhat + sigma zhat - W xhat||^2`.
//!
//! Everything here is a pure function of its inputs; randomness enters only
//! through explicit `(seed, stream)` pairs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::rng::{self, stream_rng};

/// Errors from scenario construction and estimator evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("estimator regime violated: {0}")]
    Regime(String),
    #[error("gram matrix numerically singular (pivot {pivot:.3e} <= threshold {threshold:.3e})")]
    SingularGram { pivot: f64, threshold: f64 },
}

/// One regression scenario: dimensions, step size and moment parameters.
///
/// `signal2` is `||W1 - W0||_F^2` and `sigma2` is the noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConfig {
    /// Input dimension `n`.
    pub dim: usize,
    /// Output dimension `m`.
    pub out_dim: usize,
    /// Number of in-context pairs `N`.
    pub pairs: usize,
    /// Gradient-descent step size `eta`.
    pub eta: f64,
    /// Noise variance `sigma^2`.
    pub sigma2: f64,
    /// Squared signal norm `||W1 - W0||_F^2`.
    pub signal2: f64,
}

impl ProblemConfig {
    /// Validated constructor. Requires `dim, out_dim, pairs >= 1` and
    /// nonnegative `eta`, `sigma2`, `signal2`.
    pub fn new(
        dim: usize,
        out_dim: usize,
        pairs: usize,
        eta: f64,
        sigma2: f64,
        signal2: f64,
    ) -> Result<Self, ModelError> {
        if dim == 0 || out_dim == 0 || pairs == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dimensions must be >= 1 (n={dim}, m={out_dim}, N={pairs})"
            )));
        }
        for (name, v) in [("eta", eta), ("sigma2", sigma2), ("signal2", signal2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(Self { dim, out_dim, pairs, eta, sigma2, signal2 })
    }

    /// Signal-to-noise ratio `signal2 / sigma2`; defined only for positive
    /// noise.
    pub fn snr(&self) -> Option<f64> {
        (self.sigma2 > 0.0).then(|| self.signal2 / self.sigma2)
    }

    /// Noise standard deviation.
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// A concrete task: base weights, true weights and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    /// Base weight matrix `W0`, m x n.
    pub w0: DMatrix<f64>,
    /// True weight matrix `W1`, m x n.
    pub w1: DMatrix<f64>,
    /// Noise standard deviation.
    pub sigma: f64,
}

impl TaskInstance {
    fn out_dim(&self) -> usize {
        self.w0.nrows()
    }

    fn dim(&self) -> usize {
        self.w0.ncols()
    }
}

/// One random design: stacked covariates, stacked noise, and a test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSample {
    /// Covariates `X`, n x N.
    pub x: DMatrix<f64>,
    /// Response noise `Z`, m x N.
    pub z: DMatrix<f64>,
    /// Test input, length n.
    pub xhat: DVector<f64>,
    /// Test noise, length m.
    pub zhat: DVector<f64>,
}

/// Draw a task with i.i.d. standard-normal `W1` entries and `W0 = 0`.
///
/// With `unit_norm` the matrix is rescaled to unit Frobenius norm, matching
/// the normalization used throughout the experiments. `sigma` starts at zero;
/// callers set it when they add noise. Deterministic in `seed` (the draw uses
/// the reserved [`rng::TASK_STREAM`], so it never collides with design
/// streams under the same seed).
pub fn make_task(dim: usize, out_dim: usize, unit_norm: bool, seed: u64) -> TaskInstance {
    assert!(dim >= 1 && out_dim >= 1, "dimensions must be >= 1");
    let mut r = stream_rng(seed, rng::TASK_STREAM);
    let mut w1 = rng::normal_matrix(&mut r, out_dim, dim);
    if unit_norm {
        let norm = w1.norm();
        // A zero draw has probability zero; guard anyway.
        if norm > 0.0 {
            w1 /= norm;
        }
    }
    TaskInstance { w0: DMatrix::zeros(out_dim, dim), w1, sigma: 0.0 }
}

pub(crate) fn draw_design(cfg: &ProblemConfig, r: &mut rand_chacha::ChaCha8Rng) -> DesignSample {
    let x = rng::normal_matrix(r, cfg.dim, cfg.pairs);
    let z = rng::normal_matrix(r, cfg.out_dim, cfg.pairs);
    let xhat = rng::normal_vector(r, cfg.dim);
    let zhat = rng::normal_vector(r, cfg.out_dim);
    DesignSample { x, z, xhat, zhat }
}

/// Draw a full design (covariates, noise, one test pair) for `cfg`.
///
/// Deterministic in `(seed, stream)`; distinct streams are independent.
pub fn sample_design(cfg: &ProblemConfig, seed: u64, stream: u64) -> DesignSample {
    let mut r = stream_rng(seed, stream);
    draw_design(cfg, &mut r)
}

fn check_data_shapes(
    task: &TaskInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<(), ModelError> {
    if x.nrows() != task.dim() || y.nrows() != task.out_dim() || x.ncols() != y.ncols() {
        return Err(ModelError::DimensionMismatch(format!(
            "W is {}x{}, X is {}x{}, Y is {}x{}",
            task.out_dim(),
            task.dim(),
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if x.ncols() == 0 {
        return Err(ModelError::DimensionMismatch("need at least one pair".into()));
    }
    Ok(())
}

/// One step of gradient descent on the mean-squared training loss:
/// `W = W0 - (eta/N) (W0 X - Y) X^T`.
pub fn gd_one_step(
    task: &TaskInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    eta: f64,
) -> Result<DMatrix<f64>, ModelError> {
    check_data_shapes(task, x, y)?;
    let pairs = x.ncols() as f64;
    let resid = &task.w0 * x - y;
    Ok(&task.w0 - (eta / pairs) * resid * x.transpose())
}

/// Solve `gram * S = rhs` through a rank-revealing (column-pivoted QR)
/// factorization. `scale_dim` is `max(n, N)` and sets the singularity
/// threshold `scale_dim * eps * max |diag R|`.
fn solve_gram(
    gram: DMatrix<f64>,
    rhs: &DMatrix<f64>,
    scale_dim: usize,
) -> Result<DMatrix<f64>, ModelError> {
    let qr = gram.col_piv_qr();
    let r = qr.r();
    let mut max_d = 0.0f64;
    let mut min_d = f64::INFINITY;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)].abs();
        max_d = max_d.max(d);
        min_d = min_d.min(d);
    }
    let threshold = scale_dim as f64 * f64::EPSILON * max_d;
    // A NaN pivot (garbage input) must land on the error path too.
    let full_rank = min_d > threshold;
    if !full_rank {
        return Err(ModelError::SingularGram { pivot: min_d, threshold });
    }
    qr.solve(rhs)
        .ok_or(ModelError::SingularGram { pivot: min_d, threshold })
}

/// Minimum-`||W - W0||_F` interpolant of the data (`W X = Y`), for the
/// under-parametrized regime `N < n`:
/// `W = W0 + (Y - W0 X) (X^T X)^{-1} X^T`.
pub fn least_norm_fit(
    task: &TaskInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    check_data_shapes(task, x, y)?;
    let (n, pairs) = (x.nrows(), x.ncols());
    if pairs >= n {
        return Err(ModelError::Regime(format!(
            "least-norm interpolation needs N < n, got N={pairs}, n={n}"
        )));
    }
    let gram = x.transpose() * x; // N x N
    let resid = y - &task.w0 * x; // m x N
    let t = solve_gram(gram, &resid.transpose(), n.max(pairs))?; // N x m
    Ok(&task.w0 + (x * t).transpose())
}

/// Ordinary least squares for the over-parametrized regime `N > n`:
/// `W = Y X^T (X X^T)^{-1}`.
pub fn least_squares_fit(
    task: &TaskInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    check_data_shapes(task, x, y)?;
    let (n, pairs) = (x.nrows(), x.ncols());
    if pairs <= n {
        return Err(ModelError::Regime(format!(
            "least squares needs N > n, got N={pairs}, n={n}"
        )));
    }
    let gram = x * x.transpose(); // n x n
    let s = y * x.transpose(); // m x n
    let wt = solve_gram(gram, &s.transpose(), n.max(pairs))?; // n x m
    Ok(wt.transpose())
}

/// Squared prediction error at one test pair:
/// `||W1 xhat + sigma zhat - W xhat||^2`.
pub fn point_loss(
    w: &DMatrix<f64>,
    task: &TaskInstance,
    xhat: &DVector<f64>,
    zhat: &DVector<f64>,
) -> Result<f64, ModelError> {
    if w.shape() != task.w1.shape()
        || xhat.len() != task.dim()
        || zhat.len() != task.out_dim()
    {
        return Err(ModelError::DimensionMismatch(format!(
            "W is {}x{}, W1 is {}x{}, xhat has {}, zhat has {}",
            w.nrows(),
            w.ncols(),
            task.w1.nrows(),
            task.w1.ncols(),
            xhat.len(),
            zhat.len()
        )));
    }
    let resid = (&task.w1 - w) * xhat + task.sigma * zhat;
    Ok(resid.norm_squared())
}
