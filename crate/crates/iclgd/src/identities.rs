//! Machine-checkable catalog of Gaussian matrix-moment identities.
//!
//! Thirty numbered identities about standard-normal vectors `x ~ N(0, I_n)`,
//! the Wishart matrix `Q = sum_{i=1}^N x_i x_i^T`, an arbitrary (sometimes
//! symmetric) matrix `B`, a fixed vector `b`, and uniformly random
//! orthonormal sphere vectors `q_i, q_j`. Two entries restate earlier ones
//! (17 aliases 14, 18 aliases 13); both numbers stay in the catalog so the
//! numbering is stable.
//!
//! Each identity pairs an analytic evaluator ([`analytic_value`]) with a
//! brute-force sampling oracle ([`mc_estimate`]); [`verify`] z-tests the two
//! entrywise. Matrix- and vector-valued identities compare per entry with
//! per-entry standard errors, since diagonal and off-diagonal entries have
//! different variances.
//!
//! Identities 8-10 concern inverse-Wishart traces and are expectations
//! (`E[Tr[(XX^T)^{-1}]]` and friends), defined when `X X^T` is almost surely
//! invertible with finite moments: `N > n+1` for the first trace, `N > n+3`
//! for the second-order ones.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::mc::MomentAccumulator;
use crate::rng::{fill_standard_normal, stream_rng};

/// Inputs an identity consumes beyond the dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityInput {
    /// An n x n symmetric matrix `B`.
    MatrixSymmetric,
    /// An n x n matrix `B`, no symmetry required.
    MatrixGeneral,
    /// An n-vector `b`.
    Vector,
    /// Uniform orthonormal sphere vector(s) drawn by the oracle.
    SpherePair,
}

/// Shape of an identity's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Scalar,
    /// Length-n vector.
    Vector,
    /// n x n matrix.
    Matrix,
}

/// Parameter constraint attached to an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// `N > n + 1` (first inverse-Wishart moment exists).
    PairsAboveDimPlus1,
    /// `N > n + 3` (second inverse-Wishart moments exist).
    PairsAboveDimPlus3,
    /// `n >= 2` (an orthonormal pair needs two directions).
    DimAtLeast2,
}

impl Constraint {
    /// Does `(n, N)` satisfy the constraint?
    pub fn holds(&self, dim: usize, pairs: usize) -> bool {
        match self {
            Constraint::None => true,
            Constraint::PairsAboveDimPlus1 => pairs > dim + 1,
            Constraint::PairsAboveDimPlus3 => pairs > dim + 3,
            Constraint::DimAtLeast2 => dim >= 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Constraint::None => "none",
            Constraint::PairsAboveDimPlus1 => "N>n+1",
            Constraint::PairsAboveDimPlus3 => "N>n+3",
            Constraint::DimAtLeast2 => "n>=2",
        }
    }
}

/// One catalog entry.
#[derive(Debug, Clone, Copy)]
pub struct IdentitySpec {
    /// Catalog number, 1..=30.
    pub id: u8,
    /// The statement, as written.
    pub description: &'static str,
    pub inputs: &'static [IdentityInput],
    pub constraint: Constraint,
    pub output: OutputKind,
    /// For the two duplicated statements, the entry they alias.
    pub alias_of: Option<u8>,
}

impl IdentitySpec {
    pub fn needs_matrix(&self) -> bool {
        self.inputs
            .iter()
            .any(|i| matches!(i, IdentityInput::MatrixSymmetric | IdentityInput::MatrixGeneral))
    }

    pub fn needs_symmetric_matrix(&self) -> bool {
        self.inputs.contains(&IdentityInput::MatrixSymmetric)
    }

    pub fn needs_vector(&self) -> bool {
        self.inputs.contains(&IdentityInput::Vector)
    }
}

/// Evaluation context: dimensions plus whatever inputs the identity needs.
#[derive(Debug, Clone)]
pub struct IdentityContext {
    /// Vector dimension `n`.
    pub dim: usize,
    /// Wishart degrees of freedom `N` (ignored by single-vector identities).
    pub pairs: usize,
    /// The matrix `B`, when required.
    pub b_matrix: Option<DMatrix<f64>>,
    /// The vector `b`, when required.
    pub b_vector: Option<DVector<f64>>,
}

impl IdentityContext {
    pub fn new(dim: usize, pairs: usize) -> Self {
        Self { dim, pairs, b_matrix: None, b_vector: None }
    }

    pub fn with_matrix(mut self, b: DMatrix<f64>) -> Self {
        self.b_matrix = Some(b);
        self
    }

    pub fn with_vector(mut self, b: DVector<f64>) -> Self {
        self.b_vector = Some(b);
        self
    }
}

/// A scalar, vector or matrix identity value.
#[derive(Debug, Clone, PartialEq)]
pub enum IdentityValue {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl IdentityValue {
    /// Entries in a fixed (column-major) order.
    pub fn entries(&self) -> &[f64] {
        match self {
            IdentityValue::Scalar(v) => std::slice::from_ref(v),
            IdentityValue::Vector(v) => v.as_slice(),
            IdentityValue::Matrix(m) => m.as_slice(),
        }
    }

    /// The scalar payload, if this is a scalar.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            IdentityValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

/// Outcome of an oracle-vs-analytic comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyReport {
    /// True when every entry sits within `k_sigma` standard errors (exact
    /// match required for zero-variance entries).
    pub pass: bool,
    /// Largest |z| over entries with positive standard error.
    pub max_z: f64,
}

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("unknown identity id {0}; the catalog runs 1..=30")]
    UnknownId(u8),
    #[error("identity {id} requires {constraint} but got n={dim}, N={pairs}")]
    ConstraintViolated { id: u8, constraint: &'static str, dim: usize, pairs: usize },
    #[error("identity {id} requires {what}")]
    MissingInput { id: u8, what: &'static str },
    #[error("identity {id} requires a symmetric B (asymmetry {asymmetry:.3e})")]
    NotSymmetric { id: u8, asymmetry: f64 },
    #[error("input shape mismatch: {0}")]
    BadShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampling produced a non-finite value for identity {0}")]
    NonFiniteSample(u8),
}

const CATALOG: [IdentitySpec; 30] = [
    IdentitySpec { id: 1, description: "E[x x^T x x^T] = (2+n) I", inputs: &[], constraint: Constraint::None, output: OutputKind::Matrix, alias_of: None },
    IdentitySpec { id: 2, description: "E[Tr[BQ]] = N Tr[B]", inputs: &[IdentityInput::MatrixGeneral], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 3, description: "E[x x^T x x^T x x^T] = (8+6n+n^2) I", inputs: &[], constraint: Constraint::None, output: OutputKind::Matrix, alias_of: None },
    IdentitySpec { id: 4, description: "E[x x^T B x x^T] = B + B^T + Tr[B] I", inputs: &[IdentityInput::MatrixGeneral], constraint: Constraint::None, output: OutputKind::Matrix, alias_of: None },
    IdentitySpec { id: 5, description: "E[x^T B x x^T B x] = Tr[B(B+B^T)] + Tr[B]^2", inputs: &[IdentityInput::MatrixGeneral], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 6, description: "E[Tr[Q] Tr[Q]] = N(2n + N n^2)", inputs: &[], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 7, description: "E[Tr[QQ]] = N n (N+n+1)", inputs: &[], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 8, description: "E[Tr[(XX^T)^-1]] = n/(N-n-1)", inputs: &[], constraint: Constraint::PairsAboveDimPlus1, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 9, description: "E[Tr[(XX^T)^-2]] = (N-1)n/((N-n-3)(N-n-1)(N-n))", inputs: &[], constraint: Constraint::PairsAboveDimPlus3, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 10, description: "E[Tr[(XX^T)^-1]^2] = n(n(N-n-2)+2)/((N-n-3)(N-n-1)(N-n))", inputs: &[], constraint: Constraint::PairsAboveDimPlus3, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 11, description: "E[x^T x b^T x x^T x x^T b] = b^T b (n^2+6n+8)", inputs: &[IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 12, description: "E[((Bx+b)^T(Bx+b))^2] = 2Tr[BB^T BB^T] + 4 b^T BB^T b + (Tr[BB^T] + b^T b)^2", inputs: &[IdentityInput::MatrixGeneral, IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 13, description: "E[Tr[Q] b^T QQ b] = b^T b N(1+n+N)(4+nN)", inputs: &[IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 14, description: "E[Tr[Q] b^T Q b] = b^T b N(2+nN)", inputs: &[IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 15, description: "E[QQQ] = N(4+n^2+3n(1+N)+N(3+N)) I", inputs: &[], constraint: Constraint::None, output: OutputKind::Matrix, alias_of: None },
    IdentitySpec { id: 16, description: "E[Tr[BQQ]] = Tr[B] N(N+n+1)", inputs: &[IdentityInput::MatrixGeneral], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 17, description: "E[Tr[Q] b^T Q b] = N(2+nN) b^T b (restates 14)", inputs: &[IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: Some(14) },
    IdentitySpec { id: 18, description: "E[Tr[Q] b^T QQ b] = N(1+n+N)(4+nN) b^T b (restates 13)", inputs: &[IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: Some(13) },
    IdentitySpec { id: 19, description: "E[x^T B x b^T x x^T] = b^T(B + B^T + Tr[B] I)", inputs: &[IdentityInput::MatrixGeneral, IdentityInput::Vector], constraint: Constraint::None, output: OutputKind::Vector, alias_of: None },
    IdentitySpec { id: 20, description: "E[x^T B x x^T B x x^T x] = (n+4)Tr[B]^2 + (8+2n)Tr[B^2]", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 21, description: "E[x^T B x x^T x x^T B x x^T x] = (n^2+24+10n)Tr[B]^2 + (2n^2+20n+48)Tr[B^2]", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 22, description: "E[Tr[BQBQ]] = N((N+1)Tr[B^2] + Tr[B]^2)", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 23, description: "E[Tr[BQBQQ]] = N((4+n+(3+n)N+N^2)Tr[B^2] + (2+n+2N)Tr[B]^2)", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 24, description: "E[Tr[BQQBQQ]] = N((20+n(11+n)+21N+n(7+n)N+2(3+n)N^2+N^3)Tr[B^2] + (10+5n+n^2+5(2+n)N+4N^2)Tr[B]^2)", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 25, description: "E[Tr[BQ] Tr[BQ]] = N(N Tr[B]^2 + 2 Tr[B^2])", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 26, description: "E[Tr[BQ] Tr[BQQ]] = N(2(2+n+2N)Tr[B^2] + (2+N(1+n+N))Tr[B]^2)", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 27, description: "E[Tr[BQQ] Tr[BQQ]] = N(2(10+5n+n^2+5(2+n)N+4N^2)Tr[B^2] + (n^2 N+2n(3+N+N^2)+(1+N)(10+N+N^2))Tr[B]^2)", inputs: &[IdentityInput::MatrixSymmetric], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 28, description: "E[(b^T q_i)^2] = |b|^2 / n", inputs: &[IdentityInput::Vector, IdentityInput::SpherePair], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 29, description: "E[(b^T q_i)^4] = 3 |b|^4 / (n(n+2))", inputs: &[IdentityInput::Vector, IdentityInput::SpherePair], constraint: Constraint::None, output: OutputKind::Scalar, alias_of: None },
    IdentitySpec { id: 30, description: "E[(b^T q_i)^2 (b^T q_j)^2] = |b|^4 / (n(n+2))", inputs: &[IdentityInput::Vector, IdentityInput::SpherePair], constraint: Constraint::DimAtLeast2, output: OutputKind::Scalar, alias_of: None },
];

/// All 30 catalog entries in order.
pub fn catalog() -> &'static [IdentitySpec] {
    &CATALOG
}

/// Look up one entry.
pub fn spec_for(id: u8) -> Result<&'static IdentitySpec, IdentityError> {
    if (1..=30).contains(&id) {
        Ok(&CATALOG[id as usize - 1])
    } else {
        Err(IdentityError::UnknownId(id))
    }
}

fn validate(spec: &IdentitySpec, ctx: &IdentityContext) -> Result<(), IdentityError> {
    if ctx.dim == 0 || ctx.pairs == 0 {
        return Err(IdentityError::InvalidArgument("n and N must be >= 1".into()));
    }
    if !spec.constraint.holds(ctx.dim, ctx.pairs) {
        return Err(IdentityError::ConstraintViolated {
            id: spec.id,
            constraint: spec.constraint.label(),
            dim: ctx.dim,
            pairs: ctx.pairs,
        });
    }
    if spec.needs_matrix() {
        let b = ctx
            .b_matrix
            .as_ref()
            .ok_or(IdentityError::MissingInput { id: spec.id, what: "a matrix B" })?;
        if b.nrows() != ctx.dim || b.ncols() != ctx.dim {
            return Err(IdentityError::BadShape(format!(
                "B must be {0}x{0}, got {1}x{2}",
                ctx.dim,
                b.nrows(),
                b.ncols()
            )));
        }
        if spec.needs_symmetric_matrix() {
            let scale = b.amax().max(1.0);
            let mut asym = 0.0f64;
            for i in 0..b.nrows() {
                for j in (i + 1)..b.ncols() {
                    asym = asym.max((b[(i, j)] - b[(j, i)]).abs());
                }
            }
            if asym > 1e-12 * scale {
                return Err(IdentityError::NotSymmetric { id: spec.id, asymmetry: asym });
            }
        }
    }
    if spec.needs_vector() {
        let b = ctx
            .b_vector
            .as_ref()
            .ok_or(IdentityError::MissingInput { id: spec.id, what: "a vector b" })?;
        if b.len() != ctx.dim {
            return Err(IdentityError::BadShape(format!(
                "b must have length {}, got {}",
                ctx.dim,
                b.len()
            )));
        }
    }
    Ok(())
}

fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}

/// Exact evaluation of an identity's right-hand side.
pub fn analytic_value(id: u8, ctx: &IdentityContext) -> Result<IdentityValue, IdentityError> {
    let spec = spec_for(id)?;
    validate(spec, ctx)?;
    let canonical = spec.alias_of.unwrap_or(spec.id);
    let (n, nn) = (ctx.dim as f64, ctx.pairs as f64);
    let dim = ctx.dim;
    let b_mat = ctx.b_matrix.as_ref();
    let b_vec = ctx.b_vector.as_ref();
    let value = match canonical {
        1 => IdentityValue::Matrix(DMatrix::identity(dim, dim) * (2.0 + n)),
        2 => IdentityValue::Scalar(nn * b_mat.unwrap().trace()),
        3 => IdentityValue::Matrix(DMatrix::identity(dim, dim) * (8.0 + 6.0 * n + n * n)),
        4 => {
            let b = b_mat.unwrap();
            IdentityValue::Matrix(b + b.transpose() + DMatrix::identity(dim, dim) * b.trace())
        }
        5 => {
            let b = b_mat.unwrap();
            let sym = b + b.transpose();
            IdentityValue::Scalar(trace_prod(b, &sym) + b.trace().powi(2))
        }
        6 => IdentityValue::Scalar(nn * (2.0 * n + nn * n * n)),
        7 => IdentityValue::Scalar(nn * n * (nn + n + 1.0)),
        8 => IdentityValue::Scalar(n / (nn - n - 1.0)),
        9 => IdentityValue::Scalar(
            (nn - 1.0) * n / ((nn - n - 3.0) * (nn - n - 1.0) * (nn - n)),
        ),
        10 => IdentityValue::Scalar(
            n * (n * (nn - n - 2.0) + 2.0) / ((nn - n - 3.0) * (nn - n - 1.0) * (nn - n)),
        ),
        11 => IdentityValue::Scalar(b_vec.unwrap().norm_squared() * (n * n + 6.0 * n + 8.0)),
        12 => {
            let b = b_mat.unwrap();
            let v = b_vec.unwrap();
            let bbt = b * b.transpose();
            let quad = (v.transpose() * &bbt * v)[(0, 0)];
            IdentityValue::Scalar(
                2.0 * trace_prod(&bbt, &bbt)
                    + 4.0 * quad
                    + (bbt.trace() + v.norm_squared()).powi(2),
            )
        }
        13 => IdentityValue::Scalar(
            b_vec.unwrap().norm_squared() * nn * (1.0 + n + nn) * (4.0 + n * nn),
        ),
        14 => IdentityValue::Scalar(b_vec.unwrap().norm_squared() * nn * (2.0 + n * nn)),
        15 => IdentityValue::Matrix(
            DMatrix::identity(dim, dim)
                * (nn * (4.0 + n * n + 3.0 * n * (1.0 + nn) + nn * (3.0 + nn))),
        ),
        16 => IdentityValue::Scalar(b_mat.unwrap().trace() * nn * (nn + n + 1.0)),
        19 => {
            let b = b_mat.unwrap();
            let v = b_vec.unwrap();
            IdentityValue::Vector(
                (b + b.transpose() + DMatrix::identity(dim, dim) * b.trace()) * v,
            )
        }
        20 | 21 => {
            let b = b_mat.unwrap();
            let tr = b.trace();
            let tr2 = trace_prod(b, b);
            let (c1, c2) = if canonical == 20 {
                (n + 4.0, 8.0 + 2.0 * n)
            } else {
                (n * n + 24.0 + 10.0 * n, 2.0 * n * n + 20.0 * n + 48.0)
            };
            IdentityValue::Scalar(c1 * tr * tr + c2 * tr2)
        }
        22..=27 => {
            let b = b_mat.unwrap();
            let tr = b.trace();
            let tr_sq = tr * tr;
            let tr2 = trace_prod(b, b);
            let v = match canonical {
                22 => nn * ((nn + 1.0) * tr2 + tr_sq),
                23 => {
                    nn * ((4.0 + n + (3.0 + n) * nn + nn * nn) * tr2
                        + (2.0 + n + 2.0 * nn) * tr_sq)
                }
                24 => {
                    nn * ((20.0
                        + n * (11.0 + n)
                        + 21.0 * nn
                        + n * (7.0 + n) * nn
                        + 2.0 * (3.0 + n) * nn * nn
                        + nn * nn * nn)
                        * tr2
                        + (10.0 + 5.0 * n + n * n + 5.0 * (2.0 + n) * nn + 4.0 * nn * nn)
                            * tr_sq)
                }
                25 => nn * (nn * tr_sq + 2.0 * tr2),
                26 => {
                    nn * (2.0 * (2.0 + n + 2.0 * nn) * tr2
                        + (2.0 + nn * (1.0 + n + nn)) * tr_sq)
                }
                27 => {
                    nn * (2.0
                        * (10.0 + 5.0 * n + n * n + 5.0 * (2.0 + n) * nn + 4.0 * nn * nn)
                        * tr2
                        + (n * n * nn
                            + 2.0 * n * (3.0 + nn + nn * nn)
                            + (1.0 + nn) * (10.0 + nn + nn * nn))
                            * tr_sq)
                }
                _ => unreachable!(),
            };
            IdentityValue::Scalar(v)
        }
        28 => IdentityValue::Scalar(b_vec.unwrap().norm_squared() / n),
        29 => {
            let b2 = b_vec.unwrap().norm_squared();
            IdentityValue::Scalar(3.0 * b2 * b2 / (n * (n + 2.0)))
        }
        30 => {
            let b2 = b_vec.unwrap().norm_squared();
            IdentityValue::Scalar(b2 * b2 / (n * (n + 2.0)))
        }
        _ => unreachable!("aliases resolve to canonical ids"),
    };
    Ok(value)
}

/// Reusable buffers for one sampling thread.
struct Workspace {
    /// Design transposed: rows are the `x_i^T` (N x n).
    xt: DMatrix<f64>,
    /// `Q = X X^T` (n x n).
    q: DMatrix<f64>,
    t1: DMatrix<f64>,
    t2: DMatrix<f64>,
    x: DVector<f64>,
    g: DVector<f64>,
}

impl Workspace {
    fn new(dim: usize, pairs: usize) -> Self {
        Self {
            xt: DMatrix::zeros(pairs, dim),
            q: DMatrix::zeros(dim, dim),
            t1: DMatrix::zeros(dim, dim),
            t2: DMatrix::zeros(dim, dim),
            x: DVector::zeros(dim),
            g: DVector::zeros(dim),
        }
    }

    fn draw_q(&mut self, rng: &mut ChaCha8Rng) {
        fill_standard_normal(rng, self.xt.as_mut_slice());
        self.q.gemm_tr(1.0, &self.xt, &self.xt, 0.0);
    }

    fn draw_x(&mut self, rng: &mut ChaCha8Rng) {
        fill_standard_normal(rng, self.x.as_mut_slice());
    }

    /// Uniform unit vector into `x`.
    fn draw_sphere(&mut self, rng: &mut ChaCha8Rng) {
        loop {
            fill_standard_normal(rng, self.x.as_mut_slice());
            let norm = self.x.norm();
            if norm > 0.0 {
                self.x /= norm;
                return;
            }
        }
    }

    /// Uniform orthonormal pair into (`x`, `g`). Requires `dim >= 2`.
    fn draw_sphere_pair(&mut self, rng: &mut ChaCha8Rng) {
        self.draw_sphere(rng);
        loop {
            fill_standard_normal(rng, self.g.as_mut_slice());
            let proj = self.x.dot(&self.g);
            self.g.axpy(-proj, &self.x, 1.0);
            let norm = self.g.norm();
            if norm > 1e-12 {
                self.g /= norm;
                return;
            }
        }
    }
}

/// One draw of the identity's left-hand-side random quantity, written to
/// `out` (column-major for matrices). `id` must be canonical.
fn sample_lhs(
    id: u8,
    ctx: &IdentityContext,
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
    out: &mut [f64],
) {
    let n = ctx.dim;
    let b_mat = ctx.b_matrix.as_ref();
    let b_vec = ctx.b_vector.as_ref();
    match id {
        1 => {
            ws.draw_x(rng);
            let s = ws.x.norm_squared();
            for j in 0..n {
                for i in 0..n {
                    out[i + j * n] = s * ws.x[i] * ws.x[j];
                }
            }
        }
        2 => {
            ws.draw_q(rng);
            out[0] = trace_prod(b_mat.unwrap(), &ws.q);
        }
        3 => {
            ws.draw_x(rng);
            let s2 = ws.x.norm_squared().powi(2);
            for j in 0..n {
                for i in 0..n {
                    out[i + j * n] = s2 * ws.x[i] * ws.x[j];
                }
            }
        }
        4 => {
            ws.draw_x(rng);
            ws.g.gemv(1.0, b_mat.unwrap(), &ws.x, 0.0);
            let c = ws.x.dot(&ws.g);
            for j in 0..n {
                for i in 0..n {
                    out[i + j * n] = c * ws.x[i] * ws.x[j];
                }
            }
        }
        5 => {
            ws.draw_x(rng);
            ws.g.gemv(1.0, b_mat.unwrap(), &ws.x, 0.0);
            out[0] = ws.x.dot(&ws.g).powi(2);
        }
        6 => {
            fill_standard_normal(rng, ws.xt.as_mut_slice());
            let tr: f64 = ws.xt.as_slice().iter().map(|v| v * v).sum();
            out[0] = tr * tr;
        }
        7 => {
            ws.draw_q(rng);
            out[0] = ws.q.norm_squared();
        }
        8..=10 => {
            ws.draw_q(rng);
            // Full rank almost surely under the constraint N > n+1.
            let inv = Cholesky::new(ws.q.clone())
                .expect("Wishart matrix with N > n+1 is a.s. positive definite")
                .inverse();
            out[0] = match id {
                8 => inv.trace(),
                9 => inv.norm_squared(),
                _ => inv.trace().powi(2),
            };
        }
        11 => {
            ws.draw_x(rng);
            let s = ws.x.norm_squared();
            let d = b_vec.unwrap().dot(&ws.x);
            out[0] = s * s * d * d;
        }
        12 => {
            ws.draw_x(rng);
            ws.g.gemv(1.0, b_mat.unwrap(), &ws.x, 0.0);
            ws.g += b_vec.unwrap();
            out[0] = ws.g.norm_squared().powi(2);
        }
        13 => {
            ws.draw_q(rng);
            ws.g.gemv(1.0, &ws.q, b_vec.unwrap(), 0.0);
            out[0] = ws.q.trace() * ws.g.norm_squared();
        }
        14 => {
            ws.draw_q(rng);
            ws.g.gemv(1.0, &ws.q, b_vec.unwrap(), 0.0);
            out[0] = ws.q.trace() * b_vec.unwrap().dot(&ws.g);
        }
        15 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, &ws.q, &ws.q, 0.0);
            ws.t2.gemm(1.0, &ws.t1, &ws.q, 0.0);
            out.copy_from_slice(ws.t2.as_slice());
        }
        16 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, &ws.q, &ws.q, 0.0);
            out[0] = trace_prod(b_mat.unwrap(), &ws.t1);
        }
        19 => {
            ws.draw_x(rng);
            ws.g.gemv(1.0, b_mat.unwrap(), &ws.x, 0.0);
            let c = ws.x.dot(&ws.g);
            let d = b_vec.unwrap().dot(&ws.x);
            for (o, &xi) in out.iter_mut().zip(ws.x.iter()) {
                *o = c * d * xi;
            }
        }
        20 | 21 => {
            ws.draw_x(rng);
            ws.g.gemv(1.0, b_mat.unwrap(), &ws.x, 0.0);
            let c = ws.x.dot(&ws.g);
            let s = ws.x.norm_squared();
            out[0] = if id == 20 { c * c * s } else { c * c * s * s };
        }
        22 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, b_mat.unwrap(), &ws.q, 0.0);
            out[0] = trace_prod(&ws.t1, &ws.t1);
        }
        23 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, b_mat.unwrap(), &ws.q, 0.0);
            ws.t2.gemm(1.0, &ws.t1, &ws.t1, 0.0);
            out[0] = trace_prod(&ws.t2, &ws.q);
        }
        24 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, &ws.q, &ws.q, 0.0);
            ws.t2.gemm(1.0, b_mat.unwrap(), &ws.t1, 0.0);
            out[0] = trace_prod(&ws.t2, &ws.t2);
        }
        25 => {
            ws.draw_q(rng);
            out[0] = trace_prod(b_mat.unwrap(), &ws.q).powi(2);
        }
        26 => {
            ws.draw_q(rng);
            let t = trace_prod(b_mat.unwrap(), &ws.q);
            ws.t1.gemm(1.0, &ws.q, &ws.q, 0.0);
            out[0] = t * trace_prod(b_mat.unwrap(), &ws.t1);
        }
        27 => {
            ws.draw_q(rng);
            ws.t1.gemm(1.0, &ws.q, &ws.q, 0.0);
            out[0] = trace_prod(b_mat.unwrap(), &ws.t1).powi(2);
        }
        28 | 29 => {
            ws.draw_sphere(rng);
            let d = b_vec.unwrap().dot(&ws.x);
            out[0] = if id == 28 { d * d } else { d * d * d * d };
        }
        30 => {
            ws.draw_sphere_pair(rng);
            let b = b_vec.unwrap();
            let di = b.dot(&ws.x);
            let dj = b.dot(&ws.g);
            out[0] = di * di * dj * dj;
        }
        _ => unreachable!("canonical id"),
    }
}

fn output_len(kind: OutputKind, dim: usize) -> usize {
    match kind {
        OutputKind::Scalar => 1,
        OutputKind::Vector => dim,
        OutputKind::Matrix => dim * dim,
    }
}

fn shape_value(kind: OutputKind, dim: usize, entries: Vec<f64>) -> IdentityValue {
    match kind {
        OutputKind::Scalar => IdentityValue::Scalar(entries[0]),
        OutputKind::Vector => IdentityValue::Vector(DVector::from_vec(entries)),
        OutputKind::Matrix => IdentityValue::Matrix(DMatrix::from_vec(dim, dim, entries)),
    }
}

/// Samples processed per parallel work unit; per-entry accumulators merge in
/// unit order so the result is independent of scheduling.
const SAMPLE_CHUNK: u64 = 1 << 15;

/// Sample mean of the identity's left-hand side over `samples` independent
/// draws, with per-entry standard errors. Deterministic in `(ctx, samples,
/// seed)` for any worker count.
pub fn mc_estimate(
    id: u8,
    ctx: &IdentityContext,
    samples: u64,
    seed: u64,
) -> Result<(IdentityValue, IdentityValue), IdentityError> {
    let spec = spec_for(id)?;
    validate(spec, ctx)?;
    if samples == 0 {
        return Err(IdentityError::InvalidArgument("samples must be >= 1".into()));
    }
    let canonical = spec.alias_of.unwrap_or(spec.id);
    let entries = output_len(spec.output, ctx.dim);
    let n_chunks = samples.div_ceil(SAMPLE_CHUNK);
    let per_chunk: Vec<Vec<MomentAccumulator>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SAMPLE_CHUNK;
            let hi = (lo + SAMPLE_CHUNK).min(samples);
            let mut rng = stream_rng(seed, c);
            let mut ws = Workspace::new(ctx.dim, ctx.pairs);
            let mut out = vec![0.0; entries];
            let mut accs = vec![MomentAccumulator::new(); entries];
            for _ in lo..hi {
                sample_lhs(canonical, ctx, &mut rng, &mut ws, &mut out);
                for (acc, &v) in accs.iter_mut().zip(out.iter()) {
                    acc.accumulate(v).map_err(|_| IdentityError::NonFiniteSample(id))?;
                }
            }
            Ok(accs)
        })
        .collect::<Result<_, IdentityError>>()?;

    let mut accs = vec![MomentAccumulator::new(); entries];
    for chunk in &per_chunk {
        for (acc, c) in accs.iter_mut().zip(chunk) {
            *acc = acc.merge(c);
        }
    }
    let est = shape_value(spec.output, ctx.dim, accs.iter().map(|a| a.mean()).collect());
    let se = shape_value(spec.output, ctx.dim, accs.iter().map(|a| a.stderr()).collect());
    Ok((est, se))
}

/// Z-test the sampling oracle against the analytic value.
///
/// Passes when every entry satisfies `|estimate - analytic| <= k_sigma *
/// stderr`; entries with zero standard error must match to 1e-10.
pub fn verify(
    id: u8,
    ctx: &IdentityContext,
    samples: u64,
    seed: u64,
    k_sigma: f64,
) -> Result<VerifyReport, IdentityError> {
    // NaN fails this check too.
    let threshold_ok = k_sigma > 0.0;
    if !threshold_ok {
        return Err(IdentityError::InvalidArgument(format!(
            "k_sigma must be positive, got {k_sigma}"
        )));
    }
    let analytic = analytic_value(id, ctx)?;
    let (est, se) = mc_estimate(id, ctx, samples, seed)?;
    let mut pass = true;
    let mut max_z = 0.0f64;
    for ((&a, &e), &s) in analytic.entries().iter().zip(est.entries()).zip(se.entries()) {
        if s == 0.0 {
            pass &= (e - a).abs() <= 1e-10;
        } else {
            let z = (e - a).abs() / s;
            max_z = max_z.max(z);
            pass &= z <= k_sigma;
        }
    }
    Ok(VerifyReport { pass, max_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, normal_vector};

    fn random_symmetric(dim: usize, seed: u64) -> DMatrix<f64> {
        let g = normal_matrix(&mut stream_rng(seed, 0), dim, dim);
        (&g + g.transpose()) * 0.5
    }

    fn full_ctx(dim: usize, pairs: usize, seed: u64) -> IdentityContext {
        IdentityContext::new(dim, pairs)
            .with_matrix(random_symmetric(dim, seed))
            .with_vector(normal_vector(&mut stream_rng(seed, 1), dim))
    }

    #[test]
    fn catalog_has_thirty_entries_with_two_aliases() {
        let cat = catalog();
        assert_eq!(cat.len(), 30);
        for (i, spec) in cat.iter().enumerate() {
            assert_eq!(spec.id as usize, i + 1);
        }
        assert_eq!(cat[16].alias_of, Some(14));
        assert_eq!(cat[17].alias_of, Some(13));
        assert_eq!(cat.iter().filter(|s| s.alias_of.is_some()).count(), 2);
    }

    #[test]
    fn aliases_evaluate_identically() {
        let ctx = full_ctx(4, 6, 3);
        assert_eq!(
            analytic_value(17, &ctx).unwrap(),
            analytic_value(14, &ctx).unwrap()
        );
        assert_eq!(
            analytic_value(18, &ctx).unwrap(),
            analytic_value(13, &ctx).unwrap()
        );
    }

    #[test]
    fn constraints_reject_out_of_range_contexts() {
        // N = 8 <= n + 3 = 8 violates the second-moment constraint.
        let ctx = IdentityContext::new(5, 8);
        assert!(matches!(
            analytic_value(9, &ctx),
            Err(IdentityError::ConstraintViolated { .. })
        ));
        assert!(analytic_value(9, &IdentityContext::new(5, 9)).is_ok());
        // Sphere pairs need two dimensions.
        let ctx = IdentityContext::new(1, 1).with_vector(DVector::from_element(1, 2.0));
        assert!(matches!(
            analytic_value(30, &ctx),
            Err(IdentityError::ConstraintViolated { .. })
        ));
    }

    #[test]
    fn missing_and_malformed_inputs_are_rejected() {
        let ctx = IdentityContext::new(3, 4);
        assert!(matches!(
            analytic_value(2, &ctx),
            Err(IdentityError::MissingInput { .. })
        ));
        assert!(matches!(
            analytic_value(11, &ctx),
            Err(IdentityError::MissingInput { .. })
        ));
        // Asymmetric B where symmetry is required.
        let mut b = DMatrix::zeros(3, 3);
        b[(0, 1)] = 1.0;
        let ctx = IdentityContext::new(3, 4).with_matrix(b.clone());
        assert!(matches!(
            analytic_value(22, &ctx),
            Err(IdentityError::NotSymmetric { .. })
        ));
        // The same B is fine where symmetry is not required.
        assert!(analytic_value(2, &ctx).is_ok());
        // Wrong shapes.
        let ctx = IdentityContext::new(3, 4).with_matrix(DMatrix::zeros(2, 2));
        assert!(matches!(analytic_value(2, &ctx), Err(IdentityError::BadShape(_))));
    }

    #[test]
    fn analytic_spot_values() {
        let one = IdentityContext::new(1, 1);
        match analytic_value(1, &one).unwrap() {
            IdentityValue::Matrix(m) => assert_eq!(m[(0, 0)], 3.0),
            _ => panic!("matrix expected"),
        }
        match analytic_value(3, &one).unwrap() {
            IdentityValue::Matrix(m) => assert_eq!(m[(0, 0)], 15.0),
            _ => panic!("matrix expected"),
        }
        assert_eq!(analytic_value(7, &one).unwrap().as_scalar(), Some(3.0));

        let ctx = IdentityContext::new(3, 4).with_matrix(DMatrix::identity(3, 3));
        assert_eq!(analytic_value(2, &ctx).unwrap().as_scalar(), Some(12.0));

        let ctx = IdentityContext::new(1, 3);
        assert_eq!(analytic_value(8, &ctx).unwrap().as_scalar(), Some(1.0));

        let mut b = DVector::zeros(2);
        b[0] = 1.0;
        let ctx = IdentityContext::new(2, 1).with_vector(b);
        assert_eq!(analytic_value(29, &ctx).unwrap().as_scalar(), Some(0.375));
    }

    #[test]
    fn evaluators_are_linear_in_b() {
        // Tr-linear identities: value(a B1 + c B2) = a value(B1) + c value(B2).
        let b1 = normal_matrix(&mut stream_rng(5, 0), 4, 4);
        let b2 = normal_matrix(&mut stream_rng(5, 1), 4, 4);
        for id in [2u8, 16] {
            let v1 = analytic_value(id, &IdentityContext::new(4, 7).with_matrix(b1.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            let v2 = analytic_value(id, &IdentityContext::new(4, 7).with_matrix(b2.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            let combo = analytic_value(
                id,
                &IdentityContext::new(4, 7).with_matrix(&b1 * 2.5 + &b2 * (-0.75)),
            )
            .unwrap()
            .as_scalar()
            .unwrap();
            let expect = 2.5 * v1 - 0.75 * v2;
            assert!((combo - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn symmetric_evaluators_depend_only_on_traces() {
        // Rotating B preserves (Tr[B], Tr[B^2]); ids 22-27 must not move.
        let b = random_symmetric(4, 9);
        let g = normal_matrix(&mut stream_rng(10, 0), 4, 4);
        let rot = g.qr().q();
        let b_rot = rot.transpose() * &b * &rot;
        for id in 22u8..=27 {
            let v1 = analytic_value(id, &IdentityContext::new(4, 7).with_matrix(b.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            let v2 = analytic_value(id, &IdentityContext::new(4, 7).with_matrix(b_rot.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            assert!((v1 - v2).abs() <= 1e-9 * v1.abs().max(1.0), "id {id}: {v1} vs {v2}");
        }
    }

    #[test]
    fn vector_evaluators_scale_as_expected() {
        let b = normal_vector(&mut stream_rng(6, 0), 5);
        let scaled = &b * 3.0;
        // |b|^2 scaling: ids 11, 13, 14.
        for id in [11u8, 13, 14] {
            let v1 = analytic_value(id, &IdentityContext::new(5, 6).with_vector(b.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            let v2 = analytic_value(id, &IdentityContext::new(5, 6).with_vector(scaled.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            assert!((v2 - 9.0 * v1).abs() <= 1e-12 * v2.abs());
        }
        // |b|^4 scaling: ids 29, 30.
        for id in [29u8, 30] {
            let v1 = analytic_value(id, &IdentityContext::new(5, 6).with_vector(b.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            let v2 = analytic_value(id, &IdentityContext::new(5, 6).with_vector(scaled.clone()))
                .unwrap()
                .as_scalar()
                .unwrap();
            assert!((v2 - 81.0 * v1).abs() <= 1e-12 * v2.abs());
        }
    }

    #[test]
    fn mc_estimate_matches_analytic_for_simple_cases() {
        // Identity 2 with B = I, n=3, N=4: expectation 12.
        let ctx = IdentityContext::new(3, 4).with_matrix(DMatrix::identity(3, 3));
        let (est, se) = mc_estimate(2, &ctx, 100_000, 21).unwrap();
        let (e, s) = (est.as_scalar().unwrap(), se.as_scalar().unwrap());
        assert!((e - 12.0).abs() <= 5.0 * s, "estimate {e}, stderr {s}");

        // Identity 8 with n=1, N=3: expectation 1.
        let ctx = IdentityContext::new(1, 3);
        let (est, se) = mc_estimate(8, &ctx, 200_000, 22).unwrap();
        let (e, s) = (est.as_scalar().unwrap(), se.as_scalar().unwrap());
        assert!((e - 1.0).abs() <= 5.0 * s, "estimate {e}, stderr {s}");
    }

    #[test]
    fn mc_estimate_is_deterministic_across_worker_counts() {
        let ctx = full_ctx(3, 5, 14);
        let run = || mc_estimate(24, &ctx, 70_000, 5).unwrap();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
        assert_eq!(a, b);
    }

    #[test]
    fn verify_passes_for_true_values_and_catches_corruption() {
        let ctx = IdentityContext::new(1, 1);
        let report = verify(1, &ctx, 1_000_000, 31, 5.0).unwrap();
        assert!(report.pass, "max_z = {}", report.max_z);

        // A 10% corruption of identity 7 at n=N=5 must be detected loudly.
        let ctx = IdentityContext::new(5, 5);
        let truth = analytic_value(7, &ctx).unwrap().as_scalar().unwrap();
        let (est, se) = mc_estimate(7, &ctx, 1_000_000, 32).unwrap();
        let z = (est.as_scalar().unwrap() - 1.1 * truth).abs() / se.as_scalar().unwrap();
        assert!(z > 5.0, "corrupted value must fail loudly, z = {z}");
    }

    #[test]
    fn verify_handles_zero_variance_and_zero_vector() {
        // n = 1: the sphere direction is +-1, so (b^T q)^2 is constant.
        let ctx = IdentityContext::new(1, 1).with_vector(DVector::from_element(1, 1.3));
        let report = verify(28, &ctx, 1000, 33, 5.0).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_z, 0.0);

        // b = 0: both sides vanish identically.
        let ctx = IdentityContext::new(3, 2).with_vector(DVector::zeros(3));
        let report = verify(30, &ctx, 1000, 34, 5.0).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn quick_catalog_sweep_passes() {
        // Reduced-sample version of the full acceptance sweep.
        for spec in catalog() {
            for &(dim, pairs) in &[(2usize, 3usize), (5, 15)] {
                if !spec.constraint.holds(dim, pairs) {
                    continue;
                }
                let mut ctx = IdentityContext::new(dim, pairs);
                if spec.needs_matrix() {
                    let b = if spec.needs_symmetric_matrix() {
                        random_symmetric(dim, 40 + spec.id as u64)
                    } else {
                        normal_matrix(&mut stream_rng(40 + spec.id as u64, 2), dim, dim)
                    };
                    ctx = ctx.with_matrix(b);
                }
                if spec.needs_vector() {
                    ctx = ctx.with_vector(normal_vector(
                        &mut stream_rng(80 + spec.id as u64, 3),
                        dim,
                    ));
                }
                let report = verify(spec.id, &ctx, 20_000, 1000 + spec.id as u64, 5.0)
                    .unwrap_or_else(|e| panic!("identity {} failed: {e}", spec.id));
                assert!(
                    report.pass,
                    "identity {} at (n={dim}, N={pairs}): max_z = {}",
                    spec.id, report.max_z
                );
            }
        }
    }
}
