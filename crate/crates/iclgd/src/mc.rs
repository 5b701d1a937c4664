//! Seeded, mergeable Monte Carlo statistics over replicated loss simulations.
//!
//! A run draws `replicates` independent designs; each design is fitted once
//! and evaluated at `tests_per_replicate` fresh test pairs. Every loss feeds
//! a streaming [`MomentAccumulator`] and an [`EcdfSummary`]. Replicate `r`
//! draws exclusively from RNG stream `r`, and partial results merge in
//! replicate order, so a run is bit-identical for any worker count.
//!
//! Standard errors: losses sharing a design are correlated, so the standard
//! error of the run mean is computed from the spread of per-replicate means
//! (`sqrt(variance / count)` over the replicate-mean sample), not from the
//! pooled per-loss variance. Per-loss stats remain available on `losses`.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    draw_design, gd_one_step, least_norm_fit, least_squares_fit, make_task, ModelError,
    ProblemConfig, TaskInstance,
};
use crate::rng::{normal_vector, stream_rng};

/// Largest loss count stored exactly (sorted) by the ECDF; larger runs fall
/// back to a fixed-width histogram calibrated by a pilot run.
pub const EXACT_ECDF_CAPACITY: u64 = 10_000_000;
/// Bin count of the histogram fallback.
pub const HISTOGRAM_BINS: usize = 10_000;
/// Hard ceiling on total losses per run.
pub const MAX_TOTAL_LOSSES: u64 = 1_000_000_000;

/// Stream offset for pilot replicates so they never collide with the main
/// replicate streams.
const PILOT_STREAM_BASE: u64 = 1 << 63;
/// Replicates processed per work unit; partial results merge in unit order.
const CHUNK_REPLICATES: u64 = 64;

#[derive(Debug, Error)]
pub enum McError {
    #[error("non-finite sample: {0}")]
    Data(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("capacity exceeded: {requested} losses requested, limit {limit}")]
    Capacity { requested: u64, limit: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Streaming count / mean / central and raw second moments.
///
/// Single-pass updates use Welford's recurrence, anchored at the first
/// observation: internally the accumulator tracks `x - origin` where
/// `origin` is the first value seen, which keeps the central moments at full
/// precision even when the data sit on a huge common offset (the raw second
/// moment is not shift-protected). [`merge`](Self::merge) uses the pairwise
/// formula, so two accumulators built on disjoint streams combine to the
/// statistics of the concatenated stream; a deterministic merge order gives
/// bit-identical results.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    origin: f64,
    /// Mean of `x - origin`.
    mean: f64,
    m2: f64,
    raw2: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Absorb one observation. Rejects non-finite input.
    pub fn accumulate(&mut self, x: f64) -> Result<(), McError> {
        if !x.is_finite() {
            return Err(McError::Data(x));
        }
        if self.count == 0 {
            self.origin = x;
        }
        let shifted = x - self.origin;
        self.count += 1;
        let delta = shifted - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (shifted - self.mean);
        self.raw2 += x * x;
        Ok(())
    }

    /// Combine with another accumulator as if both streams were one.
    /// Merging with an empty accumulator is the identity.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        // Rebase the other side's shifted mean onto this origin.
        let delta = (other.origin - self.origin) + other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64 / count as f64);
        Self { count, origin: self.origin, mean, m2, raw2: self.raw2 + other.raw2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.origin + self.mean
        }
    }

    /// Raw second moment `E[x^2]` estimate; zero on an empty accumulator.
    pub fn second_moment(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.raw2 / self.count as f64
        }
    }

    /// Unbiased sample variance `m2 / (count - 1)`; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean, `sqrt(variance / count)`.
    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Empirical distribution of recorded losses: exact sorted storage up to
/// [`EXACT_ECDF_CAPACITY`], a fixed-width histogram beyond.
#[derive(Debug, Clone, PartialEq)]
pub enum EcdfSummary {
    Exact {
        /// Nondecreasing losses.
        sorted: Vec<f64>,
    },
    Histogram {
        /// Lower edge (inclusive) of the binned range.
        lo: f64,
        /// Upper edge (exclusive); losses at or above land in `overflow`.
        hi: f64,
        counts: Vec<u64>,
        overflow: u64,
        total: u64,
    },
}

impl EcdfSummary {
    /// Exact summary over the given losses.
    pub fn from_losses(mut losses: Vec<f64>) -> Self {
        losses.sort_by(f64::total_cmp);
        EcdfSummary::Exact { sorted: losses }
    }

    pub fn total(&self) -> u64 {
        match self {
            EcdfSummary::Exact { sorted } => sorted.len() as u64,
            EcdfSummary::Histogram { total, .. } => *total,
        }
    }

    /// Fraction of recorded losses strictly greater than `threshold`.
    ///
    /// In histogram form, the bin straddling the threshold contributes
    /// linearly; mass in the overflow bucket counts as above any threshold
    /// below `hi`.
    pub fn exceedance_rate(&self, threshold: f64) -> f64 {
        match self {
            EcdfSummary::Exact { sorted } => {
                if sorted.is_empty() {
                    return 0.0;
                }
                let below_or_equal = sorted.partition_point(|v| *v <= threshold);
                (sorted.len() - below_or_equal) as f64 / sorted.len() as f64
            }
            EcdfSummary::Histogram { lo, hi, counts, overflow, total } => {
                if *total == 0 {
                    return 0.0;
                }
                if threshold < *lo {
                    return 1.0;
                }
                if threshold >= *hi {
                    return *overflow as f64 / *total as f64;
                }
                let width = (hi - lo) / counts.len() as f64;
                let idx = (((threshold - lo) / width) as usize).min(counts.len() - 1);
                let upper_edge = lo + (idx + 1) as f64 * width;
                let partial = counts[idx] as f64 * ((upper_edge - threshold) / width);
                let above: u64 = counts[idx + 1..].iter().sum();
                (partial + above as f64 + *overflow as f64) / *total as f64
            }
        }
    }

    /// Empirical CDF at `threshold`, the exact complement of
    /// [`exceedance_rate`](Self::exceedance_rate).
    pub fn cdf(&self, threshold: f64) -> f64 {
        1.0 - self.exceedance_rate(threshold)
    }

    /// Empirical `q`-quantile (`q` in `[0, 1]`).
    pub fn quantile(&self, q: f64) -> f64 {
        match self {
            EcdfSummary::Exact { sorted } => {
                if sorted.is_empty() {
                    return f64::NAN;
                }
                let idx = ((q * sorted.len() as f64).ceil() as usize)
                    .clamp(1, sorted.len());
                sorted[idx - 1]
            }
            EcdfSummary::Histogram { lo, hi, counts, total, .. } => {
                if *total == 0 {
                    return f64::NAN;
                }
                let target = (q * *total as f64).ceil() as u64;
                let width = (hi - lo) / counts.len() as f64;
                let mut seen = 0u64;
                for (i, c) in counts.iter().enumerate() {
                    seen += c;
                    if seen >= target {
                        return lo + (i + 1) as f64 * width;
                    }
                }
                *hi
            }
        }
    }
}

/// Convenience alias for [`EcdfSummary::exceedance_rate`].
pub fn exceedance_rate(ecdf: &EcdfSummary, threshold: f64) -> f64 {
    ecdf.exceedance_rate(threshold)
}

/// Which fit to run on each replicate's design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// One-step gradient descent with the configured step size.
    GradientDescent,
    /// Least-norm interpolation (requires `N < n`).
    LeastNorm,
    /// Ordinary least squares (requires `N > n`).
    LeastSquares,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    /// Accumulator over every individual loss.
    pub losses: MomentAccumulator,
    /// Distribution of every individual loss.
    pub ecdf: EcdfSummary,
    /// Accumulator over the per-replicate mean losses. Its `stderr()` is the
    /// design-correlation-aware standard error of the run mean.
    pub replicate_means: MomentAccumulator,
    /// Accumulator over the per-replicate mean squared losses; its
    /// `stderr()` is the standard error of the `E[l^2]` estimate.
    pub replicate_sq_means: MomentAccumulator,
}

impl ReplicateSummary {
    /// Estimate of `E[l]`.
    pub fn mean(&self) -> f64 {
        self.losses.mean()
    }

    /// Standard error of [`mean`](Self::mean), from replicate-level spread.
    pub fn mean_stderr(&self) -> f64 {
        self.replicate_means.stderr()
    }

    /// Estimate of `E[l^2]`.
    pub fn second_moment(&self) -> f64 {
        self.losses.second_moment()
    }

    /// Standard error of [`second_moment`](Self::second_moment).
    pub fn second_moment_stderr(&self) -> f64 {
        self.replicate_sq_means.stderr()
    }
}

/// Task with `W0 = 0`, `||W1||_F^2 = signal2` and the configured noise.
fn task_for_config(cfg: &ProblemConfig, seed: u64) -> TaskInstance {
    let mut task = make_task(cfg.dim, cfg.out_dim, true, seed);
    task.w1 *= cfg.signal2.sqrt();
    task.sigma = cfg.sigma();
    task
}

fn fit(
    cfg: &ProblemConfig,
    task: &TaskInstance,
    estimator: Estimator,
    x: &nalgebra::DMatrix<f64>,
    y: &nalgebra::DMatrix<f64>,
) -> Result<nalgebra::DMatrix<f64>, ModelError> {
    match estimator {
        Estimator::GradientDescent => gd_one_step(task, x, y, cfg.eta),
        Estimator::LeastNorm => least_norm_fit(task, x, y),
        Estimator::LeastSquares => least_squares_fit(task, x, y),
    }
}

/// Losses of one replicate: fresh design on stream `stream`, one fit,
/// `tests` evaluations. The design consumes the stream exactly as
/// [`crate::model::sample_design`], whose test pair doubles as the first
/// test here.
fn replicate_losses(
    cfg: &ProblemConfig,
    task: &TaskInstance,
    estimator: Estimator,
    tests: u64,
    seed: u64,
    stream: u64,
) -> Result<Vec<f64>, McError> {
    let mut r = stream_rng(seed, stream);
    let design = draw_design(cfg, &mut r);
    let y = &task.w1 * &design.x + task.sigma * &design.z;
    let w = fit(cfg, task, estimator, &design.x, &y)?;
    // Fixed fit residual for this design; per test only the pair is fresh.
    let d = &task.w1 - &w;
    let mut losses = Vec::with_capacity(tests as usize);
    let mut xhat = design.xhat;
    let mut zhat = design.zhat;
    for t in 0..tests {
        if t > 0 {
            xhat = normal_vector(&mut r, cfg.dim);
            zhat = normal_vector(&mut r, cfg.out_dim);
        }
        let resid = &d * &xhat + task.sigma * &zhat;
        losses.push(resid.norm_squared());
    }
    Ok(losses)
}

struct ChunkResult {
    losses: MomentAccumulator,
    rep_means: MomentAccumulator,
    rep_sq_means: MomentAccumulator,
    store: ChunkStore,
}

enum ChunkStore {
    Exact(Vec<f64>),
    Binned { counts: Vec<u64>, overflow: u64 },
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    cfg: &ProblemConfig,
    task: &TaskInstance,
    estimator: Estimator,
    tests: u64,
    seed: u64,
    first_rep: u64,
    last_rep: u64,
    hist: Option<(f64, f64)>,
) -> Result<ChunkResult, McError> {
    let mut losses_acc = MomentAccumulator::new();
    let mut rep_means = MomentAccumulator::new();
    let mut rep_sq_means = MomentAccumulator::new();
    let mut store = match hist {
        None => ChunkStore::Exact(Vec::with_capacity(((last_rep - first_rep) * tests) as usize)),
        Some(_) => ChunkStore::Binned { counts: vec![0; HISTOGRAM_BINS], overflow: 0 },
    };
    for rep in first_rep..last_rep {
        let losses = replicate_losses(cfg, task, estimator, tests, seed, rep)?;
        let mut sum = 0.0;
        let mut sq_sum = 0.0;
        for &l in &losses {
            losses_acc.accumulate(l)?;
            sum += l;
            sq_sum += l * l;
        }
        rep_means.accumulate(sum / tests as f64)?;
        rep_sq_means.accumulate(sq_sum / tests as f64)?;
        match &mut store {
            ChunkStore::Exact(all) => all.extend_from_slice(&losses),
            ChunkStore::Binned { counts, overflow } => {
                let (lo, hi) = hist.expect("binned store implies edges");
                let width = (hi - lo) / HISTOGRAM_BINS as f64;
                for &l in &losses {
                    if l >= hi {
                        *overflow += 1;
                    } else {
                        let idx = (((l - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                        counts[idx] += 1;
                    }
                }
            }
        }
    }
    Ok(ChunkResult { losses: losses_acc, rep_means, rep_sq_means, store })
}

/// Pilot pass over reserved streams to place the histogram range:
/// `[0, 2 * q_0.9999)` of roughly 10^5 pilot losses.
fn pilot_histogram_range(
    cfg: &ProblemConfig,
    task: &TaskInstance,
    estimator: Estimator,
    tests: u64,
    seed: u64,
) -> Result<(f64, f64), McError> {
    let pilot_reps = (100_000f64 / tests as f64).ceil() as u64;
    let mut losses = Vec::with_capacity((pilot_reps * tests) as usize);
    for i in 0..pilot_reps {
        losses.extend(replicate_losses(
            cfg,
            task,
            estimator,
            tests,
            seed,
            PILOT_STREAM_BASE + i,
        )?);
    }
    let pilot = EcdfSummary::from_losses(losses);
    let hi = 2.0 * pilot.quantile(0.9999);
    Ok((0.0, if hi > 0.0 { hi } else { 1.0 }))
}

/// Simulate `replicates` designs with `tests_per_replicate` losses each.
///
/// Deterministic in `(cfg, estimator, replicates, tests_per_replicate,
/// seed)` regardless of worker count: replicate `r` owns RNG stream `r` and
/// partial accumulators merge in replicate order.
pub fn run_replicates(
    cfg: &ProblemConfig,
    estimator: Estimator,
    replicates: u64,
    tests_per_replicate: u64,
    seed: u64,
) -> Result<ReplicateSummary, McError> {
    if replicates == 0 || tests_per_replicate == 0 {
        return Err(McError::InvalidArgument(
            "replicates and tests_per_replicate must be >= 1".into(),
        ));
    }
    match estimator {
        Estimator::LeastNorm if cfg.pairs >= cfg.dim => {
            return Err(McError::Model(ModelError::Regime(format!(
                "least-norm needs N < n, got N={}, n={}",
                cfg.pairs, cfg.dim
            ))));
        }
        Estimator::LeastSquares if cfg.pairs <= cfg.dim => {
            return Err(McError::Model(ModelError::Regime(format!(
                "least squares needs N > n, got N={}, n={}",
                cfg.pairs, cfg.dim
            ))));
        }
        _ => {}
    }
    let total = replicates
        .checked_mul(tests_per_replicate)
        .filter(|&t| t <= MAX_TOTAL_LOSSES)
        .ok_or(McError::Capacity {
            requested: replicates.saturating_mul(tests_per_replicate),
            limit: MAX_TOTAL_LOSSES,
        })?;

    let task = task_for_config(cfg, seed);
    let hist = if total > EXACT_ECDF_CAPACITY {
        Some(pilot_histogram_range(cfg, &task, estimator, tests_per_replicate, seed)?)
    } else {
        None
    };

    let n_chunks = replicates.div_ceil(CHUNK_REPLICATES);
    let chunks: Vec<ChunkResult> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let first = c * CHUNK_REPLICATES;
            let last = (first + CHUNK_REPLICATES).min(replicates);
            run_chunk(cfg, &task, estimator, tests_per_replicate, seed, first, last, hist)
        })
        .collect::<Result<_, _>>()?;

    // Merge in chunk (replicate) order: the merge tree is fixed.
    let mut losses = MomentAccumulator::new();
    let mut rep_means = MomentAccumulator::new();
    let mut rep_sq_means = MomentAccumulator::new();
    let ecdf = match hist {
        None => {
            let mut all = Vec::with_capacity(total as usize);
            for c in chunks {
                losses = losses.merge(&c.losses);
                rep_means = rep_means.merge(&c.rep_means);
                rep_sq_means = rep_sq_means.merge(&c.rep_sq_means);
                match c.store {
                    ChunkStore::Exact(v) => all.extend(v),
                    ChunkStore::Binned { .. } => unreachable!("exact mode"),
                }
            }
            EcdfSummary::from_losses(all)
        }
        Some((lo, hi)) => {
            let mut counts = vec![0u64; HISTOGRAM_BINS];
            let mut overflow = 0u64;
            for c in chunks {
                losses = losses.merge(&c.losses);
                rep_means = rep_means.merge(&c.rep_means);
                rep_sq_means = rep_sq_means.merge(&c.rep_sq_means);
                match c.store {
                    ChunkStore::Binned { counts: cc, overflow: of } => {
                        for (t, s) in counts.iter_mut().zip(&cc) {
                            *t += s;
                        }
                        overflow += of;
                    }
                    ChunkStore::Exact(_) => unreachable!("binned mode"),
                }
            }
            EcdfSummary::Histogram { lo, hi, counts, overflow, total }
        }
    };

    Ok(ReplicateSummary { losses, ecdf, replicate_means: rep_means, replicate_sq_means: rep_sq_means })
}
