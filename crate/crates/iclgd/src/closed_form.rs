//! Exact moments, variances, bounds and step sizes for the generalization
//! loss under random Gaussian design.
//!
//! Notation throughout: `n` input dimension, `N` in-context pairs, `m` output
//! dimension, `s = ||W1 - W0||_F^2` (signal), `v = sigma^2` (noise variance),
//! `a = eta / N`.
//!
//! Key formulas implemented here, all in their factored printed forms to
//! avoid cancellation between large polynomial terms:
//!
//! - one-step GD mean: `E[l] = s((1-eta)^2 + eta^2 (n+1)/N) + v m (1 + eta^2 n/N)`
//! - GD systematic second moment, any step size:
//!   `(1 + aN(-4 + a(2(5+n+3N) + a(2+N)(3+n+N)(-4 + a(5+n+N))))) (2 Tr[B^2] + Tr[B]^2)`
//! - GD full second moment (m = 1), any step size, assembled from the
//!   Gaussian matrix-moment identities;
//! - the step-size-1 variance `V` and the Chebyshev tail bound
//!   `l <= mean + sqrt(V/delta)` holding with probability at least `1 - delta`;
//! - least-norm / least-squares means and second moments in both regimes.
//!
//! Validity windows are explicit: denominators that hit zero inside a stated
//! regime report `Divergent` (+inf) rather than an error — the blow-up at the
//! interpolation threshold is a real phenomenon — while parameter ranges the
//! formulas are not stated for report `UndefinedRegime`.

use thiserror::Error;

/// Where a closed-form value stands relative to its validity window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    /// Inside the stated regime with finite value.
    Valid,
    /// Inside the stated regime but on a singular denominator: value is +inf.
    Divergent,
    /// Outside every stated regime: no formula applies.
    UndefinedRegime,
}

impl Validity {
    /// Stable lower-case label used in CSV output.
    pub fn label(&self) -> &'static str {
        match self {
            Validity::Valid => "valid",
            Validity::Divergent => "divergent",
            Validity::UndefinedRegime => "undefined-regime",
        }
    }
}

/// Analytic mean / second moment / variance triple with a validity tag.
///
/// `second_moment` and `variance` are `None` for mean-only results and for
/// regimes where no second-moment formula is stated. For `Divergent` results
/// the offending entries are `+inf`; for `UndefinedRegime` the mean is `NaN`
/// unless a mean formula still applies (see [`ls_second_moment`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMoments {
    pub mean: f64,
    pub second_moment: Option<f64>,
    pub variance: Option<f64>,
    pub validity: Validity,
}

impl LossMoments {
    fn mean_only(mean: f64, validity: Validity) -> Self {
        Self { mean, second_moment: None, variance: None, validity }
    }
}

/// Decomposition of an analytic total into signal-only, mixed and noise-only
/// term groups. The three components always sum to the corresponding total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    /// Terms in powers of `||W1 - W0||` only.
    pub systematic: f64,
    /// Mixed `sigma^2 * signal` terms.
    pub interaction: f64,
    /// Terms in powers of `sigma` only.
    pub noise: f64,
}

impl Breakdown {
    /// Component sum.
    pub fn total(&self) -> f64 {
        self.systematic + self.interaction + self.noise
    }
}

/// A probability-`1 - delta` tail bound `bound = mean_term + deviation_term`
/// with `deviation_term = sqrt(V / delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub delta: f64,
    pub mean_term: f64,
    pub deviation_term: f64,
    pub bound: f64,
}

/// Estimator family selector for [`breakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorFamily {
    /// One-step gradient descent.
    Gd,
    /// Least norm (`N < n`) / least squares (`N > n`).
    Ls,
}

/// Moment order selector for [`breakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    First,
    Second,
}

/// Errors for requests outside what the closed forms support.
#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("delta must lie in (0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("the large-n bound is stated for the noiseless case only (sigma2 = {0})")]
    LargeNRequiresNoiseless(f64),
    #[error("no closed form applies: {0}")]
    UndefinedRegime(String),
}

/// Expected one-step GD loss.
///
/// `E[l] = s ((1-eta)^2 + eta^2 (n+1)/N) + v m (1 + eta^2 n/N)`.
///
/// The noise term carries the output dimension `m` as a common factor: the
/// test-noise part contributes `v m` and the design-noise part
/// `v eta^2 n m / N` (each of the `m` rows of the noise matrix feeds the
/// update independently). For `m = 1` this is exactly Eq. (2.1). Always
/// finite; no singular denominators.
pub fn gd_expected_loss(
    dim: usize,
    pairs: usize,
    out_dim: usize,
    eta: f64,
    signal2: f64,
    sigma2: f64,
) -> LossMoments {
    let (n, nn, m) = (dim as f64, pairs as f64, out_dim as f64);
    let sys = signal2 * ((1.0 - eta) * (1.0 - eta) + eta * eta * (n + 1.0) / nn);
    let noise = sigma2 * m * (1.0 + eta * eta * n / nn);
    LossMoments::mean_only(sys + noise, Validity::Valid)
}

/// Step size minimizing the expected GD loss:
/// `eta_opt = N / (N + n + 1 + snr_inverse * n)` where
/// `snr_inverse = sigma^2 / ||W1 - W0||^2`.
///
/// Pass `snr_inverse = 0` for the practical rule `N / (N + n + 1)` used when
/// the noise level is unknown. Result lies in `(0, 1)` for finite
/// `snr_inverse`.
pub fn gd_optimal_eta(dim: usize, pairs: usize, snr_inverse: f64) -> f64 {
    let (n, nn) = (dim as f64, pairs as f64);
    nn / (nn + n + 1.0 + snr_inverse * n)
}

/// Systematic-only (noiseless) second moment of the GD loss at any step
/// size, for `B = (W1-W0)^T (W1-W0)` described by `tr_b = Tr[B]` and
/// `tr_b2 = Tr[B^2]`:
///
/// `E[l_sys^2] = (1 + aN(-4 + a(2(5+n+3N) + a(2+N)(3+n+N)(-4 + a(5+n+N)))))
///               * (2 tr_b2 + tr_b^2)`, with `a = eta/N`.
pub fn gd_sys_second_moment(dim: usize, pairs: usize, eta: f64, tr_b: f64, tr_b2: f64) -> f64 {
    let (n, nn) = (dim as f64, pairs as f64);
    let a = eta / nn;
    let poly = 1.0
        + a * nn
            * (-4.0
                + a * (2.0 * (5.0 + n + 3.0 * nn)
                    + a * (2.0 + nn) * (3.0 + n + nn) * (-4.0 + a * (5.0 + n + nn))));
    poly * (2.0 * tr_b2 + tr_b * tr_b)
}

/// The three term groups of the m = 1 GD second moment at step size
/// `eta = a N`: (systematic, interaction, noise). Components of
/// [`gd_second_moment_m1`] and of [`breakdown`].
fn gd_second_components(
    dim: usize,
    pairs: usize,
    eta: f64,
    signal2: f64,
    sigma2: f64,
) -> (f64, f64, f64) {
    let (n, nn) = (dim as f64, pairs as f64);
    let a = eta / nn;
    let (s, v) = (signal2, sigma2);

    // sigma^4 group.
    let a2 = a * a;
    let a4 = a2 * a2;
    let noise = 6.0 * a4 * v * v * nn * n * (nn + n + 1.0)
        + 3.0 * a4 * v * v * nn * (2.0 * n + nn * n * n)
        + 6.0 * v * v * a2 * n * nn
        + 3.0 * v * v;

    // sigma^2 * signal group.
    let interaction = 12.0
        * a2
        * v
        * s
        * (nn - 2.0 * a * nn * (nn + n + 1.0)
            + a2 * nn * (4.0 + n * n + 3.0 * n * (1.0 + nn) + nn * (3.0 + nn)))
        + 6.0 * a2
            * v
            * s
            * (nn * n - 2.0 * a * nn * (2.0 + nn * n)
                + a2 * nn * (1.0 + n + nn) * (4.0 + n * nn))
        + 6.0 * v * s * (1.0 - 2.0 * a * nn + a2 * nn * (nn + n + 1.0));

    // Pure signal group: rank-one B with Tr[B] = s, Tr[B^2] = s^2.
    let systematic = gd_sys_second_moment(dim, pairs, eta, s, s * s);

    (systematic, interaction, noise)
}

/// Full second moment and variance of the m = 1 GD loss at any step size.
///
/// The mean comes from [`gd_expected_loss`]; the second moment assembles the
/// noise, interaction and systematic term groups of the general-step-size
/// expansion; the variance is their difference. Always finite.
pub fn gd_second_moment_m1(
    dim: usize,
    pairs: usize,
    eta: f64,
    signal2: f64,
    sigma2: f64,
) -> LossMoments {
    let mean = gd_expected_loss(dim, pairs, 1, eta, signal2, sigma2).mean;
    let (sys, inter, noise) = gd_second_components(dim, pairs, eta, signal2, sigma2);
    let second = sys + inter + noise;
    LossMoments {
        mean,
        second_moment: Some(second),
        variance: Some(second - mean * mean),
        validity: Validity::Valid,
    }
}

/// The step-size-1 loss variance `V` (m = 1):
///
/// ```text
/// V = v^2 (2 + (12n+6n^2)/N^3 + (6n+2n^2)/N^2 + 4n/N)
///   + v s ((72+60n+12n^2)/N^3 + (12+16n+4n^2)/N^2 + (4+4n)/N)
///   + s^2 ((90+48n+6n^2)/N^3 + (20+10n+2n^2)/N^2)
/// ```
pub fn gd_variance_eta1(dim: usize, pairs: usize, signal2: f64, sigma2: f64) -> f64 {
    let (n, nn) = (dim as f64, pairs as f64);
    let (s, v) = (signal2, sigma2);
    let (n2, nn2, nn3) = (n * n, nn * nn, nn * nn * nn);
    v * v
        * (2.0 + (12.0 * n + 6.0 * n2) / nn3 + (6.0 * n + 2.0 * n2) / nn2 + 4.0 * n / nn)
        + v * s
            * ((72.0 + 60.0 * n + 12.0 * n2) / nn3
                + (12.0 + 16.0 * n + 4.0 * n2) / nn2
                + (4.0 + 4.0 * n) / nn)
        + s * s * ((90.0 + 48.0 * n + 6.0 * n2) / nn3 + (20.0 + 10.0 * n + 2.0 * n2) / nn2)
}

/// Chebyshev tail bound on the step-size-1 GD loss (m = 1): with probability
/// at least `1 - delta`,
///
/// `l <= (s(n+1) + v(n+N))/N + sqrt(V/delta)`.
///
/// With `large_n` set (noiseless case only) the simplified form
/// `l <= (n/N)(1 + sqrt(2/delta)) s` is returned instead. The variance `V`
/// is derived for step size 1 only, so no `eta` parameter is offered;
/// general-step bounds can be assembled from [`gd_second_moment_m1`].
pub fn gd_chebyshev_bound(
    dim: usize,
    pairs: usize,
    delta: f64,
    signal2: f64,
    sigma2: f64,
    large_n: bool,
) -> Result<BoundResult, ClosedFormError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ClosedFormError::DeltaOutOfRange(delta));
    }
    let (n, nn) = (dim as f64, pairs as f64);
    if large_n {
        if sigma2 > 0.0 {
            return Err(ClosedFormError::LargeNRequiresNoiseless(sigma2));
        }
        let mean_term = n / nn * signal2;
        let deviation_term = n / nn * (2.0 / delta).sqrt() * signal2;
        return Ok(BoundResult {
            delta,
            mean_term,
            deviation_term,
            bound: mean_term + deviation_term,
        });
    }
    let mean_term = (signal2 * (n + 1.0) + sigma2 * (n + nn)) / nn;
    let variance = gd_variance_eta1(dim, pairs, signal2, sigma2);
    let deviation_term = (variance / delta).sqrt();
    Ok(BoundResult { delta, mean_term, deviation_term, bound: mean_term + deviation_term })
}

/// Mean pieces (systematic, noise, validity) of the least-norm /
/// least-squares loss. `None` when `N = n`.
fn ls_mean_components(
    dim: usize,
    pairs: usize,
    signal2: f64,
    sigma2: f64,
) -> Option<(f64, f64, Validity)> {
    let (n, nn) = (dim as f64, pairs as f64);
    if pairs == dim {
        return None;
    }
    if pairs < dim {
        // Least norm: E[l] = s(1 - N/n) + v(1 + N/(n-N-1)), 1 <= N <= n-1.
        let sys = signal2 * (1.0 - nn / n);
        if sigma2 == 0.0 {
            Some((sys, 0.0, Validity::Valid))
        } else if pairs + 1 == dim {
            Some((sys, f64::INFINITY, Validity::Divergent))
        } else {
            Some((sys, sigma2 * (1.0 + nn / (n - nn - 1.0)), Validity::Valid))
        }
    } else {
        // Least squares: E[l] = v(1 + n/(N-n-1)), N >= n+1; no systematic term.
        if sigma2 == 0.0 {
            Some((0.0, 0.0, Validity::Valid))
        } else if pairs == dim + 1 {
            Some((0.0, f64::INFINITY, Validity::Divergent))
        } else {
            Some((0.0, sigma2 * (1.0 + n / (nn - n - 1.0)), Validity::Valid))
        }
    }
}

/// Expected least-norm (`N < n`) / least-squares (`N > n`) loss.
///
/// At `N = n` no closed form applies (`UndefinedRegime`, mean `NaN`). The
/// noise denominators vanish at `N = n-1` and `N = n+1`; with positive noise
/// those points report `Divergent` with mean +inf.
pub fn ls_expected_loss(dim: usize, pairs: usize, signal2: f64, sigma2: f64) -> LossMoments {
    match ls_mean_components(dim, pairs, signal2, sigma2) {
        None => LossMoments::mean_only(f64::NAN, Validity::UndefinedRegime),
        Some((sys, noise, validity)) => LossMoments::mean_only(sys + noise, validity),
    }
}

/// Second-moment pieces (systematic, interaction, noise, validity) of the
/// least-norm / least-squares loss. `None` outside the stated windows
/// `N > n+3` and `n >= N+3`.
fn ls_second_components(
    dim: usize,
    pairs: usize,
    signal2: f64,
    sigma2: f64,
) -> Option<(f64, f64, f64, Validity)> {
    let (n, nn) = (dim as f64, pairs as f64);
    let (s, v) = (signal2, sigma2);
    if pairs > dim + 3 {
        // Over-parametrized: E[l^2] = 3 v^2 (N-1)(N-3) / ((N-n-1)(N-n-3)).
        let noise = 3.0 * v * v * (nn - 1.0) * (nn - 3.0) / ((nn - n - 1.0) * (nn - n - 3.0));
        Some((0.0, 0.0, noise, Validity::Valid))
    } else if dim >= pairs + 3 {
        // Under-parametrized three-term formula; the pure-noise denominator
        // (n-N-3) vanishes at n = N+3, where the formula diverges.
        let sys = 3.0 * s * s * (n - nn) * (n - nn + 2.0) / (n * (n + 2.0));
        if v == 0.0 {
            Some((sys, 0.0, 0.0, Validity::Valid))
        } else if dim == pairs + 3 {
            Some((sys, 6.0 * v * s * (n - 1.0) * (n - nn) / (n * (n - nn - 1.0)), f64::INFINITY, Validity::Divergent))
        } else {
            let noise =
                3.0 * v * v * (n - 1.0) * (n - 3.0) / ((n - nn - 1.0) * (n - nn - 3.0));
            let inter = 6.0 * v * s * (n - 1.0) * (n - nn) / (n * (n - nn - 1.0));
            Some((sys, inter, noise, Validity::Valid))
        }
    } else {
        None
    }
}

/// Second moment and variance of the least-norm / least-squares loss.
///
/// Stated only for `N > n+3` (over-parametrized) and `n >= N+3`
/// (under-parametrized); the window in between reports `UndefinedRegime`
/// (the mean, when itself defined, is still carried in `mean`). Inside the
/// under-parametrized window the pure-noise term diverges at `n = N+3` for
/// positive noise.
pub fn ls_second_moment(dim: usize, pairs: usize, signal2: f64, sigma2: f64) -> LossMoments {
    let base = ls_expected_loss(dim, pairs, signal2, sigma2);
    match ls_second_components(dim, pairs, signal2, sigma2) {
        None => LossMoments {
            mean: base.mean,
            second_moment: None,
            variance: None,
            validity: Validity::UndefinedRegime,
        },
        Some((sys, inter, noise, validity)) => {
            let second = sys + inter + noise;
            // Both stated windows keep the mean's denominators away from
            // zero, so the mean is finite here and the variance is always
            // computable (infinite exactly when the second moment is).
            LossMoments {
                mean: base.mean,
                second_moment: Some(second),
                variance: Some(second - base.mean * base.mean),
                validity,
            }
        }
    }
}

/// Split an analytic total into (signal-only, mixed, noise-only) groups.
///
/// First moments have no mixed terms; second moments do. GD second moments
/// are available for `m = 1` only, and least-squares totals follow the same
/// validity windows as [`ls_expected_loss`] / [`ls_second_moment`]
/// (`UndefinedRegime` becomes an error here; divergent groups are +inf).
pub fn breakdown(
    estimator: EstimatorFamily,
    moment: MomentOrder,
    dim: usize,
    pairs: usize,
    eta: f64,
    signal2: f64,
    sigma2: f64,
) -> Result<Breakdown, ClosedFormError> {
    let (n, nn) = (dim as f64, pairs as f64);
    match (estimator, moment) {
        (EstimatorFamily::Gd, MomentOrder::First) => Ok(Breakdown {
            systematic: signal2 * ((1.0 - eta) * (1.0 - eta) + eta * eta * (n + 1.0) / nn),
            interaction: 0.0,
            noise: sigma2 * (1.0 + eta * eta * n / nn),
        }),
        (EstimatorFamily::Gd, MomentOrder::Second) => {
            let (systematic, interaction, noise) =
                gd_second_components(dim, pairs, eta, signal2, sigma2);
            Ok(Breakdown { systematic, interaction, noise })
        }
        (EstimatorFamily::Ls, MomentOrder::First) => {
            let (systematic, noise, _) = ls_mean_components(dim, pairs, signal2, sigma2)
                .ok_or_else(|| {
                    ClosedFormError::UndefinedRegime(format!(
                        "least-squares mean is not defined at N = n = {dim}"
                    ))
                })?;
            Ok(Breakdown { systematic, interaction: 0.0, noise })
        }
        (EstimatorFamily::Ls, MomentOrder::Second) => {
            let (systematic, interaction, noise, _) =
                ls_second_components(dim, pairs, signal2, sigma2).ok_or_else(|| {
                    ClosedFormError::UndefinedRegime(format!(
                        "least-squares second moment needs N > n+3 or n >= N+3, \
                         got n={dim}, N={pairs}"
                    ))
                })?;
            Ok(Breakdown { systematic, interaction, noise })
        }
    }
}
