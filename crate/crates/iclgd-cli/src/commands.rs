//! Subcommand implementations.
//!
//! Every command writes one CSV artifact and reports whether all of its
//! checks passed. Checks compare Monte Carlo estimates against the analytic
//! values: means and second moments must sit within 4 standard errors,
//! empirical bound exceedance must stay below `delta + 3 sqrt(delta(1 -
//! delta)/count)`, and identities must pass their z-test at `k_sigma`.
//! Rows whose regime is divergent or undefined carry a validity tag and
//! skip simulation.

use iclgd::closed_form::{
    self, breakdown, gd_chebyshev_bound, gd_expected_loss, gd_optimal_eta, gd_second_moment_m1,
    ls_expected_loss, ls_second_moment, EstimatorFamily, MomentOrder, Validity,
};
use iclgd::identities::{self, IdentityContext, IdentitySpec};
use iclgd::mc::{run_replicates, Estimator, McError, ReplicateSummary};
use iclgd::model::ProblemConfig;
use iclgd::rng::{normal_matrix, normal_vector, stream_rng};
use thiserror::Error;

use crate::args::{
    parse_delta_list, parse_pairs_grid, BoundArgs, BreakdownArgs, EstimatorArg, IdentityArgs,
    MomentArg, OptimalArgs, SweepArgs,
};
use crate::report::{float_cell, opt_float_cell, CsvSink};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Identity grid fixed by the verification protocol.
const IDENTITY_DIMS: [usize; 4] = [1, 2, 5, 10];
const IDENTITY_PAIRS: [usize; 4] = [1, 3, 8, 15];

/// Quick-mode sample counts.
const QUICK_REPLICATES: u64 = 200;
const QUICK_TESTS: u64 = 50;
const QUICK_CDF_SAMPLES: u64 = 10_000;
const QUICK_IDENTITY_SAMPLES: u64 = 20_000;

/// 64-bit mixer for deriving per-cell seeds from (seed, tags).
fn mix_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ tag.rotate_left(17) ^ a.rotate_left(31) ^ b.rotate_left(47);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Monte Carlo estimate with its stderr passing tolerance check.
struct McCheck {
    value: f64,
    stderr: f64,
    pass: bool,
}

fn check_against(value: f64, stderr: f64, analytic: f64) -> McCheck {
    // 4-sigma acceptance window; the absolute epsilon covers exact cases
    // (all losses identical) where the stderr is zero.
    let pass = (value - analytic).abs() <= 4.0 * stderr + 1e-12;
    McCheck { value, stderr, pass }
}

/// The least-squares-family estimator for a regime (None at N = n).
fn ls_estimator(dim: usize, pairs: usize) -> Option<Estimator> {
    match pairs.cmp(&dim) {
        std::cmp::Ordering::Less => Some(Estimator::LeastNorm),
        std::cmp::Ordering::Greater => Some(Estimator::LeastSquares),
        std::cmp::Ordering::Equal => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    dim: usize,
    out_dim: usize,
    pairs: usize,
    eta: f64,
    signal2: f64,
    sigma2: f64,
    estimator: Estimator,
    replicates: u64,
    tests: u64,
    seed: u64,
) -> Result<ReplicateSummary, CliError> {
    let cfg = ProblemConfig::new(dim, out_dim, pairs, eta, sigma2, signal2)
        .map_err(|e| config(e.to_string()))?;
    Ok(run_replicates(&cfg, estimator, replicates, tests, seed)?)
}

pub fn sweep_expected_loss(args: &SweepArgs) -> Result<bool, CliError> {
    let grid = parse_pairs_grid(&args.pairs).map_err(config)?;
    let sigma2 = args.model.sigma2_or(1.0).map_err(config)?;
    let (dim, out_dim, s) = (args.model.n, args.model.m, args.model.signal2);
    let (reps, tests) = if args.run.quick {
        (QUICK_REPLICATES, QUICK_TESTS)
    } else {
        (args.model.replicates, args.model.tests_per_replicate)
    };

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("N,gd_mean_analytic,gd_mean_mc,gd_mean_stderr,ls_mean_analytic,ls_mean_mc,ls_mean_stderr,validity")?;
    let mut all_pass = true;
    for &pairs in &grid {
        let gd_analytic = gd_expected_loss(dim, pairs, out_dim, args.eta, s, sigma2).mean;
        // The least-squares closed forms are stated for m = 1.
        let ls = (out_dim == 1).then(|| ls_expected_loss(dim, pairs, s, sigma2));
        let validity = ls.map_or(Validity::UndefinedRegime, |l| l.validity);

        let mut gd_mc = None;
        let mut ls_mc = None;
        if !args.run.no_mc {
            let summary = simulate(
                dim,
                out_dim,
                pairs,
                args.eta,
                s,
                sigma2,
                Estimator::GradientDescent,
                reps,
                tests,
                mix_seed(args.run.seed, 1, pairs as u64, 0),
            )?;
            let check = check_against(summary.mean(), summary.mean_stderr(), gd_analytic);
            all_pass &= check.pass;
            gd_mc = Some(check);

            if validity == Validity::Valid {
                if let Some(estimator) = ls_estimator(dim, pairs) {
                    let summary = simulate(
                        dim,
                        out_dim,
                        pairs,
                        args.eta,
                        s,
                        sigma2,
                        estimator,
                        reps,
                        tests,
                        mix_seed(args.run.seed, 2, pairs as u64, 0),
                    )?;
                    let analytic = ls.expect("validity implies m = 1").mean;
                    let check = check_against(summary.mean(), summary.mean_stderr(), analytic);
                    all_pass &= check.pass;
                    ls_mc = Some(check);
                }
            }
        }

        sink.row(&[
            pairs.to_string(),
            float_cell(gd_analytic),
            opt_float_cell(gd_mc.as_ref().map(|c| c.value)),
            opt_float_cell(gd_mc.as_ref().map(|c| c.stderr)),
            opt_float_cell(ls.map(|l| l.mean).filter(|m| !m.is_nan())),
            opt_float_cell(ls_mc.as_ref().map(|c| c.value)),
            opt_float_cell(ls_mc.as_ref().map(|c| c.stderr)),
            validity.label().to_string(),
        ])?;
    }
    sink.finish()?;
    Ok(all_pass)
}

pub fn sweep_second_moment(args: &SweepArgs) -> Result<bool, CliError> {
    if args.model.m != 1 {
        return Err(config("second-moment formulas are stated for m = 1"));
    }
    let grid = parse_pairs_grid(&args.pairs).map_err(config)?;
    let sigma2 = args.model.sigma2_or(1.0).map_err(config)?;
    let (dim, s) = (args.model.n, args.model.signal2);
    let (reps, tests) = if args.run.quick {
        (QUICK_REPLICATES, QUICK_TESTS)
    } else {
        (args.model.replicates, args.model.tests_per_replicate)
    };

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("N,gd_m2_analytic,gd_m2_mc,gd_m2_stderr,ls_m2_analytic,ls_m2_mc,ls_m2_stderr,validity")?;
    let mut all_pass = true;
    for &pairs in &grid {
        let gd_analytic = gd_second_moment_m1(dim, pairs, args.eta, s, sigma2)
            .second_moment
            .expect("gd second moment is total");
        let ls = ls_second_moment(dim, pairs, s, sigma2);

        let mut gd_mc = None;
        let mut ls_mc = None;
        if !args.run.no_mc {
            let summary = simulate(
                dim,
                1,
                pairs,
                args.eta,
                s,
                sigma2,
                Estimator::GradientDescent,
                reps,
                tests,
                mix_seed(args.run.seed, 3, pairs as u64, 0),
            )?;
            let check =
                check_against(summary.second_moment(), summary.second_moment_stderr(), gd_analytic);
            all_pass &= check.pass;
            gd_mc = Some(check);

            if ls.validity == Validity::Valid {
                if let Some(estimator) = ls_estimator(dim, pairs) {
                    let summary = simulate(
                        dim,
                        1,
                        pairs,
                        args.eta,
                        s,
                        sigma2,
                        estimator,
                        reps,
                        tests,
                        mix_seed(args.run.seed, 4, pairs as u64, 0),
                    )?;
                    let check = check_against(
                        summary.second_moment(),
                        summary.second_moment_stderr(),
                        ls.second_moment.expect("valid implies populated"),
                    );
                    all_pass &= check.pass;
                    ls_mc = Some(check);
                }
            }
        }

        sink.row(&[
            pairs.to_string(),
            float_cell(gd_analytic),
            opt_float_cell(gd_mc.as_ref().map(|c| c.value)),
            opt_float_cell(gd_mc.as_ref().map(|c| c.stderr)),
            opt_float_cell(ls.second_moment),
            opt_float_cell(ls_mc.as_ref().map(|c| c.value)),
            opt_float_cell(ls_mc.as_ref().map(|c| c.stderr)),
            ls.validity.label().to_string(),
        ])?;
    }
    sink.finish()?;
    Ok(all_pass)
}

pub fn bound_cdf(args: &BoundArgs) -> Result<bool, CliError> {
    if args.model.m != 1 {
        return Err(config("loss bounds are stated for m = 1"));
    }
    let deltas = parse_delta_list(&args.delta).map_err(config)?;
    let sigma2 = args.model.sigma2_or(1.0).map_err(config)?;
    let (dim, pairs, s) = (args.model.n, args.pairs, args.model.signal2);

    // Per-delta bound: mean + sqrt(Var / delta). For GD this is the
    // step-size-1 closed form; for LS the variance comes from the
    // second-moment formulas, which must be in a valid regime.
    let bound_at: Box<dyn Fn(f64) -> f64> = match args.estimator {
        EstimatorArg::Gd => Box::new(move |d| {
            gd_chebyshev_bound(dim, pairs, d, s, sigma2, false)
                .expect("deltas validated")
                .bound
        }),
        EstimatorArg::Ls => {
            let moments = ls_second_moment(dim, pairs, s, sigma2);
            if moments.validity != Validity::Valid {
                return Err(config(format!(
                    "least-squares bound needs a valid second moment (N > n+3 or n >= N+3 \
                     away from the divergence), got n={dim}, N={pairs} ({})",
                    moments.validity.label()
                )));
            }
            let mean = moments.mean;
            let var = moments.variance.expect("valid implies populated");
            Box::new(move |d| mean + (var / d).sqrt())
        }
    };
    let mean_term = match args.estimator {
        EstimatorArg::Gd => (s * (dim as f64 + 1.0) + sigma2 * (dim as f64 + pairs as f64)) / pairs as f64,
        EstimatorArg::Ls => ls_expected_loss(dim, pairs, s, sigma2).mean,
    };

    let samples = if args.run.quick { QUICK_CDF_SAMPLES } else { args.samples };
    let tests = args.model.tests_per_replicate;
    let summary = if args.run.no_mc {
        None
    } else {
        let estimator = match args.estimator {
            EstimatorArg::Gd => Estimator::GradientDescent,
            EstimatorArg::Ls => ls_estimator(dim, pairs)
                .ok_or_else(|| config(format!("no least-squares estimator at N = n = {dim}")))?,
        };
        let replicates = samples.div_ceil(tests);
        Some(simulate(
            dim,
            1,
            pairs,
            1.0,
            s,
            sigma2,
            estimator,
            replicates,
            tests,
            mix_seed(args.run.seed, 5, pairs as u64, 0),
        )?)
    };

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("delta,mean_term,deviation_term,bound,exceedance_mc,exceedance_limit,validity")?;
    let mut all_pass = true;
    for &delta in &deltas {
        let bound = bound_at(delta);
        let (exceed, limit) = match &summary {
            None => (None, None),
            Some(summary) => {
                let total = summary.losses.count() as f64;
                let exceed = summary.ecdf.exceedance_rate(bound);
                let limit = delta + 3.0 * (delta * (1.0 - delta) / total).sqrt();
                all_pass &= exceed <= limit;
                (Some(exceed), Some(limit))
            }
        };
        sink.row(&[
            float_cell(delta),
            float_cell(mean_term),
            float_cell(bound - mean_term),
            float_cell(bound),
            opt_float_cell(exceed),
            opt_float_cell(limit),
            Validity::Valid.label().to_string(),
        ])?;
    }
    sink.finish()?;
    Ok(all_pass)
}

pub fn optimal_eta(args: &OptimalArgs) -> Result<bool, CliError> {
    if args.model.m != 1 {
        return Err(config("the step-size comparison is stated for m = 1"));
    }
    if args.model.signal2 <= 0.0 {
        return Err(config("optimal-eta requires signal2 > 0"));
    }
    // The reference regime is noiseless; pass --sigma2/--snr to add noise.
    let sigma2 = args.model.sigma2_or(0.0).map_err(config)?;
    let grid = parse_pairs_grid(&args.pairs).map_err(config)?;
    let (dim, s) = (args.model.n, args.model.signal2);
    let snr_inverse = sigma2 / s;
    let (reps, tests) = if args.run.quick {
        (QUICK_REPLICATES, QUICK_TESTS)
    } else {
        (args.model.replicates, args.model.tests_per_replicate)
    };

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("N,eta_opt,mean_eta1_analytic,mean_eta1_mc,mean_eta1_stderr,mean_etaopt_analytic,mean_etaopt_mc,mean_etaopt_stderr,validity")?;
    let mut all_pass = true;
    for &pairs in &grid {
        let eta_opt = gd_optimal_eta(dim, pairs, snr_inverse);
        let mean_one = gd_expected_loss(dim, pairs, 1, 1.0, s, sigma2).mean;
        let mean_opt = gd_expected_loss(dim, pairs, 1, eta_opt, s, sigma2).mean;

        let mut one_mc = None;
        let mut opt_mc = None;
        if !args.run.no_mc {
            // Both step sizes share the same seed so the comparison runs on
            // common designs.
            let seed = mix_seed(args.run.seed, 6, pairs as u64, 0);
            let summary =
                simulate(dim, 1, pairs, 1.0, s, sigma2, Estimator::GradientDescent, reps, tests, seed)?;
            let check = check_against(summary.mean(), summary.mean_stderr(), mean_one);
            all_pass &= check.pass;
            one_mc = Some(check);

            let summary = simulate(
                dim,
                1,
                pairs,
                eta_opt,
                s,
                sigma2,
                Estimator::GradientDescent,
                reps,
                tests,
                seed,
            )?;
            let check = check_against(summary.mean(), summary.mean_stderr(), mean_opt);
            all_pass &= check.pass;
            opt_mc = Some(check);
        }

        sink.row(&[
            pairs.to_string(),
            float_cell(eta_opt),
            float_cell(mean_one),
            opt_float_cell(one_mc.as_ref().map(|c| c.value)),
            opt_float_cell(one_mc.as_ref().map(|c| c.stderr)),
            float_cell(mean_opt),
            opt_float_cell(opt_mc.as_ref().map(|c| c.value)),
            opt_float_cell(opt_mc.as_ref().map(|c| c.stderr)),
            Validity::Valid.label().to_string(),
        ])?;
    }
    sink.finish()?;
    Ok(all_pass)
}

pub fn breakdown_cmd(args: &BreakdownArgs) -> Result<bool, CliError> {
    if args.model.m != 1 {
        return Err(config("component breakdowns are stated for m = 1"));
    }
    let grid = parse_pairs_grid(&args.pairs).map_err(config)?;
    let sigma2 = args.model.sigma2_or(1.0).map_err(config)?;
    let (dim, s) = (args.model.n, args.model.signal2);
    let family = match args.estimator {
        EstimatorArg::Gd => EstimatorFamily::Gd,
        EstimatorArg::Ls => EstimatorFamily::Ls,
    };
    let order = match args.moment {
        MomentArg::First => MomentOrder::First,
        MomentArg::Second => MomentOrder::Second,
    };

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("N,systematic,interaction,noise,total,validity")?;
    for &pairs in &grid {
        match breakdown(family, order, dim, pairs, args.eta, s, sigma2) {
            Ok(b) => {
                let validity = if b.total().is_finite() {
                    Validity::Valid
                } else {
                    Validity::Divergent
                };
                sink.row(&[
                    pairs.to_string(),
                    float_cell(b.systematic),
                    float_cell(b.interaction),
                    float_cell(b.noise),
                    float_cell(b.total()),
                    validity.label().to_string(),
                ])?;
            }
            Err(closed_form::ClosedFormError::UndefinedRegime(_)) => {
                sink.row(&[
                    pairs.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    Validity::UndefinedRegime.label().to_string(),
                ])?;
            }
            Err(e) => return Err(config(e.to_string())),
        }
    }
    sink.finish()?;
    Ok(true)
}

/// Seeded inputs for one identity check: symmetric B where required,
/// general B otherwise, and a Gaussian b.
pub fn identity_context(
    spec: &IdentitySpec,
    dim: usize,
    pairs: usize,
    seed: u64,
) -> IdentityContext {
    let mut ctx = IdentityContext::new(dim, pairs);
    if spec.needs_matrix() {
        let g = normal_matrix(&mut stream_rng(seed, 10), dim, dim);
        let b = if spec.needs_symmetric_matrix() { (&g + g.transpose()) * 0.5 } else { g };
        ctx = ctx.with_matrix(b);
    }
    if spec.needs_vector() {
        ctx = ctx.with_vector(normal_vector(&mut stream_rng(seed, 11), dim));
    }
    ctx
}

pub fn verify_identities(args: &IdentityArgs) -> Result<bool, CliError> {
    // NaN fails this check too.
    let threshold_ok = args.k_sigma > 0.0;
    if !threshold_ok {
        return Err(config(format!("--k-sigma must be positive, got {}", args.k_sigma)));
    }
    let samples = if args.run.quick { QUICK_IDENTITY_SAMPLES } else { args.samples };
    if samples == 0 {
        return Err(config("--samples must be >= 1"));
    }

    let mut sink = CsvSink::create(args.run.out.as_deref())?;
    sink.header("id,n,N,samples,k_sigma,pass,max_z")?;
    let mut all_pass = true;
    for spec in identities::catalog() {
        for &dim in &IDENTITY_DIMS {
            for &pairs in &IDENTITY_PAIRS {
                if !spec.constraint.holds(dim, pairs) {
                    continue;
                }
                let cell_seed = mix_seed(args.run.seed, spec.id as u64, dim as u64, pairs as u64);
                let ctx = identity_context(spec, dim, pairs, cell_seed);
                let report = identities::verify(spec.id, &ctx, samples, cell_seed, args.k_sigma)
                    .map_err(|e| config(e.to_string()))?;
                all_pass &= report.pass;
                sink.row(&[
                    spec.id.to_string(),
                    dim.to_string(),
                    pairs.to_string(),
                    samples.to_string(),
                    float_cell(args.k_sigma),
                    report.pass.to_string(),
                    float_cell(report.max_z),
                ])?;
            }
        }
    }
    sink.finish()?;
    Ok(all_pass)
}
