//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "iclgd",
    version,
    about = "Generalization-error experiments: one-step gradient descent vs least squares \
             under random Gaussian design, analytic formulas cross-checked by seeded Monte \
             Carlo, emitted as CSV"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-N expected loss: analytic GD and LS means plus Monte Carlo estimates.
    SweepExpectedLoss(SweepArgs),
    /// Per-N second moment E[l^2]: analytic plus Monte Carlo (m = 1).
    SweepSecondMoment(SweepArgs),
    /// Per-delta Chebyshev bound values with empirical exceedance rates.
    BoundCdf(BoundArgs),
    /// Per-N comparison of step size 1 against the optimal step size.
    OptimalEta(OptimalArgs),
    /// Analytic systematic / interaction / noise component split per N.
    Breakdown(BreakdownArgs),
    /// Z-test every identity in the catalog against its sampling oracle.
    VerifyIdentities(IdentityArgs),
}

/// Execution and output controls shared by every subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// RNG seed; identical seeds reproduce output byte for byte.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads (defaults to ICLGD_WORKERS or all cores).
    #[arg(long, env = "ICLGD_WORKERS")]
    pub workers: Option<usize>,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip all Monte Carlo work; emit analytic columns only.
    #[arg(long)]
    pub no_mc: bool,
    /// Cut sample counts to smoke-test levels.
    #[arg(long)]
    pub quick: bool,
}

/// Scenario parameters shared by the model-driven subcommands.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Input dimension n.
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    /// Output dimension m.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Squared signal norm ||W1 - W0||_F^2.
    #[arg(long, default_value_t = 1.0)]
    pub signal2: f64,
    /// Noise variance sigma^2 (default 1 unless noted; exclusive with --snr).
    #[arg(long, conflicts_with = "snr")]
    pub sigma2: Option<f64>,
    /// Signal-to-noise ratio signal2 / sigma^2, as an alternative to --sigma2.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Monte Carlo designs per cell.
    #[arg(long, default_value_t = 10_000)]
    pub replicates: u64,
    /// Loss evaluations per design.
    #[arg(long, default_value_t = 100)]
    pub tests_per_replicate: u64,
}

impl ModelArgs {
    /// Resolve the noise variance from --sigma2 / --snr, with a
    /// command-specific default.
    pub fn sigma2_or(&self, default: f64) -> Result<f64, String> {
        if let Some(v) = self.sigma2 {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("--sigma2 must be finite and >= 0, got {v}"));
            }
            return Ok(v);
        }
        if let Some(r) = self.snr {
            if !(r.is_finite() && r > 0.0) {
                return Err(format!("--snr must be finite and > 0, got {r}"));
            }
            return Ok(self.signal2 / r);
        }
        Ok(default)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// GD step size.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// N grid: `start:stop:step` or a comma list.
    #[arg(long = "N", value_name = "RANGE", default_value = "5:100:5")]
    pub pairs: String,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Which estimator's loss distribution to bound.
    #[arg(long, value_enum, default_value_t = EstimatorArg::Gd)]
    pub estimator: EstimatorArg,
    /// Number of in-context pairs N.
    #[arg(long = "N", default_value_t = 20)]
    pub pairs: usize,
    /// Comma list of failure probabilities delta in (0, 1].
    #[arg(long, value_name = "LIST", default_value = "0.05,0.1,0.2,0.3,0.5,0.8")]
    pub delta: String,
    /// Total Monte Carlo losses for the empirical CDF.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: u64,
}

#[derive(Debug, Args)]
pub struct OptimalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// N grid: `start:stop:step` or a comma list.
    #[arg(long = "N", value_name = "RANGE", default_value = "5:100:5")]
    pub pairs: String,
}

#[derive(Debug, Args)]
pub struct BreakdownArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Which estimator family to decompose.
    #[arg(long, value_enum, default_value_t = EstimatorArg::Gd)]
    pub estimator: EstimatorArg,
    /// Which moment to decompose.
    #[arg(long, value_enum, default_value_t = MomentArg::First)]
    pub moment: MomentArg,
    /// GD step size.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// N grid: `start:stop:step` or a comma list.
    #[arg(long = "N", value_name = "RANGE", default_value = "5:100:5")]
    pub pairs: String,
}

#[derive(Debug, Args)]
pub struct IdentityArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Monte Carlo draws per identity and context.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: u64,
    /// Pass threshold in standard errors.
    #[arg(long, default_value_t = 5.0)]
    pub k_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    /// One-step gradient descent.
    Gd,
    /// Least norm (N < n) / least squares (N > n).
    Ls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MomentArg {
    First,
    Second,
}

/// Parse an `--N` grid: `start:stop:step` (inclusive) or a comma list.
pub fn parse_pairs_grid(text: &str) -> Result<Vec<usize>, String> {
    let values: Vec<usize> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("range must be start:stop:step, got `{text}`"));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad range part `{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        let (start, stop, step) = (nums[0], nums[1], nums[2]);
        if step == 0 {
            return Err("range step must be >= 1".into());
        }
        if start > stop {
            return Err(format!("range start {start} exceeds stop {stop}"));
        }
        (start..=stop).step_by(step).collect()
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad list entry `{p}`: {e}")))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err("empty N grid".into());
    }
    if values.contains(&0) {
        return Err("N values must be >= 1".into());
    }
    Ok(values)
}

/// Parse a comma list of deltas, each in (0, 1].
pub fn parse_delta_list(text: &str) -> Result<Vec<f64>, String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad delta `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err("empty delta list".into());
    }
    for &d in &values {
        if !(d > 0.0 && d <= 1.0) {
            return Err(format!("delta must lie in (0, 1], got {d}"));
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse() {
        assert_eq!(parse_pairs_grid("5:20:5").unwrap(), vec![5, 10, 15, 20]);
        assert_eq!(parse_pairs_grid("5,39,41").unwrap(), vec![5, 39, 41]);
        assert!(parse_pairs_grid("5:1:1").is_err());
        assert!(parse_pairs_grid("5:10:0").is_err());
        assert!(parse_pairs_grid("0,3").is_err());
        assert!(parse_pairs_grid("").is_err());
    }

    #[test]
    fn deltas_parse() {
        assert_eq!(parse_delta_list("0.1,0.5,1").unwrap(), vec![0.1, 0.5, 1.0]);
        assert!(parse_delta_list("0").is_err());
        assert!(parse_delta_list("1.5").is_err());
        assert!(parse_delta_list("x").is_err());
    }
}
