//! Black-box tests of the binary: exit codes, CSV surface erity and
//! reproducibility.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn iclgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclgd"))
        .args(args)
        .output()
        .expect("binary must run")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&iclgd(&["--help"])), 0);
    assert_eq!(code(&iclgd(&["--version"])), 0);
    assert_eq!(code(&iclgd(&["sweep-expected-loss", "--help"])), 0);
}

#[test]
fn unknown_flags_and_bad_values_exit_one() {
    let out = iclgd(&["sweep-expected-loss", "--definitely-not-a-flag"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty(), "diagnostic expected on stderr");

    assert_eq!(code(&iclgd(&["sweep-expected-loss", "--N", "10:5:1", "--no-mc"])), 1);
    assert_eq!(code(&iclgd(&["bound-cdf", "--delta", "0,0.5", "--no-mc"])), 1);
    assert_eq!(code(&iclgd(&["optimal-eta", "--signal2", "0", "--no-mc"])), 1);
    assert_eq!(code(&iclgd(&["sweep-second-moment", "--m", "2", "--no-mc"])), 1);
    // Second moment (hence the bound) is undefined just above the threshold.
    assert_eq!(code(&iclgd(&["bound-cdf", "--estimator", "ls", "--n", "40", "--N", "41", "--no-mc"])), 1);
}

#[test]
fn unwritable_output_exits_one() {
    let out = iclgd(&[
        "sweep-expected-loss",
        "--no-mc",
        "--out",
        "/nonexistent-dir/never/x.csv",
    ]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn analytic_sweep_is_fast_and_matches_closed_form() {
    let start = Instant::now();
    let out = iclgd(&[
        "sweep-expected-loss",
        "--n",
        "40",
        "--eta",
        "1",
        "--signal2",
        "1",
        "--sigma2",
        "1",
        "--N",
        "1:1000:1",
        "--no-mc",
    ]);
    let elapsed = start.elapsed();
    assert_eq!(code(&out), 0);
    assert!(elapsed.as_secs_f64() < 1.0, "analytic sweep took {elapsed:?}");

    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "N,gd_mean_analytic,gd_mean_mc,gd_mean_stderr,ls_mean_analytic,ls_mean_mc,ls_mean_stderr,validity"
    );
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 8);
        let pairs: usize = cells[0].parse().unwrap();
        // Parse-back must reproduce the analytic value bit for bit.
        let gd: f64 = cells[1].parse().unwrap();
        let expect = iclgd::closed_form::gd_expected_loss(40, pairs, 1, 1.0, 1.0, 1.0).mean;
        assert_eq!(gd.to_bits(), expect.to_bits(), "row N={pairs}");
        // Monte Carlo columns stay empty under --no-mc.
        assert!(cells[2].is_empty() && cells[3].is_empty());
        let expect_validity = match pairs {
            39 | 41 => "divergent",
            40 => "undefined-regime",
            _ => "valid",
        };
        assert_eq!(cells[7], expect_validity, "row N={pairs}");
        if pairs == 40 {
            assert!(cells[4].is_empty(), "no ls mean at N = n");
        }
        rows += 1;
    }
    assert_eq!(rows, 1000);
}

#[test]
fn ten_thousand_rows_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let out = iclgd(&[
        "breakdown",
        "--estimator",
        "gd",
        "--moment",
        "second",
        "--N",
        "1:10000:1",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let pairs: usize = cells[0].parse().unwrap();
        let expect = iclgd::closed_form::breakdown(
            iclgd::closed_form::EstimatorFamily::Gd,
            iclgd::closed_form::MomentOrder::Second,
            40,
            pairs,
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        for (cell, value) in cells[1..4].iter().zip([
            expect.systematic,
            expect.interaction,
            expect.noise,
        ]) {
            let back: f64 = cell.parse().unwrap();
            assert_eq!(back.to_bits(), value.to_bits(), "row N={pairs}");
        }
        rows += 1;
    }
    assert_eq!(rows, 10_000);
}

#[test]
fn seeded_runs_reproduce_bytes_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str, name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        let out = iclgd(&[
            "sweep-expected-loss",
            "--quick",
            "--seed",
            "11",
            "--N",
            "10,20,60",
            "--workers",
            workers,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        std::fs::read(&path).unwrap()
    };
    let a = run("1", "a.csv");
    let b = run("2", "b.csv");
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn quick_identity_run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        let out = iclgd(&[
            "verify-identities",
            "--quick",
            "--seed",
            "7",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(&path).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert_eq!(a, b);

    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,n,N,samples,k_sigma,pass,max_z");
    // 26 unconstrained ids * 16 grid points, the sphere pair on 12, the
    // inverse-Wishart ids on 8 + 6 + 6.
    assert_eq!(text.lines().count() - 1, 26 * 16 + 12 + 8 + 6 + 6);
}

#[test]
fn impossible_tolerance_exits_two() {
    // A z-threshold of 1e-4 cannot hold; the run must report verification
    // failure, not success and not a configuration error.
    let out = iclgd(&[
        "verify-identities",
        "--quick",
        "--seed",
        "3",
        "--k-sigma",
        "0.0001",
        "--out",
        Path::new("/dev/null").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn breakdown_rows_sum_and_tag_regimes() {
    let out = iclgd(&[
        "breakdown",
        "--estimator",
        "ls",
        "--moment",
        "second",
        "--N",
        "20,37,40,42,60",
        "--sigma2",
        "1",
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    // N=20: valid and components sum to the total.
    assert_eq!(rows[0][5], "valid");
    let parts: Vec<f64> = rows[0][1..5].iter().map(|c| c.parse().unwrap()).collect();
    assert!((parts[0] + parts[1] + parts[2] - parts[3]).abs() <= 1e-12 * parts[3]);
    // N=37 diverges with noise; N=40 and N=42 fall between the windows;
    // N=60 is back inside the over-parametrized window.
    assert_eq!(rows[1][5], "divergent");
    assert_eq!(rows[2][5], "undefined-regime");
    assert_eq!(rows[3][5], "undefined-regime");
    assert!(rows[2][1].is_empty());
    assert_eq!(rows[4][5], "valid");
}
