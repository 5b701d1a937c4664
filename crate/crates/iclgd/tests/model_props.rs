//! Property tests for the estimators: linearity, minimality, optimality
//! conditions and exact recovery.

use iclgd::model::{
    gd_one_step, least_norm_fit, least_squares_fit, point_loss, sample_design, ProblemConfig,
    TaskInstance,
};
use iclgd::rng::{normal_matrix, normal_vector, stream_rng};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn zero_task(dim: usize, out_dim: usize) -> TaskInstance {
    TaskInstance {
        w0: DMatrix::zeros(out_dim, dim),
        w1: DMatrix::zeros(out_dim, dim),
        sigma: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // With W0 = 0 the gradient step is a linear map of Y.
    #[test]
    fn gd_step_is_linear_in_y(
        seed in 0u64..10_000,
        dim in 1usize..8,
        out_dim in 1usize..4,
        pairs in 1usize..8,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        eta in 0.0f64..2.0,
    ) {
        let mut r = stream_rng(seed, 0);
        let task = zero_task(dim, out_dim);
        let x = normal_matrix(&mut r, dim, pairs);
        let y1 = normal_matrix(&mut r, out_dim, pairs);
        let y2 = normal_matrix(&mut r, out_dim, pairs);

        let combo = gd_one_step(&task, &x, &(&y1 * alpha + &y2 * beta), eta).unwrap();
        let split = gd_one_step(&task, &x, &y1, eta).unwrap() * alpha
            + gd_one_step(&task, &x, &y2, eta).unwrap() * beta;
        let scale = combo.amax().max(split.amax()).max(1e-30);
        prop_assert!((combo - split).amax() <= 1e-12 * scale);
    }

    // The least-norm fit interpolates and beats every other interpolant
    // W + C(I - P) in distance to W0.
    #[test]
    fn least_norm_is_minimal_interpolant(
        seed in 0u64..10_000,
        dim in 2usize..9,
        out_dim in 1usize..4,
    ) {
        let mut r = stream_rng(seed, 1);
        let pairs = 1 + (seed as usize % (dim - 1));
        let x = normal_matrix(&mut r, dim, pairs);
        let y = normal_matrix(&mut r, out_dim, pairs);
        let w0 = normal_matrix(&mut r, out_dim, dim);
        let task = TaskInstance { w0: w0.clone(), w1: DMatrix::zeros(out_dim, dim), sigma: 0.0 };

        let w = least_norm_fit(&task, &x, &y).unwrap();
        prop_assert!((&w * &x - &y).norm() <= 1e-8 * y.norm().max(1.0));

        let gram_inv = (x.transpose() * &x).try_inverse().unwrap();
        let proj = &x * gram_inv * x.transpose();
        let complement = DMatrix::identity(dim, dim) - proj;
        let c = normal_matrix(&mut r, out_dim, dim);
        let other = &w + c * complement;
        prop_assert!((&other * &x - &y).norm() <= 1e-6 * y.norm().max(1.0));
        prop_assert!((&w - &w0).norm() <= (other - &w0).norm() + 1e-9);
    }

    // First-order optimality of least squares: residual orthogonal to the
    // covariates.
    #[test]
    fn least_squares_satisfies_normal_equations(
        seed in 0u64..10_000,
        dim in 1usize..6,
        out_dim in 1usize..4,
        extra in 1usize..8,
    ) {
        let mut r = stream_rng(seed, 2);
        let pairs = dim + extra;
        let x = normal_matrix(&mut r, dim, pairs);
        let y = normal_matrix(&mut r, out_dim, pairs);
        let task = zero_task(dim, out_dim);
        let w = least_squares_fit(&task, &x, &y).unwrap();
        let resid = (&w * &x - &y) * x.transpose();
        prop_assert!(resid.norm() <= 1e-8 * y.norm() * x.norm());
    }

    #[test]
    fn point_loss_is_nonnegative(
        seed in 0u64..10_000,
        dim in 1usize..6,
        out_dim in 1usize..4,
        sigma in 0.0f64..3.0,
    ) {
        let mut r = stream_rng(seed, 3);
        let mut task = iclgd::model::make_task(dim, out_dim, false, seed);
        task.sigma = sigma;
        let w = normal_matrix(&mut r, out_dim, dim);
        let xhat = normal_vector(&mut r, dim);
        let zhat = normal_vector(&mut r, out_dim);
        prop_assert!(point_loss(&w, &task, &xhat, &zhat).unwrap() >= 0.0);
    }
}

// Exact noiseless recovery on a fixed batch of a hundred designs.
#[test]
fn least_squares_recovers_truth_on_100_designs() {
    let cfg = ProblemConfig::new(6, 2, 8, 1.0, 0.0, 1.0).unwrap();
    let mut recovered = 0;
    for seed in 0..100u64 {
        let task = iclgd::model::make_task(6, 2, false, seed);
        let design = sample_design(&cfg, seed, 0);
        let y = &task.w1 * &design.x;
        let w = least_squares_fit(&task, &design.x, &y).unwrap();
        if (&w - &task.w1).norm() <= 1e-8 * task.w1.norm() {
            recovered += 1;
        }
    }
    assert_eq!(recovered, 100);
}
