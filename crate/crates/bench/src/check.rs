//! `bench check`: a fast oracle and invariant sweep, one pass/fail line per
//! check. Exit code 1 on any failure.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use ckg_core::acquisition::{expected_improvement, kg_discrete, CkgEvaluator, Incumbent};
use ckg_core::domain::Domain;
use ckg_core::gp::{GpPosterior, MeanSpec};
use ckg_core::kernel::KernelSpec;
use ckg_core::linalg::{cholesky_derivative, cholesky_with_jitter};
use ckg_core::seeding::rng_from;
use ckg_core::solvers::InnerSolver;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn random_posterior(seed: u64, n: usize, noise: f64) -> GpPosterior {
    let mut rng = rng_from(seed);
    let x = DMatrix::from_fn(n, 1, |i, _| {
        -0.9 + 1.8 * i as f64 / (n - 1) as f64 + 0.05 * (rng.random::<f64>() - 0.5)
    });
    let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin());
    GpPosterior::fit(
        MeanSpec::zero(),
        KernelSpec::gaussian(1.0, vec![2.0]),
        x,
        y,
        noise,
    )
    .unwrap()
}

fn check_interpolation() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let post = random_posterior(seed, 6, 0.0);
        for i in 0..post.n() {
            let x = post.train_inputs().row(i).transpose();
            let err = (post.mean_at(&x) - post.train_outputs()[i]).abs()
                / (1.0 + post.train_outputs()[i].abs());
            worst = worst.max(err);
        }
    }
    Outcome {
        name: "gp-interpolation",
        passed: worst <= 1e-8,
        detail: format!("max relative error {worst:.2e}"),
    }
}

fn check_variance_reduction() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut rng = rng_from(77);
    for seed in 0..10 {
        let post = random_posterior(seed, 6, 0.02);
        let z = DMatrix::from_fn(2, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let op = post.fantasy_operator(&z).unwrap();
        let obs = op.means().clone();
        let updated = post.extend(&z, &obs).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let gap = updated.latent_var(&x).unwrap() - post.latent_var(&x).unwrap();
            worst = worst.max(gap);
        }
    }
    Outcome {
        name: "gp-variance-reduction",
        passed: worst <= 1e-8,
        detail: format!("max variance increase {worst:.2e}"),
    }
}

fn check_cholesky_derivative() -> Outcome {
    let mut rng = rng_from(5);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let a = &b * b.transpose() + DMatrix::identity(4, 4) * 0.4;
        let c = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let da = (&c + c.transpose()) * 0.5;
        let (l, _) = cholesky_with_jitter(&a).unwrap();
        let dl = cholesky_derivative(&l, &da).unwrap();
        let resid = (&dl * l.transpose() + &l * dl.transpose() - &da).amax();
        worst = worst.max(resid);
    }
    Outcome {
        name: "cholesky-derivative-identity",
        passed: worst <= 1e-8,
        detail: format!("max identity residual {worst:.2e}"),
    }
}

fn check_ei_against_mc() -> Outcome {
    let post = random_posterior(3, 6, 0.03);
    let mut rng = rng_from(11);
    let mut worst_z = 0.0f64;
    for _ in 0..3 {
        let x = DVector::from_fn(1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let (mean, var) = post.mean_and_var(&x).unwrap();
        let sd = var.sqrt();
        let inc = Incumbent {
            x_star: vec![0.0],
            value: mean + 0.2 * sd,
            source: ckg_core::acquisition::IncumbentSource::ObservedBest,
        };
        let closed = expected_improvement(&post, &x, &inc).unwrap();
        let reps = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let y = mean + sd * rng.sample::<f64, _>(StandardNormal);
            let v = (inc.value - y).max(0.0);
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / reps as f64;
        let se = ((sumsq / reps as f64 - mc * mc) / reps as f64).sqrt();
        worst_z = worst_z.max((closed - mc).abs() / se.max(1e-12));
    }
    Outcome {
        name: "ei-closed-form-vs-mc",
        passed: worst_z <= 3.0,
        detail: format!("max |z| = {worst_z:.2}"),
    }
}

fn check_kg_reduction() -> Outcome {
    let post = random_posterior(9, 6, 0.03);
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let grid = DMatrix::from_fn(25, 1, |g, _| -1.0 + 2.0 * g as f64 / 24.0);
    let inner = InnerSolver::grid(grid.clone()).unwrap();
    let posts = [post];
    let evaluator = CkgEvaluator::new(&posts, &inner, &domain, 0).unwrap();
    let z = DMatrix::from_row_slice(1, 1, &[0.35]);
    let reps = 2000;
    let kg = kg_discrete(&posts[0], &z.row(0).transpose(), &grid, reps, 21).unwrap();
    let ckg = evaluator.estimate(&z, reps, 21).unwrap();
    let log_se = ckg.estimate.std_error / ckg.estimate.value;
    let zscore =
        (ckg.estimate.value.ln() - kg.value).abs() / kg.std_error.hypot(log_se).max(1e-12);
    Outcome {
        name: "ckg-kg-reduction",
        passed: zscore <= 3.0,
        detail: format!(
            "log ckg {:.5} vs kg {:.5} (|z| = {zscore:.2})",
            ckg.estimate.value.ln(),
            kg.value
        ),
    }
}

fn check_determinism() -> Outcome {
    let post = random_posterior(13, 6, 0.03);
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let grid = DMatrix::from_fn(21, 1, |g, _| -1.0 + 2.0 * g as f64 / 20.0);
    let inner = InnerSolver::grid(grid).unwrap();
    let posts = [post];
    let evaluator = CkgEvaluator::new(&posts, &inner, &domain, 0).unwrap();
    let z = DMatrix::from_row_slice(1, 1, &[0.1]);
    let a = evaluator.estimate(&z, 256, 5).unwrap();
    let b = evaluator.estimate(&z, 256, 5).unwrap();
    let bitwise = a.estimate == b.estimate;
    Outcome {
        name: "mc-determinism",
        passed: bitwise,
        detail: if bitwise {
            "bit-identical estimates".to_string()
        } else {
            format!("{} vs {}", a.estimate.value, b.estimate.value)
        },
    }
}

/// Runs the quick suite; returns the number of failures.
pub fn check() -> usize {
    let outcomes = vec![
        check_interpolation(),
        check_variance_reduction(),
        check_cholesky_derivative(),
        check_ei_against_mc(),
        check_kg_reduction(),
        check_determinism(),
    ];
    let mut failures = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", o.name, o.detail);
        if !o.passed {
            failures += 1;
        }
    }
    failures
}
