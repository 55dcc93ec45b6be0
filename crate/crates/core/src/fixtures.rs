//! Seeded model states for gradient verification.
//!
//! Each fixture fits a small multi-output surrogate on smooth synthetic data
//! with fixed hyperparameters, picks a batch `z` where the constraint
//! feasibility probabilities are informative, and carries a lattice for the
//! inner minimizations. The constraint surfaces stay clear of zero around the
//! objective minimizer so the fantasy argmin is an interior optimum, which
//! the pathwise derivative's envelope treatment requires.

use nalgebra::{DMatrix, DVector};

use crate::domain::Domain;
use crate::error::{CkgError, Result};
use crate::gp::{GpPosterior, MeanSpec};
use crate::kernel::KernelSpec;
use crate::seeding::{derive, rng_from, tags};
use crate::solvers::InnerSolver;

/// A ready-to-check gradient verification state.
pub struct GradFixture {
    pub name: String,
    pub posteriors: Vec<GpPosterior>,
    pub domain: Domain,
    pub inner: InnerSolver,
    pub z: DMatrix<f64>,
    /// Shape summary `(d, q, m)`.
    pub shape: (usize, usize, usize),
}

pub const GRADIENT_FIXTURES: &[&str] = &["d1q1m1-a", "d1q1m1-b", "d2q2m2", "d2q1m0-a", "d2q1m0-b"];

fn lattice(domain: &Domain, per_axis: usize) -> DMatrix<f64> {
    let d = domain.dim();
    let total = per_axis.pow(d as u32);
    let mut pts = DMatrix::zeros(total, d);
    for flat in 0..total {
        let mut rem = flat;
        for k in 0..d {
            let i = rem % per_axis;
            rem /= per_axis;
            pts[(flat, k)] =
                domain.lower()[k] + domain.width(k) * i as f64 / (per_axis - 1) as f64;
        }
    }
    pts
}

fn fit_outputs(
    domain: &Domain,
    n: usize,
    seed: u64,
    noise: f64,
    inv_lengthscale: f64,
    funcs: &[&dyn Fn(&DVector<f64>) -> f64],
) -> Result<Vec<GpPosterior>> {
    let mut rng = rng_from(derive(seed, tags::FIXTURE, 0));
    let x = domain.latin_hypercube(n, &mut rng);
    let d = domain.dim();
    funcs
        .iter()
        .map(|f| {
            let y = DVector::from_fn(n, |i, _| f(&x.row(i).transpose()));
            GpPosterior::fit(
                MeanSpec::zero(),
                KernelSpec::gaussian(1.0, vec![inv_lengthscale; d]),
                x.clone(),
                y,
                noise,
            )
        })
        .collect()
}

/// Builds one of the named verification fixtures.
pub fn gradient_fixture(name: &str) -> Result<GradFixture> {
    match name {
        "d1q1m1-a" | "d1q1m1-b" => {
            let seed = if name.ends_with('a') { 101 } else { 202 };
            let domain = Domain::interval(-1.0, 1.0)?;
            let posts = fit_outputs(
                &domain,
                7,
                seed,
                0.04,
                2.0,
                &[
                    &|x: &DVector<f64>| (3.0 * x[0]).sin() + x[0] * x[0],
                    // feasible on roughly x <= 0.45, far from the objective
                    // minimizer near -0.5
                    &|x: &DVector<f64>| x[0] - 0.45,
                ],
            )?;
            let grid = lattice(&domain, 41);
            let zv = if name.ends_with('a') { 0.30 } else { 0.15 };
            Ok(GradFixture {
                name: name.to_string(),
                posteriors: posts,
                inner: InnerSolver::grid(grid)?,
                domain,
                z: DMatrix::from_row_slice(1, 1, &[zv]),
                shape: (1, 1, 1),
            })
        }
        "d2q2m2" => {
            let domain = Domain::new(vec![-1.0, -1.0], vec![1.0, 1.0])?;
            let posts = fit_outputs(
                &domain,
                12,
                303,
                0.04,
                1.5,
                &[
                    &|x: &DVector<f64>| (3.0 * x[0]).sin() + x[1] * x[1],
                    // both constraints stay well clear of zero around the
                    // objective minimizer near (-0.5, 0) yet bind near z
                    &|x: &DVector<f64>| x[0] - 0.15,
                    &|x: &DVector<f64>| x[1] - 0.5,
                ],
            )?;
            let grid = lattice(&domain, 17);
            Ok(GradFixture {
                name: name.to_string(),
                posteriors: posts,
                inner: InnerSolver::grid(grid)?,
                domain,
                z: DMatrix::from_row_slice(2, 2, &[0.2, 0.1, -0.3, 0.4]),
                shape: (2, 2, 2),
            })
        }
        "d2q1m0-a" | "d2q1m0-b" => {
            let seed = if name.ends_with('a') { 404 } else { 505 };
            let domain = Domain::new(vec![-1.0, -1.0], vec![1.0, 1.0])?;
            let posts = fit_outputs(
                &domain,
                10,
                seed,
                0.05,
                1.5,
                &[&|x: &DVector<f64>| (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + x[1] * x[1]],
            )?;
            let grid = lattice(&domain, 17);
            let z = if name.ends_with('a') {
                DMatrix::from_row_slice(1, 2, &[0.25, -0.35])
            } else {
                DMatrix::from_row_slice(1, 2, &[-0.4, 0.2])
            };
            Ok(GradFixture {
                name: name.to_string(),
                posteriors: posts,
                inner: InnerSolver::grid(grid)?,
                domain,
                z,
                shape: (2, 1, 0),
            })
        }
        other => Err(CkgError::invalid(format!(
            "unknown gradient fixture {other:?} (expected one of {GRADIENT_FIXTURES:?})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::feasibility_probability;

    #[test]
    fn fixtures_build_and_have_informative_feasibility() {
        for name in GRADIENT_FIXTURES {
            let f = gradient_fixture(name).unwrap();
            assert_eq!(f.posteriors.len(), f.shape.2 + 1, "{name}");
            assert_eq!(f.z.nrows(), f.shape.1, "{name}");
            assert_eq!(f.z.ncols(), f.shape.0, "{name}");
            for t in 0..f.z.nrows() {
                let zt = f.z.row(t).transpose();
                for i in 1..f.posteriors.len() {
                    let p = feasibility_probability(&f.posteriors[i], &zt).unwrap();
                    assert!(
                        (0.01..=0.99).contains(&p),
                        "{name}: constraint {i} at batch point {t} is uninformative (p = {p})"
                    );
                }
            }
        }
    }

    #[test]
    fn unknown_fixture_is_an_error() {
        assert!(gradient_fixture("d9q9m9").is_err());
    }
}
