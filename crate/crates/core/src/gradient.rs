//! Unbiased gradient estimation for the batch acquisition score.
//!
//! The score factors into `exp(E[L]) * prod Phi`. Differentiating in one
//! batch coordinate `z_{t,k}` gives, by the product rule, a pathwise (IPA)
//! term for the improvement factor and one likelihood-ratio (LR) score term
//! per constraint for its feasibility factor. The IPA term differentiates
//! only `sigma_tilde` at the fixed inner argmin (envelope treatment, valid at
//! interior optima); the LR term rewrites the derivative of
//! `Pr[G <= 0]` as an expectation of `1{G <= 0}` times the score of the
//! Gaussian measurement density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{clamp_exponent, BatchCandidate, CkgEvaluator};
use crate::domain::Domain;
use crate::error::{CkgError, Result};
use crate::gp::{FantasyOperator, GpPosterior};
use crate::linalg::cholesky_derivative;
use crate::seeding::{derive, rng_from, tags};
use crate::solvers::InnerSolver;

/// Monte Carlo gradient of the acquisition with per-component uncertainty.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    /// `q x d` gradient in the batch coordinates.
    pub gradient: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub replications: usize,
    pub seed: u64,
    /// The joint feasibility factor underflowed; the gradient is reported as
    /// zero.
    pub underflow: bool,
}

/// One pathwise sample of the improvement term's derivative.
#[derive(Clone, Debug)]
pub struct IpaSample {
    pub z_q0: DVector<f64>,
    pub x_star: DVector<f64>,
    /// `q x d` per-coordinate derivative of `L` at this draw.
    pub d0: DMatrix<f64>,
}

/// Score-term diagnostics for one simulated measurement, in the
/// `A W^2 + B W + C` factored form used for integrability bounds.
#[derive(Clone, Debug)]
pub struct LrTermBreakdown {
    pub indicator: bool,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub w: f64,
}

/// Per-replication record emitted under the gradient-sample dump flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradSampleRecord {
    pub replication: usize,
    pub z_q0: Vec<f64>,
    pub l_value: f64,
    pub x_star: Vec<f64>,
    pub fallback_used: bool,
    /// Flattened `q x d`, row-major.
    pub d0: Vec<f64>,
    /// Flattened `q x m x d`.
    pub lr: Vec<f64>,
}

/// How `E[L]` inside the estimator is filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LMeanEstimator {
    /// Same-batch sample mean (O(1/R) bias, default).
    SelfNormalized,
    /// First half estimates `E[L]`, second half the derivative terms.
    SplitSample,
}

/// Derivative of the whitened cross-covariance row contracted with the draw:
/// the pathwise derivative of `L` in every batch coordinate, holding the
/// inner argmin fixed.
pub fn ipa_term(
    op: &FantasyOperator<'_>,
    z_draw: &DVector<f64>,
    x_star: &DVector<f64>,
) -> Result<IpaSample> {
    let q = op.q();
    if z_draw.len() != q {
        return Err(CkgError::invalid("draw length does not match batch size"));
    }
    let post = op.posterior();
    let d = post.dim();
    let z = op.batch();
    let u = op.weights_from_draw(z_draw);
    let s_star = op.sigma_tilde(x_star);
    let chol = op.chol_factor();

    // d/dz_t of the posterior covariance between batch points, per coordinate
    let mut cov_grads = vec![vec![DVector::zeros(d); q]; q];
    for t in 0..q {
        for b in 0..q {
            cov_grads[t][b] = post.cov_grad_x1(&z.row(t).transpose(), &z.row(b).transpose())?;
        }
    }

    let mut d0 = DMatrix::zeros(q, d);
    for t in 0..q {
        let dcross_t = post.cov_grad_x1(&z.row(t).transpose(), x_star)?;
        for k in 0..d {
            let mut du = DMatrix::zeros(q, q);
            for b in 0..q {
                du[(t, b)] += cov_grads[t][b][k];
                du[(b, t)] += cov_grads[t][b][k];
            }
            let dd = cholesky_derivative(chol, &du)?;
            let v = dd.transpose() * &u;
            let term1 = dcross_t[k] * u[t];
            let term2 = s_star.dot(&v);
            d0[(t, k)] = -(term1 - term2);
        }
    }
    Ok(IpaSample {
        z_q0: z_draw.clone(),
        x_star: x_star.clone(),
        d0,
    })
}

/// Per-draw likelihood-ratio score for one constraint at one batch point,
/// vectorized over the coordinates of that point. The simulated measurement
/// is `G = mu + sigma W` with the predictive standard deviation.
pub fn lr_term(post: &GpPosterior, z_point: &DVector<f64>, w: f64) -> Result<DVector<f64>> {
    let d = z_point.len();
    let mean = post.mean_at(z_point);
    let var = post.predictive_var(z_point)?;
    if var <= 0.0 {
        return Err(CkgError::DegenerateVariance(
            "lr_term requires positive predictive variance".to_string(),
        ));
    }
    let sd = var.sqrt();
    let g = mean + sd * w;
    if g > 0.0 {
        return Ok(DVector::zeros(d));
    }
    let dmu = post.mean_grad(z_point)?;
    let dsd = post.predictive_sd_grad(z_point)?;
    Ok(dmu * (w / sd) + dsd * ((w * w - 1.0) / sd))
}

/// The factored `A W^2 + B W + C` view of the same score, used by the
/// integrability-bound diagnostics.
pub fn lr_breakdown(post: &GpPosterior, z_point: &DVector<f64>, w: f64) -> Result<LrTermBreakdown> {
    let mean = post.mean_at(z_point);
    let var = post.predictive_var(z_point)?;
    if var <= 0.0 {
        return Err(CkgError::DegenerateVariance(
            "lr_breakdown requires positive predictive variance".to_string(),
        ));
    }
    let sd = var.sqrt();
    let dmu = post.mean_grad(z_point)?;
    let dsd = post.predictive_sd_grad(z_point)?;
    let a = &dsd / sd;
    let b = &dmu / sd;
    let c = -&a;
    Ok(LrTermBreakdown {
        indicator: mean + sd * w <= 0.0,
        a,
        b,
        c,
        w,
    })
}

struct LrSite {
    mean: f64,
    sd: f64,
    dmu: DVector<f64>,
    dsd: DVector<f64>,
}

struct RepSample {
    l_value: f64,
    d0: DMatrix<f64>,
    /// `[t][i]` -> d-vector of scores.
    lr: Vec<Vec<DVector<f64>>>,
    z_q0: DVector<f64>,
    x_star: DVector<f64>,
    fallback_used: bool,
    replication: usize,
}

impl<'a> CkgEvaluator<'a> {
    /// Unbiased gradient of the acquisition at batch `z`, averaging `r`
    /// IPA + LR replications. Deterministic given `seed`.
    pub fn grad(&self, z: &DMatrix<f64>, replications: usize, seed: u64) -> Result<GradientEstimate> {
        self.grad_with(z, replications, seed, LMeanEstimator::SelfNormalized, false)
            .map(|(g, _)| g)
    }

    pub fn grad_with(
        &self,
        z: &DMatrix<f64>,
        replications: usize,
        seed: u64,
        variant: LMeanEstimator,
        dump: bool,
    ) -> Result<(GradientEstimate, Vec<GradSampleRecord>)> {
        if replications < 2 {
            return Err(CkgError::invalid("grad estimate needs replications >= 2"));
        }
        let q = z.nrows();
        let d = z.ncols();
        let m = self.n_constraints();
        let ctx = self.batch_ctx(z)?;
        if ctx.feas_factor == 0.0 {
            return Ok((
                GradientEstimate {
                    gradient: DMatrix::zeros(q, d),
                    std_error: DMatrix::zeros(q, d),
                    replications: 0,
                    seed,
                    underflow: true,
                },
                Vec::new(),
            ));
        }

        // per-(t, i) feasibility sites with their analytic gradients
        let mut lr_sites: Vec<Vec<LrSite>> = Vec::with_capacity(q);
        for t in 0..q {
            let zt = z.row(t).transpose();
            let mut row = Vec::with_capacity(m);
            for i in 1..=m {
                let post = &self.posteriors[i];
                let var = post.predictive_var(&zt)?;
                if var <= 0.0 {
                    return Err(CkgError::DegenerateVariance(format!(
                        "constraint {i} has zero predictive variance at batch point {t}"
                    )));
                }
                row.push(LrSite {
                    mean: post.mean_at(&zt),
                    sd: var.sqrt(),
                    dmu: post.mean_grad(&zt)?,
                    dsd: post.predictive_sd_grad(&zt)?,
                });
            }
            lr_sites.push(row);
        }

        // IPA precomputation for the objective output
        let post0 = &self.posteriors[0];
        let chol0 = ctx.ops[0].chol_factor();
        let mut cov_grads = vec![vec![DVector::zeros(d); q]; q];
        for t in 0..q {
            for b in 0..q {
                cov_grads[t][b] =
                    post0.cov_grad_x1(&z.row(t).transpose(), &z.row(b).transpose())?;
            }
        }
        // (dD^T)_{t,k} matrices
        let mut ddt = vec![vec![DMatrix::zeros(q, q); d]; q];
        for t in 0..q {
            for k in 0..d {
                let mut du = DMatrix::zeros(q, q);
                for b in 0..q {
                    du[(t, b)] += cov_grads[t][b][k];
                    du[(b, t)] += cov_grads[t][b][k];
                }
                ddt[t][k] = cholesky_derivative(chol0, &du)?.transpose();
            }
        }
        // grid mode: d/dz_t K0(x_g, z_t) per grid point
        let grid_dcross: Option<Vec<DMatrix<f64>>> = match &self.grid {
            None => None,
            Some(cache) => {
                let n_grid = cache.points.nrows();
                let mut all = Vec::with_capacity(n_grid);
                for g in 0..n_grid {
                    let xg = cache.points.row(g).transpose();
                    let mut mtx = DMatrix::zeros(q, d);
                    for t in 0..q {
                        let gvec = post0.cov_grad_x1(&z.row(t).transpose(), &xg)?;
                        for k in 0..d {
                            mtx[(t, k)] = gvec[k];
                        }
                    }
                    all.push(mtx);
                }
                Some(all)
            }
        };

        let mut reps: Vec<RepSample> = Vec::with_capacity(replications);
        let mut excluded = 0usize;
        for rep in 0..replications {
            let rep_seed = derive(seed, tags::REPLICATION, rep as u64);
            let mut rng = rng_from(rep_seed);
            let (draws, weights) = self.draw_weights(&ctx, &mut rng);
            let fant = match self.fantasy_min(&ctx, &weights, rep_seed) {
                Ok(f) if f.value.is_finite() => f,
                _ => {
                    excluded += 1;
                    continue;
                }
            };
            let u0 = &weights[0];

            // sigma_tilde at the argmin
            let s_star = match (fant.grid_index, &ctx.cross) {
                (Some(g), Some(cross)) => chol0
                    .solve_lower_triangular(&cross[0].row(g).transpose())
                    .expect("fantasy factor has positive diagonal"),
                _ => ctx.ops[0].sigma_tilde(&fant.x_star),
            };
            let dcross_star: DMatrix<f64> = match (fant.grid_index, &grid_dcross) {
                (Some(g), Some(all)) => all[g].clone(),
                _ => {
                    let mut mtx = DMatrix::zeros(q, d);
                    for t in 0..q {
                        let gvec =
                            post0.cov_grad_x1(&z.row(t).transpose(), &fant.x_star)?;
                        for k in 0..d {
                            mtx[(t, k)] = gvec[k];
                        }
                    }
                    mtx
                }
            };

            let mut d0 = DMatrix::zeros(q, d);
            for t in 0..q {
                for k in 0..d {
                    let v = &ddt[t][k] * u0;
                    d0[(t, k)] = -(dcross_star[(t, k)] * u0[t] - s_star.dot(&v));
                }
            }

            // LR scores; the W draws follow the Z draws on the same stream
            let mut lr = vec![vec![DVector::zeros(d); m]; q];
            for (t, row) in lr_sites.iter().enumerate() {
                for (i, site) in row.iter().enumerate() {
                    let w: f64 = rng.sample(StandardNormal);
                    let g = site.mean + site.sd * w;
                    if g <= 0.0 {
                        lr[t][i] = &site.dmu * (w / site.sd)
                            + &site.dsd * ((w * w - 1.0) / site.sd);
                    }
                }
            }
            reps.push(RepSample {
                l_value: self.base_min - fant.value,
                d0,
                lr,
                z_q0: draws[0].clone(),
                x_star: fant.x_star,
                fallback_used: fant.fallback_used,
                replication: rep,
            });
        }
        if excluded * 5 > replications {
            return Err(CkgError::AcquisitionEstimation(format!(
                "inner solver failed on {excluded} of {replications} draws"
            )));
        }
        if reps.len() < 2 {
            return Err(CkgError::AcquisitionEstimation(
                "fewer than two valid replications".to_string(),
            ));
        }

        let (mean_l, grad_reps): (f64, &[RepSample]) = match variant {
            LMeanEstimator::SelfNormalized => {
                let mean = reps.iter().map(|r| r.l_value).sum::<f64>() / reps.len() as f64;
                (mean, &reps[..])
            }
            LMeanEstimator::SplitSample => {
                let half = reps.len() / 2;
                if half < 1 || reps.len() - half < 2 {
                    return Err(CkgError::AcquisitionEstimation(
                        "too few replications for the split-sample variant".to_string(),
                    ));
                }
                let mean = reps[..half].iter().map(|r| r.l_value).sum::<f64>() / half as f64;
                (mean, &reps[half..])
            }
        };
        let exp_factor = clamp_exponent(mean_l).exp() * ctx.feas_factor;

        let n_eff = grad_reps.len() as f64;
        let mut mean: DMatrix<f64> = DMatrix::zeros(q, d);
        let mut msq: DMatrix<f64> = DMatrix::zeros(q, d);
        for r in grad_reps {
            for t in 0..q {
                for k in 0..d {
                    let mut g = r.d0[(t, k)] * exp_factor;
                    for i in 0..m {
                        g += r.lr[t][i][k] * exp_factor / ctx.phis[(t, i)];
                    }
                    mean[(t, k)] += g;
                    msq[(t, k)] += g * g;
                }
            }
        }
        mean /= n_eff;
        let mut se: DMatrix<f64> = DMatrix::zeros(q, d);
        for t in 0..q {
            for k in 0..d {
                let var: f64 = (msq[(t, k)] / n_eff - mean[(t, k)] * mean[(t, k)]).max(0.0)
                    * n_eff
                    / (n_eff - 1.0);
                se[(t, k)] = (var / n_eff).sqrt();
            }
        }

        let records = if dump {
            grad_reps
                .iter()
                .map(|r| GradSampleRecord {
                    replication: r.replication,
                    z_q0: r.z_q0.iter().copied().collect(),
                    l_value: r.l_value,
                    x_star: r.x_star.iter().copied().collect(),
                    fallback_used: r.fallback_used,
                    d0: r.d0.transpose().iter().copied().collect(),
                    lr: (0..q)
                        .flat_map(|t| {
                            let row = &r.lr[t];
                            row.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>()
                        })
                        .collect(),
                })
                .collect()
        } else {
            Vec::new()
        };

        Ok((
            GradientEstimate {
                gradient: mean,
                std_error: se,
                replications: grad_reps.len(),
                seed,
                underflow: false,
            },
            records,
        ))
    }
}

/// One-shot convenience wrapper over [`CkgEvaluator::grad`].
pub fn grad_estimate(
    posteriors: &[GpPosterior],
    z: &BatchCandidate,
    inner: &InnerSolver,
    domain: &Domain,
    replications: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    CkgEvaluator::new(posteriors, inner, domain, seed)?.grad(z.points(), replications, seed)
}

/// Central finite differences of a seeded scalar estimator, evaluating both
/// sides of every coordinate pair under the same seed (common random
/// numbers).
pub fn finite_difference_check<F>(
    f: F,
    z: &DMatrix<f64>,
    h: f64,
    replications: usize,
    seed: u64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>, usize, u64) -> f64,
{
    if h <= 0.0 {
        return Err(CkgError::invalid("finite difference step must be positive"));
    }
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for t in 0..z.nrows() {
        for k in 0..z.ncols() {
            let mut zp = z.clone();
            zp[(t, k)] += h;
            let mut zm = z.clone();
            zm[(t, k)] -= h;
            out[(t, k)] = (f(&zp, replications, seed) - f(&zm, replications, seed)) / (2.0 * h);
        }
    }
    Ok(out)
}

/// One gradient component versus its common-random-number finite difference.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckComponent {
    pub t: usize,
    pub k: usize,
    pub grad: f64,
    pub grad_se: f64,
    pub fd: f64,
    pub fd_se: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub components: Vec<GradCheckComponent>,
    pub max_abs_z: f64,
    pub replications: usize,
}

/// Verifies the gradient estimator against central finite differences of the
/// value estimator under common random numbers. The finite-difference
/// standard error accounts for the covariance between the two sides through
/// the delta method on the paired per-replication improvement samples.
pub fn gradcheck(
    posteriors: &[GpPosterior],
    inner: &InnerSolver,
    domain: &Domain,
    z: &DMatrix<f64>,
    replications: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(CkgError::invalid("finite difference step must be positive"));
    }
    let evaluator = CkgEvaluator::new(posteriors, inner, domain, seed)?;
    let grad = evaluator.grad(z, replications, seed)?;
    let mut components = Vec::with_capacity(z.nrows() * z.ncols());
    let mut max_abs_z = 0.0f64;
    for t in 0..z.nrows() {
        for k in 0..z.ncols() {
            let mut zp = z.clone();
            zp[(t, k)] += h;
            let mut zm = z.clone();
            zm[(t, k)] -= h;
            let ep = evaluator.estimate(&zp, replications, seed)?;
            let em = evaluator.estimate(&zm, replications, seed)?;
            let (fd, fd_se) = paired_fd(&ep, &em, h)?;
            let g = grad.gradient[(t, k)];
            let g_se = grad.std_error[(t, k)];
            let denom = g_se.hypot(fd_se).max(1e-300);
            let zsc = (g - fd) / denom;
            max_abs_z = max_abs_z.max(zsc.abs());
            components.push(GradCheckComponent {
                t,
                k,
                grad: g,
                grad_se: g_se,
                fd,
                fd_se,
                z_score: zsc,
            });
        }
    }
    Ok(GradCheckReport {
        components,
        max_abs_z,
        replications,
    })
}

/// Delta-method finite difference from two paired estimates: aligns the
/// per-replication improvement samples, then propagates their joint
/// covariance through `exp`.
fn paired_fd(
    ep: &crate::acquisition::CkgEstimate,
    em: &crate::acquisition::CkgEstimate,
    h: f64,
) -> Result<(f64, f64)> {
    if ep.underflow || em.underflow {
        return Ok((0.0, 0.0));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(ep.samples.len());
    let mut it_m = em.samples.iter().peekable();
    for sp in &ep.samples {
        while let Some(sm) = it_m.peek() {
            match sm.replication.cmp(&sp.replication) {
                std::cmp::Ordering::Less => {
                    it_m.next();
                }
                std::cmp::Ordering::Equal => {
                    pairs.push((sp.l_value, it_m.next().unwrap().l_value));
                    break;
                }
                std::cmp::Ordering::Greater => break,
            }
        }
    }
    let n = pairs.len() as f64;
    if n < 2.0 {
        return Err(CkgError::AcquisitionEstimation(
            "not enough paired replications for the finite difference".to_string(),
        ));
    }
    let mean_p = pairs.iter().map(|(a, _)| a).sum::<f64>() / n;
    let mean_m = pairs.iter().map(|(_, b)| b).sum::<f64>() / n;
    let mut var_p = 0.0;
    let mut var_m = 0.0;
    let mut cov = 0.0;
    for (a, b) in &pairs {
        var_p += (a - mean_p) * (a - mean_p);
        var_m += (b - mean_m) * (b - mean_m);
        cov += (a - mean_p) * (b - mean_m);
    }
    var_p /= n - 1.0;
    var_m /= n - 1.0;
    cov /= n - 1.0;
    let a = clamp_exponent(mean_p).exp() * ep.feasibility_factor;
    let b = clamp_exponent(mean_m).exp() * em.feasibility_factor;
    let fd = (a - b) / (2.0 * h);
    let var_fd = (a * a * var_p / n + b * b * var_m / n - 2.0 * a * b * cov / n)
        / (4.0 * h * h);
    Ok((fd, var_fd.max(0.0).sqrt()))
}
