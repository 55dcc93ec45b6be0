//! Hyperparameter estimation by maximizing the log marginal likelihood.
//!
//! Multi-start search in log-parameter space with a Nelder-Mead polish per
//! start. The constant prior mean is profiled out analytically, so the search
//! space is only the kernel parameters plus the noise variance. Start 0 is
//! always the caller's template, further starts are drawn from one seeded
//! stream; the best start of `restarts = k` is therefore never worse than the
//! best of `restarts = j < k` under the same seed.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{CkgError, Result};
use crate::gp::{MeanSpec, TrainingSet};
use crate::kernel::KernelSpec;
use crate::seeding::{derive, rng_from, tags};

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_nm_iters: usize,
    /// Lower bound on the fitted noise variance, relative to the output
    /// variance. `None` lets the noise collapse to (almost) zero.
    pub noise_floor_rel: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 8,
            seed: 0,
            max_nm_iters: 200,
            noise_floor_rel: Some(1e-6),
        }
    }
}

/// Result of fitting one output.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub log_marginal: f64,
}

struct SearchSpace {
    /// Per-coordinate log-space bounds.
    lo: Vec<f64>,
    hi: Vec<f64>,
    template: KernelSpec,
}

impl SearchSpace {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn clamp(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, t)| t.clamp(self.lo[i], self.hi[i]))
            .collect()
    }

    fn decode(&self, theta: &[f64]) -> (KernelSpec, f64) {
        let t = self.clamp(theta);
        let noise = t[t.len() - 1].exp();
        let kernel = match &self.template {
            KernelSpec::Gaussian {
                inv_lengthscales, ..
            } => KernelSpec::gaussian(
                t[0].exp(),
                (0..inv_lengthscales.len())
                    .map(|k| t[1 + k].exp())
                    .collect(),
            ),
            KernelSpec::Matern { nu, .. } => KernelSpec::matern(t[0].exp(), *nu, t[1].exp()),
        };
        (kernel, noise)
    }
}

fn build_space(
    data: &TrainingSet,
    output: usize,
    family: &KernelSpec,
    opts: &FitOptions,
) -> SearchSpace {
    let y = &data.outputs[output];
    let n = y.len() as f64;
    let mean_y = y.mean();
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n;
    let v0 = var_y.max(1e-4);

    let d = data.dim();
    let mut widths = vec![1.0f64; d];
    for k in 0..d {
        let col = data.inputs.column(k);
        let w = col.max() - col.min();
        widths[k] = if w > 0.0 { w } else { 1.0 };
    }

    let mut lo = vec![(1e-8 * v0).ln()];
    let mut hi = vec![(1e4 * v0).ln()];
    match family {
        KernelSpec::Gaussian { .. } => {
            for k in 0..d {
                // correlation length between w/50 and 50 w
                lo.push((1.0 / (50.0 * widths[k]).powi(2)).ln());
                hi.push(((50.0 / widths[k]).powi(2)).ln());
            }
        }
        KernelSpec::Matern { .. } => {
            let w = widths.iter().sum::<f64>() / d as f64;
            lo.push((w / 50.0).ln());
            hi.push((50.0 * w).ln());
        }
    }
    let floor = match opts.noise_floor_rel {
        Some(r) => r * v0,
        None => 1e-15 * v0,
    };
    lo.push(floor.ln());
    hi.push((10.0 * v0).ln());
    SearchSpace {
        lo,
        hi,
        template: family.clone(),
    }
}

/// Profile log marginal likelihood: the constant mean is set to its
/// closed-form optimum for the given covariance.
fn log_marginal(
    data: &TrainingSet,
    output: usize,
    kernel: &KernelSpec,
    noise: f64,
) -> Option<(f64, f64)> {
    let n = data.n();
    let x = &data.inputs;
    let y = &data.outputs[output];
    let mut a = kernel.matrix(x, x).ok()?;
    for i in 0..n {
        a[(i, i)] += noise;
    }
    let chol = nalgebra::Cholesky::new(a)?;
    let ones = DVector::from_element(n, 1.0);
    let ainv_y = chol.solve(y);
    let ainv_1 = chol.solve(&ones);
    let denom = ones.dot(&ainv_1);
    if denom <= 0.0 {
        return None;
    }
    let mu = ones.dot(&ainv_y) / denom;
    let r = y - &ones * mu;
    let ainv_r = chol.solve(&r);
    let quad = r.dot(&ainv_r);
    let logdet: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let lml = -0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if lml.is_finite() {
        Some((lml, mu))
    } else {
        None
    }
}

/// Classic Nelder-Mead on a boxed objective. Points outside the box are
/// evaluated at their clamped position plus a quadratic pull-back penalty.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    space: &SearchSpace,
    x0: &[f64],
    max_iters: usize,
) -> Vec<f64> {
    let d = x0.len();
    let penalized = |x: &[f64]| -> f64 {
        let c = space.clamp(x);
        let outside: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        f(&c) + 1e4 * outside
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), penalized(x0)));
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += 0.5;
        let fv = penalized(&v);
        simplex.push((v, fv));
    }
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let spread = simplex[d].1 - simplex[0].1;
        if spread.abs() < 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(v, _)| v[k]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let reflect: Vec<f64> = (0..d)
            .map(|k| centroid[k] + (centroid[k] - worst.0[k]))
            .collect();
        let f_r = penalized(&reflect);
        if f_r < simplex[0].1 {
            let expand: Vec<f64> = (0..d)
                .map(|k| centroid[k] + 2.0 * (centroid[k] - worst.0[k]))
                .collect();
            let f_e = penalized(&expand);
            simplex[d] = if f_e < f_r { (expand, f_e) } else { (reflect, f_r) };
        } else if f_r < simplex[d - 1].1 {
            simplex[d] = (reflect, f_r);
        } else {
            let contract: Vec<f64> = (0..d)
                .map(|k| centroid[k] + 0.5 * (worst.0[k] - centroid[k]))
                .collect();
            let f_c = penalized(&contract);
            if f_c < worst.1 {
                simplex[d] = (contract, f_c);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = (0..d)
                        .map(|k| best[k] + 0.5 * (item.0[k] - best[k]))
                        .collect();
                    let fs = penalized(&shrunk);
                    *item = (shrunk, fs);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    space.clamp(&simplex[0].0)
}

fn template_start(space: &SearchSpace, family: &KernelSpec, var_y: f64) -> Vec<f64> {
    let mut t = Vec::with_capacity(space.dim());
    match family {
        KernelSpec::Gaussian {
            amplitude,
            inv_lengthscales,
        } => {
            t.push(amplitude.max(1e-300).ln());
            for a in inv_lengthscales {
                t.push(a.max(1e-300).ln());
            }
        }
        KernelSpec::Matern {
            amplitude,
            lengthscale,
            ..
        } => {
            t.push(amplitude.max(1e-300).ln());
            t.push(lengthscale.max(1e-300).ln());
        }
    }
    t.push((1e-2 * var_y.max(1e-4)).ln());
    space.clamp(&t)
}

fn fit_one(
    data: &TrainingSet,
    output: usize,
    family: &KernelSpec,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let space = build_space(data, output, family, opts);
    let y = &data.outputs[output];
    let mean_y = y.mean();
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / y.len() as f64;

    let objective = |theta: &[f64]| -> f64 {
        let (kernel, noise) = space.decode(theta);
        match log_marginal(data, output, &kernel, noise) {
            Some((lml, _)) => -lml,
            None => 1e12,
        }
    };

    let mut starts = vec![template_start(&space, family, var_y)];
    let mut rng = rng_from(derive(opts.seed, tags::FIT, output as u64));
    for _ in 1..opts.restarts {
        let s: Vec<f64> = (0..space.dim())
            .map(|i| space.lo[i] + rng.random::<f64>() * (space.hi[i] - space.lo[i]))
            .collect();
        starts.push(s);
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let polished = nelder_mead(&objective, &space, s, opts.max_nm_iters);
        let val = objective(&polished);
        if val >= 1e12 {
            continue;
        }
        if best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, polished));
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        CkgError::degenerate(format!(
            "all {} fitting starts failed for output {output}",
            opts.restarts
        ))
    })?;
    let (kernel, noise_var) = space.decode(&theta);
    let (log_marginal, mu) = log_marginal(data, output, &kernel, noise_var)
        .ok_or_else(|| CkgError::degenerate("final likelihood evaluation failed".to_string()))?;
    Ok(FittedModel {
        mean: MeanSpec::new(mu)?,
        kernel,
        noise_var,
        log_marginal,
    })
}

/// Fits kernel hyperparameters, noise variance and the profiled constant mean
/// for every output of `data`, all from the `family` template.
pub fn fit_hyperparameters(
    data: &TrainingSet,
    family: &KernelSpec,
    opts: &FitOptions,
) -> Result<Vec<FittedModel>> {
    if data.n() < 3 {
        return Err(CkgError::invalid("hyperparameter fitting needs n >= 3"));
    }
    if opts.restarts < 1 {
        return Err(CkgError::invalid("restarts must be >= 1"));
    }
    family.validate()?;
    if let Some(d) = family.input_dim() {
        if d != data.dim() {
            return Err(CkgError::invalid(format!(
                "kernel template dimension {d} does not match data dimension {}",
                data.dim()
            )));
        }
    }
    (0..data.n_outputs())
        .into_par_iter()
        .map(|i| fit_one(data, i, family, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::linalg::cholesky_with_jitter;
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn gp_sample_data(seed: u64) -> TrainingSet {
        // Draw y ~ N(0, K + noise I) for the known hyperparameters. The
        // window spans many correlation lengths so the amplitude is actually
        // identified.
        let dom = Domain::interval(0.0, 10.0).unwrap();
        let mut rng = rng_from(seed);
        let x = dom.latin_hypercube(60, &mut rng);
        let kernel = KernelSpec::gaussian(1.0, vec![4.0]);
        let noise = 0.01;
        let mut a = kernel.matrix(&x, &x).unwrap();
        for i in 0..60 {
            a[(i, i)] += noise;
        }
        let (l, _) = cholesky_with_jitter(&a).unwrap();
        let xi = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = l * xi;
        TrainingSet::new(x, vec![y], vec![noise]).unwrap()
    }

    #[test]
    fn recovers_known_hyperparameters_in_log_space() {
        let data = gp_sample_data(424242);
        let opts = FitOptions {
            restarts: 8,
            seed: 7,
            ..FitOptions::default()
        };
        let fitted = fit_hyperparameters(&data, &KernelSpec::gaussian(1.0, vec![1.0]), &opts)
            .unwrap()
            .remove(0);
        let (amp, inv) = match &fitted.kernel {
            KernelSpec::Gaussian {
                amplitude,
                inv_lengthscales,
            } => (*amplitude, inv_lengthscales[0]),
            _ => unreachable!(),
        };
        assert!(
            (amp.ln() - 0.0).abs() < 0.5,
            "amplitude off in log space: {amp}"
        );
        assert!(
            (inv.ln() - 4.0f64.ln()).abs() < 0.5,
            "inverse lengthscale off in log space: {inv}"
        );
        assert!(
            (fitted.noise_var.ln() - 0.01f64.ln()).abs() < 0.5,
            "noise off in log space: {}",
            fitted.noise_var
        );
    }

    #[test]
    fn constant_data_drives_amplitude_to_lower_bound() {
        let mut rng = rng_from(3);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let x = dom.latin_hypercube(12, &mut rng);
        let y = DVector::from_element(12, 2.5);
        let data = TrainingSet::new(x, vec![y], vec![0.0]).unwrap();
        let opts = FitOptions {
            restarts: 4,
            seed: 1,
            noise_floor_rel: None,
            ..FitOptions::default()
        };
        let fitted = fit_hyperparameters(&data, &KernelSpec::gaussian(1.0, vec![1.0]), &opts)
            .unwrap()
            .remove(0);
        let amp = fitted.kernel.amplitude();
        // lower amplitude bound is 1e-8 * max(var_y, 1e-4) = 1e-12
        assert!(amp <= 1e-11, "amplitude should fall to its floor, got {amp}");
        // profiled mean soaks up the constant
        assert!((fitted.mean.constant - 2.5).abs() < 1e-6);
    }

    #[test]
    fn more_restarts_never_hurt() {
        let data = gp_sample_data(99);
        let template = KernelSpec::gaussian(1.0, vec![1.0]);
        let one = fit_hyperparameters(
            &data,
            &template,
            &FitOptions {
                restarts: 1,
                seed: 5,
                ..FitOptions::default()
            },
        )
        .unwrap()
        .remove(0);
        let ten = fit_hyperparameters(
            &data,
            &template,
            &FitOptions {
                restarts: 10,
                seed: 5,
                ..FitOptions::default()
            },
        )
        .unwrap()
        .remove(0);
        assert!(ten.log_marginal >= one.log_marginal - 1e-12);
    }

    #[test]
    fn tiny_datasets_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let data =
            TrainingSet::new(x, vec![DVector::from_vec(vec![0.0, 1.0])], vec![0.0]).unwrap();
        assert!(fit_hyperparameters(
            &data,
            &KernelSpec::gaussian(1.0, vec![1.0]),
            &FitOptions::default()
        )
        .is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let data = gp_sample_data(5);
        let opts = FitOptions {
            restarts: 3,
            seed: 11,
            ..FitOptions::default()
        };
        let a = fit_hyperparameters(&data, &KernelSpec::gaussian(1.0, vec![1.0]), &opts).unwrap();
        let b = fit_hyperparameters(&data, &KernelSpec::gaussian(1.0, vec![1.0]), &opts).unwrap();
        assert_eq!(a[0].kernel, b[0].kernel);
        assert_eq!(a[0].noise_var, b[0].noise_var);
    }
}
