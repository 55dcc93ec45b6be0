//! Gaussian-process regression with noisy observations.
//!
//! One `GpPosterior` per performance index, conditioned independently. The
//! struct caches the lower Cholesky factor of `K(X,X) + noise*I` and the
//! solved vector against the centered observations, so mean/variance queries
//! are two triangular solves. `extend` performs the batch update by block
//! Cholesky rather than refactoring, which is both the cheap path and a
//! numerically distinct route that the test suite checks against from-scratch
//! conditioning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CkgError, Result};
use crate::kernel::KernelSpec;
use crate::linalg::cholesky_with_jitter;

/// Constant prior mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub constant: f64,
}

impl MeanSpec {
    pub fn zero() -> Self {
        MeanSpec { constant: 0.0 }
    }

    pub fn new(constant: f64) -> Result<Self> {
        if !constant.is_finite() {
            return Err(CkgError::invalid("prior mean must be finite"));
        }
        Ok(MeanSpec { constant })
    }
}

/// Prior for one output: constant mean plus kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
}

/// Joint training data for all outputs `0..=m`, sharing the input sites.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    /// `n x d` input sites.
    pub inputs: DMatrix<f64>,
    /// Observation vector per output, each of length `n`.
    pub outputs: Vec<DVector<f64>>,
    /// Homoscedastic measurement-error variance per output.
    pub noise_var: Vec<f64>,
}

impl TrainingSet {
    pub fn new(
        inputs: DMatrix<f64>,
        outputs: Vec<DVector<f64>>,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(CkgError::invalid("training set needs n >= 1"));
        }
        if outputs.is_empty() || outputs.len() != noise_var.len() {
            return Err(CkgError::invalid(
                "training set needs one observation vector and one noise variance per output",
            ));
        }
        for (i, y) in outputs.iter().enumerate() {
            if y.len() != n {
                return Err(CkgError::invalid(format!(
                    "output {i} has {} observations for {n} inputs",
                    y.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(CkgError::invalid(format!("output {i} has non-finite values")));
            }
        }
        if noise_var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CkgError::invalid("noise variances must be >= 0"));
        }
        Ok(TrainingSet {
            inputs,
            outputs,
            noise_var,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }
}

/// Fitted posterior for one output.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    mean: MeanSpec,
    kernel: KernelSpec,
    x_train: DMatrix<f64>,
    y: DVector<f64>,
    noise_var: f64,
    /// Lower Cholesky factor of `K(X,X) + (noise + jitter) I`.
    chol: DMatrix<f64>,
    /// `(K + noise I)^{-1} (y - mean)`.
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpPosterior {
    pub fn fit(
        mean: MeanSpec,
        kernel: KernelSpec,
        x_train: DMatrix<f64>,
        y: DVector<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        kernel.validate()?;
        if x_train.nrows() == 0 || x_train.nrows() != y.len() {
            return Err(CkgError::invalid("posterior fit: empty or mismatched data"));
        }
        if noise_var < 0.0 || !noise_var.is_finite() {
            return Err(CkgError::invalid("noise variance must be >= 0"));
        }
        let n = x_train.nrows();
        let mut a = kernel.matrix(&x_train, &x_train)?;
        for i in 0..n {
            a[(i, i)] += noise_var;
        }
        let (chol, jitter) = cholesky_with_jitter(&a)?;
        let centered = &y - DVector::from_element(n, mean.constant);
        let alpha = solve_spd(&chol, &centered)?;
        Ok(GpPosterior {
            mean,
            kernel,
            x_train,
            y,
            noise_var,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn n(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mean_spec(&self) -> MeanSpec {
        self.mean
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.x_train
    }

    pub fn train_outputs(&self) -> &DVector<f64> {
        &self.y
    }

    /// Prior cross-covariance vector `k(x, X)`.
    fn cross_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| {
            self.kernel
                .eval_unchecked(x, &self.x_train.row(i).transpose())
        })
    }

    /// Whitened cross-covariance `L^{-1} k(x, X)`.
    pub(crate) fn white_cross(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(&self.cross_vec(x))
            .expect("cholesky factor has positive diagonal")
    }

    /// Posterior mean at `x`.
    pub fn mean_at(&self, x: &DVector<f64>) -> f64 {
        self.mean.constant + self.cross_vec(x).dot(&self.alpha)
    }

    fn clamp_var(&self, raw: f64) -> Result<f64> {
        let tol = 1e-10 * self.kernel.amplitude();
        if raw < -tol {
            return Err(CkgError::degenerate(format!(
                "posterior variance {raw:.3e} below -{tol:.3e}"
            )));
        }
        Ok(raw.max(0.0))
    }

    /// Posterior variance of the latent function at `x` (no measurement
    /// noise), clamped to zero within roundoff.
    pub fn latent_var(&self, x: &DVector<f64>) -> Result<f64> {
        let w = self.white_cross(x);
        let prior = self.kernel.eval_unchecked(x, x);
        self.clamp_var(prior - w.dot(&w))
    }

    /// Variance of a new measurement at `x`: latent variance plus the
    /// measurement-error variance.
    pub fn predictive_var(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.latent_var(x)? + self.noise_var)
    }

    /// Posterior mean and latent variance, with dimension checking.
    pub fn mean_and_var(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(CkgError::invalid(format!(
                "query dimension {} does not match training dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok((self.mean_at(x), self.latent_var(x)?))
    }

    /// Posterior covariance between two query points.
    pub fn cov(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> f64 {
        let w1 = self.white_cross(x1);
        let w2 = self.white_cross(x2);
        self.kernel.eval_unchecked(x1, x2) - w1.dot(&w2)
    }

    /// `d k(x, X) / d x` as an `n x d` matrix of kernel gradients.
    fn cross_jac(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.kernel.supports_gradients() {
            return Err(CkgError::UnsupportedSmoothness(
                "posterior gradients require a continuously differentiable kernel (matern nu >= 3/2)"
                    .to_string(),
            ));
        }
        let n = self.n();
        let d = self.dim();
        let mut j = DMatrix::zeros(n, d);
        for i in 0..n {
            let g = self
                .kernel
                .grad_x1_unchecked(x, &self.x_train.row(i).transpose());
            for c in 0..d {
                j[(i, c)] = g[c];
            }
        }
        Ok(j)
    }

    /// Gradient of the posterior mean at `x`.
    pub fn mean_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.cross_jac(x)?.transpose() * &self.alpha)
    }

    /// Gradient of the latent posterior variance at `x`. The prior diagonal
    /// of a stationary kernel is constant, so only the data term contributes.
    pub fn latent_var_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let j = self.cross_jac(x)?;
        let v = self
            .chol
            .solve_lower_triangular(&j)
            .expect("cholesky factor has positive diagonal");
        let w = self.white_cross(x);
        Ok(v.transpose() * w * (-2.0))
    }

    /// Gradient of the latent posterior standard deviation.
    pub fn latent_sd_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sd = self.latent_var(x)?.sqrt();
        if sd <= 0.0 {
            return Err(CkgError::DegenerateVariance(
                "sd gradient at a point of zero posterior variance".to_string(),
            ));
        }
        Ok(self.latent_var_grad(x)? / (2.0 * sd))
    }

    /// Gradient of the predictive (measurement) standard deviation.
    pub fn predictive_sd_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sd = self.predictive_var(x)?.sqrt();
        if sd <= 0.0 {
            return Err(CkgError::DegenerateVariance(
                "sd gradient requires positive predictive variance".to_string(),
            ));
        }
        Ok(self.latent_var_grad(x)? / (2.0 * sd))
    }

    /// Gradient of the posterior covariance `K^(n)(x1, x2)` in its first
    /// argument.
    pub fn cov_grad_x1(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        let j = self.cross_jac(x1)?;
        let v = self
            .chol
            .solve_lower_triangular(&j)
            .expect("cholesky factor has positive diagonal");
        let w2 = self.white_cross(x2);
        Ok(self.kernel.grad_x1_unchecked(x1, x2) - v.transpose() * w2)
    }

    /// One-step-lookahead operator at a batch `z` (rows are points).
    pub fn fantasy_operator(&self, z: &DMatrix<f64>) -> Result<FantasyOperator<'_>> {
        let q = z.nrows();
        if q == 0 || z.ncols() != self.dim() {
            return Err(CkgError::invalid(
                "fantasy batch must be nonempty with matching dimension",
            ));
        }
        let k_xz = self.kernel.matrix(&self.x_train, z)?;
        let w_z = self
            .chol
            .solve_lower_triangular(&k_xz)
            .expect("cholesky factor has positive diagonal");
        let mut s = self.kernel.matrix(z, z)? - w_z.transpose() * &w_z;
        for j in 0..q {
            s[(j, j)] += self.noise_var;
        }
        let (chol_q, jitter) = cholesky_with_jitter(&s)?;
        let means = DVector::from_fn(q, |j, _| self.mean_at(&z.row(j).transpose()));
        Ok(FantasyOperator {
            post: self,
            batch: z.clone(),
            w_z,
            chol_q,
            means,
            jitter,
        })
    }

    /// Conditions on `q` additional observations at `z` by block-Cholesky
    /// update, producing the `(n+q)`-point posterior under the same prior and
    /// noise model.
    pub fn extend(&self, z: &DMatrix<f64>, observations: &DVector<f64>) -> Result<GpPosterior> {
        let q = z.nrows();
        if q == 0 || z.ncols() != self.dim() || observations.len() != q {
            return Err(CkgError::invalid("extend: mismatched batch or observations"));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(CkgError::invalid("extend: observations must be finite"));
        }
        let n = self.n();
        let k_xz = self.kernel.matrix(&self.x_train, z)?;
        let w_z = self
            .chol
            .solve_lower_triangular(&k_xz)
            .expect("cholesky factor has positive diagonal");
        let mut s = self.kernel.matrix(z, z)? - w_z.transpose() * &w_z;
        for j in 0..q {
            s[(j, j)] += self.noise_var;
        }
        let (d_block, jitter2) = cholesky_with_jitter(&s)?;

        let mut chol = DMatrix::zeros(n + q, n + q);
        chol.view_mut((0, 0), (n, n)).copy_from(&self.chol);
        chol.view_mut((n, 0), (q, n)).copy_from(&w_z.transpose());
        chol.view_mut((n, n), (q, q)).copy_from(&d_block);

        let mut x_train = DMatrix::zeros(n + q, self.dim());
        x_train.view_mut((0, 0), (n, self.dim())).copy_from(&self.x_train);
        x_train.view_mut((n, 0), (q, self.dim())).copy_from(z);

        let mut y = DVector::zeros(n + q);
        y.rows_mut(0, n).copy_from(&self.y);
        y.rows_mut(n, q).copy_from(observations);

        let centered = &y - DVector::from_element(n + q, self.mean.constant);
        let alpha = solve_spd(&chol, &centered)?;
        Ok(GpPosterior {
            mean: self.mean,
            kernel: self.kernel.clone(),
            x_train,
            y,
            noise_var: self.noise_var,
            chol,
            alpha,
            jitter: self.jitter.max(jitter2),
        })
    }

    /// Serializable snapshot of the fitted model.
    pub fn to_doc(&self, output_index: usize) -> GpModelDoc {
        GpModelDoc {
            output_index,
            mean: self.mean.constant,
            kernel: KernelDoc {
                kind: self.kernel.kind_name().to_string(),
                params: self.kernel.params(),
            },
            noise_var: self.noise_var,
            x: (0..self.n())
                .map(|i| self.x_train.row(i).iter().copied().collect())
                .collect(),
            y: self.y.iter().copied().collect(),
        }
    }

    pub fn from_doc(doc: &GpModelDoc) -> Result<GpPosterior> {
        let n = doc.x.len();
        if n == 0 {
            return Err(CkgError::invalid("model document has no data"));
        }
        let d = doc.x[0].len();
        if doc.x.iter().any(|row| row.len() != d) || doc.y.len() != n {
            return Err(CkgError::invalid("model document has ragged data"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| doc.x[i][j]);
        let y = DVector::from_vec(doc.y.clone());
        let kernel = KernelSpec::from_kind_params(&doc.kernel.kind, &doc.kernel.params)?;
        GpPosterior::fit(MeanSpec::new(doc.mean)?, kernel, x, y, doc.noise_var)
    }
}

/// Solves `(L L^T) x = b` for the cached factor.
fn solve_spd(chol: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let t = chol
        .solve_lower_triangular(b)
        .ok_or_else(|| CkgError::degenerate("forward solve failed".to_string()))?;
    chol.tr_solve_lower_triangular(&t)
        .ok_or_else(|| CkgError::degenerate("backward solve failed".to_string()))
}

/// Fits one posterior per output against its prior. Outputs condition
/// independently and in parallel.
pub fn fit_posterior(priors: &[GpPrior], data: &TrainingSet) -> Result<Vec<GpPosterior>> {
    if priors.len() != data.n_outputs() {
        return Err(CkgError::invalid(format!(
            "{} priors for {} outputs",
            priors.len(),
            data.n_outputs()
        )));
    }
    priors
        .par_iter()
        .enumerate()
        .map(|(i, prior)| {
            GpPosterior::fit(
                prior.mean,
                prior.kernel.clone(),
                data.inputs.clone(),
                data.outputs[i].clone(),
                data.noise_var[i],
            )
        })
        .collect()
}

/// The pair `(sigma_tilde, D)` enabling one-draw simulation of the `(n+q)`
/// posterior mean: `mu^(n+q)(x) = mu^(n)(x) + sigma_tilde(x, z) . Z` with `Z`
/// standard normal and `D` the Cholesky factor of
/// `K^(n)(z, z) + noise * I`.
pub struct FantasyOperator<'a> {
    post: &'a GpPosterior,
    batch: DMatrix<f64>,
    /// `L^{-1} K(X, z)`, `n x q`.
    w_z: DMatrix<f64>,
    /// Lower factor `D`.
    chol_q: DMatrix<f64>,
    means: DVector<f64>,
    jitter: f64,
}

impl<'a> FantasyOperator<'a> {
    pub fn q(&self) -> usize {
        self.batch.nrows()
    }

    pub fn batch(&self) -> &DMatrix<f64> {
        &self.batch
    }

    pub fn posterior(&self) -> &'a GpPosterior {
        self.post
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_q
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior cross-covariance vector `K^(n)(x, z^(1:q))`.
    pub fn cross_cov(&self, x: &DVector<f64>) -> DVector<f64> {
        let w_x = self.post.white_cross(x);
        let q = self.q();
        DVector::from_fn(q, |j, _| {
            self.post
                .kernel
                .eval_unchecked(x, &self.batch.row(j).transpose())
                - w_x.dot(&self.w_z.column(j))
        })
    }

    /// The row vector `sigma_tilde(x, z) = K^(n)(x, z) (D^T)^{-1}`, returned
    /// as its transpose `D^{-1} K^(n)(z, x)`.
    pub fn sigma_tilde(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol_q
            .solve_lower_triangular(&self.cross_cov(x))
            .expect("fantasy factor has positive diagonal")
    }

    /// Turns a standard normal draw `Z` into `u = (D^T)^{-1} Z`, after which
    /// the fantasy mean is the plain inner product `K^(n)(x,z) . u`.
    pub fn weights_from_draw(&self, z_draw: &DVector<f64>) -> DVector<f64> {
        self.chol_q
            .tr_solve_lower_triangular(z_draw)
            .expect("fantasy factor has positive diagonal")
    }

    /// Fantasy posterior mean `mu^(n)(x) + sigma_tilde(x, z) Z` with the draw
    /// pre-transformed by `weights_from_draw`.
    pub fn fantasy_mean(&self, x: &DVector<f64>, weights: &DVector<f64>) -> f64 {
        self.post.mean_at(x) + self.cross_cov(x).dot(weights)
    }

    /// Convenience form taking the raw draw.
    pub fn fantasy_mean_draw(&self, x: &DVector<f64>, z_draw: &DVector<f64>) -> f64 {
        self.fantasy_mean(x, &self.weights_from_draw(z_draw))
    }

    /// Gradient in `x` of the fantasy posterior mean.
    pub fn fantasy_mean_grad(
        &self,
        x: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let mut grad = self.post.mean_grad(x)?;
        for j in 0..self.q() {
            let gj = self.post.cov_grad_x1(x, &self.batch.row(j).transpose())?;
            grad += gj * weights[j];
        }
        Ok(grad)
    }

    /// Variance removed at `x` by observing the batch:
    /// `sigma_tilde sigma_tilde^T = K^(n)(x,x) - K^(n+q)(x,x)`.
    pub fn variance_reduction(&self, x: &DVector<f64>) -> f64 {
        let s = self.sigma_tilde(x);
        s.dot(&s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct KernelDoc {
    pub kind: String,
    pub params: Vec<f64>,
}

/// JSON schema for one fitted model, keyed by output index.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GpModelDoc {
    pub output_index: usize,
    pub mean: f64,
    pub kernel: KernelDoc,
    pub noise_var: f64,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}
