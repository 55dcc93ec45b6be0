//! Stationary covariance kernels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CkgError, Result};
use crate::special::{bessel_k, gamma_fn};

/// Covariance kernel with its hyperparameters.
///
/// The Gaussian kernel is `a0 * exp(-sum_k a_k (x_k - y_k)^2)` with one
/// nonnegative inverse squared lengthscale `a_k` per input dimension. The
/// Matern kernel is isotropic with amplitude, smoothness `nu` and a single
/// lengthscale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Gaussian {
        amplitude: f64,
        inv_lengthscales: Vec<f64>,
    },
    Matern {
        amplitude: f64,
        nu: f64,
        lengthscale: f64,
    },
}

impl KernelSpec {
    pub fn gaussian(amplitude: f64, inv_lengthscales: Vec<f64>) -> Self {
        KernelSpec::Gaussian {
            amplitude,
            inv_lengthscales,
        }
    }

    pub fn matern(amplitude: f64, nu: f64, lengthscale: f64) -> Self {
        KernelSpec::Matern {
            amplitude,
            nu,
            lengthscale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian {
                amplitude,
                inv_lengthscales,
            } => {
                if !(*amplitude > 0.0) || !amplitude.is_finite() {
                    return Err(CkgError::invalid("gaussian kernel needs amplitude > 0"));
                }
                if inv_lengthscales.is_empty()
                    || inv_lengthscales.iter().any(|a| !a.is_finite() || *a < 0.0)
                {
                    return Err(CkgError::invalid(
                        "gaussian kernel needs nonnegative finite inverse lengthscales",
                    ));
                }
            }
            KernelSpec::Matern {
                amplitude,
                nu,
                lengthscale,
            } => {
                if !(*amplitude > 0.0) || !(*nu > 0.0) || !(*lengthscale > 0.0) {
                    return Err(CkgError::invalid(
                        "matern kernel needs amplitude, nu and lengthscale > 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Input dimension pinned by the hyperparameters, if any. The Matern
    /// kernel is isotropic and accepts any dimension.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Gaussian {
                inv_lengthscales, ..
            } => Some(inv_lengthscales.len()),
            KernelSpec::Matern { .. } => None,
        }
    }

    pub fn amplitude(&self) -> f64 {
        match self {
            KernelSpec::Gaussian { amplitude, .. } => *amplitude,
            KernelSpec::Matern { amplitude, .. } => *amplitude,
        }
    }

    fn check_dims(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<()> {
        if x1.len() != x2.len() {
            return Err(CkgError::invalid(format!(
                "kernel arguments disagree in dimension: {} vs {}",
                x1.len(),
                x2.len()
            )));
        }
        if let Some(d) = self.input_dim() {
            if x1.len() != d {
                return Err(CkgError::invalid(format!(
                    "kernel expects dimension {d}, got {}",
                    x1.len()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
        self.check_dims(x1, x2)?;
        Ok(self.eval_unchecked(x1, x2))
    }

    pub(crate) fn eval_unchecked(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> f64 {
        match self {
            KernelSpec::Gaussian {
                amplitude,
                inv_lengthscales,
            } => {
                let mut s = 0.0;
                for k in 0..x1.len() {
                    let dk = x1[k] - x2[k];
                    s += inv_lengthscales[k] * dk * dk;
                }
                amplitude * (-s).exp()
            }
            KernelSpec::Matern {
                amplitude,
                nu,
                lengthscale,
            } => {
                let r = (x1 - x2).norm();
                amplitude * matern_correlation(*nu, r / lengthscale)
            }
        }
    }

    /// Kernel matrix `[eval(x1_i, x2_j)]` for row-stacked inputs.
    pub fn matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x1.ncols() != x2.ncols() {
            return Err(CkgError::invalid(
                "kernel_matrix inputs disagree in dimension",
            ));
        }
        if let Some(d) = self.input_dim() {
            if x1.ncols() != d {
                return Err(CkgError::invalid(format!(
                    "kernel_matrix expects dimension {d}, got {}",
                    x1.ncols()
                )));
            }
        }
        let mut out = DMatrix::zeros(x1.nrows(), x2.nrows());
        for i in 0..x1.nrows() {
            let xi = x1.row(i).transpose();
            for j in 0..x2.nrows() {
                let xj = x2.row(j).transpose();
                out[(i, j)] = self.eval_unchecked(&xi, &xj);
            }
        }
        Ok(out)
    }

    /// True when the kernel is continuously differentiable, which the
    /// gradient estimator requires. Matern smoothness below 3/2 fails this.
    pub fn supports_gradients(&self) -> bool {
        match self {
            KernelSpec::Gaussian { .. } => true,
            KernelSpec::Matern { nu, .. } => *nu >= 1.5 - 1e-12,
        }
    }

    /// Gradient of `eval(x1, x2)` with respect to `x1`.
    pub fn grad_x1(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x1, x2)?;
        if !self.supports_gradients() {
            return Err(CkgError::UnsupportedSmoothness(
                "matern kernel gradients require nu >= 3/2".to_string(),
            ));
        }
        Ok(self.grad_x1_unchecked(x1, x2))
    }

    pub(crate) fn grad_x1_unchecked(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        match self {
            KernelSpec::Gaussian {
                inv_lengthscales, ..
            } => {
                let k = self.eval_unchecked(x1, x2);
                DVector::from_fn(x1.len(), |i, _| {
                    -2.0 * inv_lengthscales[i] * (x1[i] - x2[i]) * k
                })
            }
            KernelSpec::Matern {
                amplitude,
                nu,
                lengthscale,
            } => {
                let diff = x1 - x2;
                let r = diff.norm();
                // radial factor f'(r)/r, finite as r -> 0 for nu > 1
                let g = amplitude * matern_radial_slope(*nu, r, *lengthscale);
                diff * g
            }
        }
    }

    /// Flat hyperparameter list used by the serialized model schema:
    /// gaussian `[amplitude, a_1..a_d]`, matern `[amplitude, nu, lengthscale]`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            KernelSpec::Gaussian {
                amplitude,
                inv_lengthscales,
            } => {
                let mut v = vec![*amplitude];
                v.extend_from_slice(inv_lengthscales);
                v
            }
            KernelSpec::Matern {
                amplitude,
                nu,
                lengthscale,
            } => vec![*amplitude, *nu, *lengthscale],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::Matern { .. } => "matern",
        }
    }

    pub fn from_kind_params(kind: &str, params: &[f64]) -> Result<Self> {
        match kind {
            "gaussian" => {
                if params.len() < 2 {
                    return Err(CkgError::invalid("gaussian kernel needs >= 2 params"));
                }
                Ok(KernelSpec::gaussian(params[0], params[1..].to_vec()))
            }
            "matern" => {
                if params.len() != 3 {
                    return Err(CkgError::invalid("matern kernel needs exactly 3 params"));
                }
                Ok(KernelSpec::matern(params[0], params[1], params[2]))
            }
            other => Err(CkgError::invalid(format!("unknown kernel kind {other:?}"))),
        }
    }
}

fn is_half_integer(nu: f64, half: f64) -> bool {
    (nu - half).abs() < 1e-12
}

/// Matern correlation at scaled distance `h = r / lengthscale`, normalized to
/// 1 at `h = 0`. Half-integer orders use their closed forms; any other order
/// goes through the Bessel representation.
fn matern_correlation(nu: f64, h: f64) -> f64 {
    if h <= 0.0 {
        return 1.0;
    }
    if is_half_integer(nu, 0.5) {
        (-h).exp()
    } else if is_half_integer(nu, 1.5) {
        let s = 3.0f64.sqrt() * h;
        (1.0 + s) * (-s).exp()
    } else if is_half_integer(nu, 2.5) {
        let s = 5.0f64.sqrt() * h;
        (1.0 + s + s * s / 3.0) * (-s).exp()
    } else {
        let s = (2.0 * nu).sqrt() * h;
        let c = 2.0f64.powf(1.0 - nu) / gamma_fn(nu) * s.powf(nu) * bessel_k(nu, s);
        // Quadrature noise can push the correlation epsilon above 1 near 0.
        c.clamp(0.0, 1.0)
    }
}

/// `f'(r)/r` for the Matern correlation `f(r)` at raw distance `r`, where the
/// prefactors put it directly into `d/dx1 K = amplitude * (f'(r)/r) * (x1-x2)`.
fn matern_radial_slope(nu: f64, r: f64, ell: f64) -> f64 {
    if is_half_integer(nu, 1.5) {
        let s = 3.0f64.sqrt() * r / ell;
        -3.0 / (ell * ell) * (-s).exp()
    } else if is_half_integer(nu, 2.5) {
        let s = 5.0f64.sqrt() * r / ell;
        -5.0 / (3.0 * ell * ell) * (1.0 + s) * (-s).exp()
    } else {
        // d/ds [2^{1-nu}/Gamma(nu) s^nu K_nu(s)] = -2^{1-nu}/Gamma(nu) s^nu K_{nu-1}(s)
        if r <= 0.0 {
            return 0.0;
        }
        let s = (2.0 * nu).sqrt() * r / ell;
        let dc_ds = -(2.0f64.powf(1.0 - nu) / gamma_fn(nu)) * s.powf(nu) * bessel_k(nu - 1.0, s);
        dc_ds * (2.0 * nu).sqrt() / ell / r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    use crate::seeding::rng_from;
    use rand::Rng;

    #[test]
    fn gaussian_reference_values() {
        let k = KernelSpec::gaussian(1.0, vec![1.0]);
        assert_eq!(k.eval(&dvector![0.0], &dvector![0.0]).unwrap(), 1.0);
        let v = k.eval(&dvector![0.0], &dvector![1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = KernelSpec::gaussian(1.0, vec![1.0, 2.0]);
        assert!(k.eval(&dvector![0.0], &dvector![0.0]).is_err());
        let x1 = DMatrix::from_row_slice(1, 1, &[0.0]);
        let x2 = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(k.matrix(&x1, &x2).is_err());
    }

    #[test]
    fn matern_half_nu_matches_bessel_oracle() {
        // Independent oracle: evaluate the Bessel-form directly at nu = 1/2
        // where the closed form is exp(-r).
        let k = KernelSpec::matern(1.0, 0.5, 1.0);
        let got = k.eval(&dvector![0.0], &dvector![1.0]).unwrap();
        let s = (2.0f64 * 0.5).sqrt() * 1.0;
        let oracle = 2.0f64.powf(0.5) / gamma_fn(0.5) * s.powf(0.5) * bessel_k(0.5, s);
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn matern_closed_forms_match_bessel_route() {
        // The 3/2 and 5/2 closed forms and the generic Bessel path must agree.
        for &(nu, r) in &[(1.5, 0.3), (1.5, 1.7), (2.5, 0.3), (2.5, 2.2)] {
            let closed = matern_correlation(nu, r);
            let s = (2.0 * nu as f64).sqrt() * r;
            let bessel = 2.0f64.powf(1.0 - nu) / gamma_fn(nu) * s.powf(nu) * bessel_k(nu, s);
            assert!(
                (closed - bessel).abs() < 1e-8,
                "nu={nu} r={r}: {closed} vs {bessel}"
            );
        }
    }

    #[test]
    fn matern_amplitude_at_zero_distance() {
        for &nu in &[0.5, 1.5, 2.5, 1.8] {
            let k = KernelSpec::matern(2.5, nu, 0.7);
            let v = k.eval(&dvector![0.4, -0.2], &dvector![0.4, -0.2]).unwrap();
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn kernel_matrix_entries_and_symmetry() {
        let k = KernelSpec::gaussian(1.3, vec![2.0]);
        let mut rng = rng_from(6);
        let x = DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>());
        let m = k.matrix(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = k
                    .eval(&x.row(i).transpose(), &x.row(j).transpose())
                    .unwrap();
                assert_eq!(m[(i, j)], e);
            }
        }
        assert_eq!(m, m.transpose());
        // single point
        let single = DMatrix::from_row_slice(1, 1, &[0.2]);
        let m1 = k.matrix(&single, &single).unwrap();
        assert_eq!(m1[(0, 0)], 1.3);
        // cross matrix transposes
        let y = DMatrix::from_fn(2, 1, |_, _| rng.random::<f64>());
        let kxy = k.matrix(&x, &y).unwrap();
        let kyx = k.matrix(&y, &x).unwrap();
        assert_eq!(kxy, kyx.transpose());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let kernels = [
            KernelSpec::gaussian(1.2, vec![0.8, 2.5]),
            KernelSpec::matern(0.9, 1.5, 1.3),
            KernelSpec::matern(1.1, 2.5, 0.6),
            KernelSpec::matern(1.0, 3.2, 0.9),
        ];
        let mut rng = rng_from(10);
        for k in &kernels {
            for _ in 0..10 {
                let x1 = DVector::from_fn(2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let x2 = DVector::from_fn(2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let g = k.grad_x1(&x1, &x2).unwrap();
                let h = 1e-6;
                for c in 0..2 {
                    let mut xp = x1.clone();
                    xp[c] += h;
                    let mut xm = x1.clone();
                    xm[c] -= h;
                    let fd =
                        (k.eval(&xp, &x2).unwrap() - k.eval(&xm, &x2).unwrap()) / (2.0 * h);
                    assert!(
                        (g[c] - fd).abs() < 1e-4 * (1.0 + fd.abs()),
                        "{:?} component {c}: {} vs {}",
                        k.kind_name(),
                        g[c],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn rough_matern_gradient_rejected() {
        let k = KernelSpec::matern(1.0, 0.5, 1.0);
        let e = k.grad_x1(&dvector![0.0], &dvector![1.0]);
        assert!(matches!(e, Err(CkgError::UnsupportedSmoothness(_))));
    }

    #[test]
    fn matern_gradient_vanishes_at_coincident_points() {
        for &nu in &[1.5, 2.5, 3.0] {
            let k = KernelSpec::matern(1.0, nu, 1.0);
            let g = k.grad_x1(&dvector![0.3], &dvector![0.3]).unwrap();
            assert_eq!(g[0], 0.0);
        }
    }

    #[test]
    fn serde_round_trip() {
        let k = KernelSpec::gaussian(1.5, vec![0.5, 4.0]);
        let s = serde_json::to_string(&k).unwrap();
        let back: KernelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(k, back);
        let m = KernelSpec::matern(2.0, 2.5, 0.8);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(m, serde_json::from_str::<KernelSpec>(&s).unwrap());
    }
}
