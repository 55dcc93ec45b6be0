//! Box search domains.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CkgError, Result};

/// Axis-aligned box in `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(CkgError::invalid(format!(
                "domain bounds must be nonempty and of equal length, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(CkgError::invalid(format!(
                    "domain axis {k}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    /// 1-d convenience constructor.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Domain::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn mean_width(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).sum::<f64>() / self.dim() as f64
    }

    /// Membership with a relative slack of one part in 1e12 per axis, so that
    /// points produced by `clip` always test as inside.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        x.iter().enumerate().all(|(k, &v)| {
            let slack = 1e-12 * self.width(k);
            v >= self.lower[k] - slack && v <= self.upper[k] + slack
        })
    }

    pub fn clip(&self, x: &mut DVector<f64>) {
        for k in 0..self.dim() {
            x[k] = x[k].clamp(self.lower[k], self.upper[k]);
        }
    }

    pub fn clipped(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        self.clip(&mut y);
        y
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| {
            self.lower[k] + rng.random::<f64>() * self.width(k)
        })
    }

    /// Latin hypercube sample of `n` points: along every axis the n values
    /// occupy the n equal-width strata in a random permutation.
    pub fn latin_hypercube<R: Rng>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        for k in 0..d {
            let mut strata: Vec<usize> = (0..n).collect();
            // Fisher-Yates with the shared stream.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                strata.swap(i, j);
            }
            for (i, s) in strata.iter().enumerate() {
                let u: f64 = rng.random();
                out[(i, k)] = self.lower[k] + (*s as f64 + u) * self.width(k) / n as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    #[test]
    fn rejects_bad_bounds() {
        assert!(Domain::new(vec![0.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![1.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![], vec![]).is_err());
        assert!(Domain::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(Domain::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn clip_and_contains_agree() {
        let dom = Domain::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let mut x = DVector::from_vec(vec![5.0, -3.0]);
        assert!(!dom.contains(&x));
        dom.clip(&mut x);
        assert!(dom.contains(&x));
        assert_eq!(x, DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn latin_hypercube_stratifies_each_axis() {
        let dom = Domain::new(vec![0.0, -2.0], vec![1.0, 2.0]).unwrap();
        let n = 16;
        let mut rng = rng_from(11);
        let design = dom.latin_hypercube(n, &mut rng);
        for k in 0..2 {
            let mut seen = vec![false; n];
            for i in 0..n {
                let u = (design[(i, k)] - dom.lower()[k]) / dom.width(k);
                let s = (u * n as f64).floor() as usize;
                assert!(s < n, "point outside domain");
                assert!(!seen[s], "stratum {s} hit twice on axis {k}");
                seen[s] = true;
            }
        }
    }

    #[test]
    fn latin_hypercube_is_seeded() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let a = dom.latin_hypercube(8, &mut rng_from(3));
        let b = dom.latin_hypercube(8, &mut rng_from(3));
        assert_eq!(a, b);
    }
}
