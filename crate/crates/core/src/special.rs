//! Scalar special functions shared across modules.

use statrs::function::erf::erfc;
use statrs::function::gamma::gamma;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Modified Bessel function of the second kind, real order `nu >= 0`,
/// argument `x > 0`.
///
/// Evaluated through the integral representation
/// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt`
/// with composite Simpson quadrature on a truncated interval. Accuracy is
/// plenty for kernel evaluation; the closed-form half-integer orders in the
/// Matern kernel do not route through here.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k requires nu >= 0, x > 0");
    // Truncate where the integrand underflows: x*cosh(t) - nu*t > 745.
    let mut t_max = 1.0f64;
    while x * t_max.cosh() - nu * t_max < 745.0 && t_max < 200.0 {
        t_max += 0.5;
    }
    let n = 4000; // even panel count
    let h = t_max / n as f64;
    let integrand = |t: f64| {
        let e = -x * t.cosh();
        if e < -745.0 {
            0.0
        } else {
            e.exp() * (nu * t).cosh()
        }
    };
    let mut acc = integrand(0.0) + integrand(t_max);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * h);
    }
    acc * h / 3.0
}

/// Gamma function re-export point so callers do not reach into statrs.
pub fn gamma_fn(x: f64) -> f64 {
    gamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_points() {
        // statrs' erfc carries ~1e-11 absolute error, plenty for probabilities.
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-10);
        assert!((normal_cdf(-1.0) - (1.0 - 0.841_344_746_068_543)).abs() < 1e-10);
        assert!(normal_cdf(-40.0) >= 0.0);
    }

    #[test]
    fn bessel_k_half_integer_closed_forms() {
        // K_{1/2}(x) = sqrt(pi/(2x)) e^{-x}
        for &x in &[0.3, 1.0, 2.5, 7.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            let got = bessel_k(0.5, x);
            assert!(
                (got - exact).abs() <= 1e-9 * exact.max(1e-300),
                "K_1/2({x}): {got} vs {exact}"
            );
        }
        // K_{3/2}(x) = sqrt(pi/(2x)) e^{-x} (1 + 1/x)
        for &x in &[0.5, 1.0, 3.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 1.0 / x);
            let got = bessel_k(1.5, x);
            assert!((got - exact).abs() <= 1e-9 * exact, "K_3/2({x})");
        }
    }

    #[test]
    fn bessel_k_symmetric_recurrence() {
        // K_{nu+1}(x) = K_{nu-1}(x) + (2 nu / x) K_nu(x)
        let (nu, x) = (1.3, 2.2);
        let lhs = bessel_k(nu + 1.0, x);
        let rhs = bessel_k(nu - 1.0, x) + (2.0 * nu / x) * bessel_k(nu, x);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs());
    }
}
