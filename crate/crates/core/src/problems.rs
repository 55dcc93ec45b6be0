//! Synthetic constrained test problems with controllable Gaussian observation
//! noise and exhaustive grid ground truth.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use evalexpr::{build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::Domain;
use crate::error::{CkgError, Result};
use crate::seeding::rng_from;

type OutputFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Reference optimum with provenance.
#[derive(Clone, Debug)]
pub struct KnownOptimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Feasible minimum over a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOptimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// A black-box test problem: analytic objective `g_0` and constraints
/// `g_1..g_m`, evaluated through a noisy observation channel. The harness
/// treats the closures as opaque.
pub struct ProblemSpec {
    name: String,
    domain: Domain,
    outputs: Vec<OutputFn>,
    noise: Vec<f64>,
    known_optimum: Option<KnownOptimum>,
    oracle_cache: Mutex<BTreeMap<u32, GridOptimum>>,
}

impl Clone for ProblemSpec {
    fn clone(&self) -> Self {
        ProblemSpec {
            name: self.name.clone(),
            domain: self.domain.clone(),
            outputs: self.outputs.clone(),
            noise: self.noise.clone(),
            known_optimum: self.known_optimum.clone(),
            oracle_cache: Mutex::new(self.oracle_cache.lock().unwrap().clone()),
        }
    }
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("outputs", &self.outputs.len())
            .field("noise", &self.noise)
            .finish()
    }
}

impl ProblemSpec {
    /// Built-in suite. Names: `toy-1d`, `disk-2d`, `branin-c`. All start
    /// noise-free; apply [`ProblemSpec::with_noise_scale`] for the noisy
    /// variants.
    pub fn builtin(name: &str) -> Result<ProblemSpec> {
        match name {
            "toy-1d" => Ok(ProblemSpec {
                name: name.to_string(),
                domain: Domain::interval(-1.0, 1.0)?,
                outputs: vec![
                    Arc::new(|x: &DVector<f64>| (3.0 * x[0]).sin() + x[0] * x[0]),
                    Arc::new(|x: &DVector<f64>| 0.4 - x[0]),
                ],
                noise: vec![0.0; 2],
                // boundary minimum of sin(3x)+x^2 on the feasible half x >= 0.4
                known_optimum: Some(KnownOptimum {
                    x: vec![0.4],
                    value: 1.2f64.sin() + 0.16,
                }),
                oracle_cache: Mutex::new(BTreeMap::new()),
            }),
            "disk-2d" => Ok(ProblemSpec {
                name: name.to_string(),
                domain: Domain::new(vec![-2.0, -2.0], vec![2.0, 2.0])?,
                outputs: vec![
                    Arc::new(|x: &DVector<f64>| x[0] + x[1]),
                    Arc::new(|x: &DVector<f64>| x[0] * x[0] + x[1] * x[1] - 1.0),
                ],
                noise: vec![0.0; 2],
                // symmetric tangency point of the linear objective on the disk
                known_optimum: Some(KnownOptimum {
                    x: vec![-0.5f64.sqrt(), -0.5f64.sqrt()],
                    value: -2.0f64.sqrt(),
                }),
                oracle_cache: Mutex::new(BTreeMap::new()),
            }),
            "branin-c" => Ok(ProblemSpec {
                name: name.to_string(),
                domain: Domain::new(vec![-5.0, 0.0], vec![10.0, 15.0])?,
                outputs: vec![
                    Arc::new(|x: &DVector<f64>| branin(x[0], x[1])),
                    Arc::new(|x: &DVector<f64>| {
                        (x[0] - 2.5).powi(2) + (x[1] - 7.5).powi(2) - 50.0
                    }),
                ],
                noise: vec![0.0; 2],
                // the only branin global minimizer inside the disk constraint
                known_optimum: Some(KnownOptimum {
                    x: vec![std::f64::consts::PI, 2.275],
                    value: 0.397_887_357_729_738_1,
                }),
                oracle_cache: Mutex::new(BTreeMap::new()),
            }),
            other => Err(CkgError::invalid(format!("unknown builtin problem {other:?}"))),
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["toy-1d", "disk-2d", "branin-c"]
    }

    /// Problem defined by expression strings over variables `x1..xd`, the
    /// first expression being the objective. Supported: arithmetic with `^`,
    /// `sin`, `cos`, `tan`, `exp`, `ln`, `sqrt`, `abs`, and the constants
    /// `pi`, `e`.
    pub fn from_expressions(
        name: &str,
        domain: Domain,
        expressions: &[String],
        noise: Vec<f64>,
    ) -> Result<ProblemSpec> {
        if expressions.is_empty() {
            return Err(CkgError::invalid("need at least an objective expression"));
        }
        if noise.len() != expressions.len() {
            return Err(CkgError::invalid(
                "need one noise level per expression (objective first)",
            ));
        }
        if noise.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CkgError::invalid("noise levels must be finite and >= 0"));
        }
        let d = domain.dim();
        let mut outputs: Vec<OutputFn> = Vec::with_capacity(expressions.len());
        for (i, text) in expressions.iter().enumerate() {
            let node = build_operator_tree(text).map_err(|e| {
                CkgError::invalid(format!("expression {i} ({text:?}) failed to parse: {e}"))
            })?;
            // probe once at the domain midpoint so bad variable names fail at
            // construction, not mid-run
            let mid = DVector::from_fn(d, |k, _| {
                0.5 * (domain.lower()[k] + domain.upper()[k])
            });
            eval_expression(&node, &mid).map_err(|e| {
                CkgError::invalid(format!("expression {i} ({text:?}) failed to evaluate: {e}"))
            })?;
            let node = Arc::new(node);
            outputs.push(Arc::new(move |x: &DVector<f64>| {
                eval_expression(&node, x).unwrap_or(f64::NAN)
            }));
        }
        Ok(ProblemSpec {
            name: name.to_string(),
            domain,
            outputs,
            noise,
            known_optimum: None,
            oracle_cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn known_optimum(&self) -> Option<&KnownOptimum> {
        self.known_optimum.as_ref()
    }

    /// Noise-free value of output `i` at `x`.
    pub fn analytic(&self, i: usize, x: &DVector<f64>) -> f64 {
        (self.outputs[i])(x)
    }

    /// True feasibility of `x` under the analytic constraints.
    pub fn true_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        (1..self.n_outputs()).all(|i| self.analytic(i, x) <= tol)
    }

    /// Sets each output's noise standard deviation to `scale` times that
    /// output's range over a 101-per-axis lattice.
    pub fn with_noise_scale(mut self, scale: f64) -> Result<ProblemSpec> {
        if scale < 0.0 || !scale.is_finite() {
            return Err(CkgError::invalid("noise scale must be finite and >= 0"));
        }
        let mut noise = Vec::with_capacity(self.n_outputs());
        for i in 0..self.n_outputs() {
            let (lo, hi) = self.grid_output_range(i, 101)?;
            noise.push(scale * (hi - lo));
        }
        self.noise = noise;
        Ok(self)
    }

    /// Range of output `i` over a lattice, used for noise scaling and regret
    /// normalization.
    pub fn grid_output_range(&self, i: usize, resolution: u32) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        self.for_each_grid_point(resolution, |x| {
            let v = self.analytic(i, x);
            lo = lo.min(v);
            hi = hi.max(v);
        })?;
        Ok((lo, hi))
    }

    /// One noisy evaluation of all outputs, drawing noise from the supplied
    /// stream (independent across outputs and calls).
    pub fn evaluate<R: Rng>(&self, x: &DVector<f64>, rng: &mut R) -> Result<Vec<f64>> {
        if !self.domain.contains(x) {
            return Err(CkgError::invalid(format!(
                "evaluation point {x:?} lies outside the domain"
            )));
        }
        Ok((0..self.n_outputs())
            .map(|i| self.analytic(i, x) + self.noise[i] * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// Seeded convenience wrapper over [`ProblemSpec::evaluate`].
    pub fn evaluate_seeded(&self, x: &DVector<f64>, seed: u64) -> Result<Vec<f64>> {
        self.evaluate(x, &mut rng_from(seed))
    }

    /// Exhaustive feasible minimum of the analytic objective over a lattice
    /// with `resolution` points per axis (endpoints included). Cached per
    /// resolution.
    pub fn grid_oracle(&self, resolution: u32) -> Result<GridOptimum> {
        if let Some(hit) = self.oracle_cache.lock().unwrap().get(&resolution) {
            return Ok(hit.clone());
        }
        let mut best: Option<GridOptimum> = None;
        self.for_each_grid_point(resolution, |x| {
            if (1..self.n_outputs()).all(|i| self.analytic(i, x) <= 0.0) {
                let v = self.analytic(0, x);
                if best.as_ref().map_or(true, |b| v < b.value) {
                    best = Some(GridOptimum {
                        x: x.iter().copied().collect(),
                        value: v,
                    });
                }
            }
        })?;
        let best = best.ok_or_else(|| {
            CkgError::InfeasibleProblem(format!(
                "{}: no feasible point on the {resolution}-per-axis lattice",
                self.name
            ))
        })?;
        self.oracle_cache
            .lock()
            .unwrap()
            .insert(resolution, best.clone());
        Ok(best)
    }

    fn for_each_grid_point(
        &self,
        resolution: u32,
        mut visit: impl FnMut(&DVector<f64>),
    ) -> Result<()> {
        let d = self.domain.dim();
        if d > 3 {
            return Err(CkgError::invalid(
                "grid scans are limited to problems with d <= 3",
            ));
        }
        if !(2..=401).contains(&resolution) {
            return Err(CkgError::invalid("grid resolution must lie in [2, 401]"));
        }
        let r = resolution as usize;
        let total = r.pow(d as u32);
        let mut x = DVector::zeros(d);
        for flat in 0..total {
            let mut rem = flat;
            for k in 0..d {
                let i = rem % r;
                rem /= r;
                x[k] = self.domain.lower()[k]
                    + self.domain.width(k) * i as f64 / (r - 1) as f64;
            }
            visit(&x);
        }
        Ok(())
    }
}

/// Branin function in its standard parameterization.
fn branin(x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

fn eval_expression(
    node: &evalexpr::Node,
    x: &DVector<f64>,
) -> std::result::Result<f64, evalexpr::EvalexprError> {
    let mut ctx = evalexpr::HashMapContext::new();
    for k in 0..x.len() {
        ctx.set_value(format!("x{}", k + 1), evalexpr::Value::Float(x[k]))?;
    }
    ctx.set_value("pi".to_string(), evalexpr::Value::Float(std::f64::consts::PI))?;
    ctx.set_value("e".to_string(), evalexpr::Value::Float(std::f64::consts::E))?;
    for (name, f) in [
        ("sin", f64::sin as fn(f64) -> f64),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("log", f64::log10),
        ("sqrt", f64::sqrt),
        ("abs", f64::abs),
    ] {
        ctx.set_function(
            name.to_string(),
            evalexpr::Function::new(move |arg| Ok(evalexpr::Value::Float(f(arg.as_number()?)))),
        )?;
    }
    node.eval_with_context(&ctx)?.as_number()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn toy_1d_closed_form_values() {
        let p = ProblemSpec::builtin("toy-1d").unwrap();
        let x = dvector![0.5];
        assert!((p.analytic(0, &x) - (1.5f64.sin() + 0.25)).abs() < 1e-15);
        assert!((p.analytic(1, &x) + 0.1).abs() < 1e-15);
        // noiseless evaluation is deterministic
        let obs = p.evaluate_seeded(&x, 3).unwrap();
        assert_eq!(obs, vec![p.analytic(0, &x), p.analytic(1, &x)]);
    }

    #[test]
    fn out_of_domain_evaluation_rejected() {
        let p = ProblemSpec::builtin("toy-1d").unwrap();
        assert!(p.evaluate_seeded(&dvector![2.0], 0).is_err());
    }

    #[test]
    fn noise_means_converge_to_analytic_values() {
        let p = ProblemSpec::builtin("toy-1d")
            .unwrap()
            .with_noise_scale(0.05)
            .unwrap();
        let x = dvector![0.2];
        let mut rng = rng_from(17);
        let reps = 100_000;
        let mut sums = vec![0.0; 2];
        for _ in 0..reps {
            let obs = p.evaluate(&x, &mut rng).unwrap();
            for (s, o) in sums.iter_mut().zip(&obs) {
                *s += o;
            }
        }
        for i in 0..2 {
            let mean = sums[i] / reps as f64;
            let se = p.noise()[i] / (reps as f64).sqrt();
            assert!(
                (mean - p.analytic(i, &x)).abs() <= 3.0 * se,
                "output {i}: {mean} vs {}",
                p.analytic(i, &x)
            );
        }
    }

    #[test]
    fn noise_stream_reproducible() {
        let p = ProblemSpec::builtin("disk-2d")
            .unwrap()
            .with_noise_scale(0.05)
            .unwrap();
        let x = dvector![0.5, -0.5];
        assert_eq!(
            p.evaluate_seeded(&x, 11).unwrap(),
            p.evaluate_seeded(&x, 11).unwrap()
        );
        assert_ne!(
            p.evaluate_seeded(&x, 11).unwrap(),
            p.evaluate_seeded(&x, 12).unwrap()
        );
    }

    #[test]
    fn grid_oracle_matches_known_optima() {
        // Position can wander along flat constraint boundaries (the lattice
        // argmin of disk-2d slides around the circle), so the record is
        // checked through the objective value: the lattice value may not beat
        // the true optimum and must come within one cell's worth of objective
        // variation of it.
        for name in ProblemSpec::builtin_names() {
            let p = ProblemSpec::builtin(name).unwrap();
            let oracle = p.grid_oracle(401).unwrap();
            let known = p.known_optimum().unwrap();
            assert!(
                oracle.value >= known.value - 1e-9,
                "{name}: grid value below the true optimum"
            );
            let (lo, hi) = p.grid_output_range(0, 101).unwrap();
            assert!(
                oracle.value - known.value <= 0.01 * (hi - lo),
                "{name}: grid value {} too far above known optimum {}",
                oracle.value,
                known.value
            );
            // known optimum must itself be feasible
            let kx = DVector::from_vec(known.x.clone());
            assert!(p.true_feasible(&kx, 1e-9));
        }
    }

    #[test]
    fn toy_1d_oracle_is_the_constraint_boundary() {
        let p = ProblemSpec::builtin("toy-1d").unwrap();
        let oracle = p.grid_oracle(401).unwrap();
        assert!((oracle.x[0] - 0.4).abs() <= 2.0 / 400.0 + 1e-12);
        // unconstrained variant: drop the constraint
        let unconstrained = ProblemSpec::from_expressions(
            "toy-1d-free",
            Domain::interval(-1.0, 1.0).unwrap(),
            &["sin(3*x1) + x1^2".to_string()],
            vec![0.0],
        )
        .unwrap();
        let free = unconstrained.grid_oracle(401).unwrap();
        assert!(free.value < oracle.value);
        assert!(free.x[0] < 0.0, "free minimum sits at negative x");
    }

    #[test]
    fn infeasible_problem_reported() {
        let p = ProblemSpec::from_expressions(
            "hopeless",
            Domain::interval(0.0, 1.0).unwrap(),
            &["x1".to_string(), "1".to_string()],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            p.grid_oracle(51),
            Err(CkgError::InfeasibleProblem(_))
        ));
    }

    #[test]
    fn expression_problems_match_builtins() {
        let expr = ProblemSpec::from_expressions(
            "toy-1d-expr",
            Domain::interval(-1.0, 1.0).unwrap(),
            &["sin(3*x1) + x1^2".to_string(), "0.4 - x1".to_string()],
            vec![0.0, 0.0],
        )
        .unwrap();
        let builtin = ProblemSpec::builtin("toy-1d").unwrap();
        for xv in [-0.9, -0.3, 0.0, 0.4, 0.77] {
            let x = dvector![xv];
            for i in 0..2 {
                assert!(
                    (expr.analytic(i, &x) - builtin.analytic(i, &x)).abs() < 1e-12,
                    "output {i} at {xv}"
                );
            }
        }
    }

    #[test]
    fn bad_expressions_rejected_at_construction() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        assert!(ProblemSpec::from_expressions(
            "broken",
            dom.clone(),
            &["sin(".to_string()],
            vec![0.0]
        )
        .is_err());
        assert!(ProblemSpec::from_expressions(
            "unknown-var",
            dom,
            &["x7 + 1".to_string()],
            vec![0.0]
        )
        .is_err());
    }
}
