//! Experiment configuration: a human-editable TOML file describing the
//! (problem, acquisition) matrix. Parsing fills documented defaults in place,
//! so a parsed config serializes back to an equivalent file, and validation
//! reports every problem found rather than the first.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ckg_core::domain::Domain;
use ckg_core::engine::{Acquisition, BoConfig, KernelChoice};
use ckg_core::problems::ProblemSpec;
use ckg_core::solvers::{InnerParams, SgaParams};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub output_dir: String,
    /// Worker pool size for cells x replications.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub custom_problems: Vec<CustomProblem>,
    pub cells: Vec<Cell>,
}

fn default_jobs() -> usize {
    1
}

/// One experiment row: a problem, an acquisition, and its loop settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Cell {
    pub problem: String,
    pub acquisition: String,
    pub replications: usize,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    /// Observation noise as a fraction of each output's grid range.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_refit_every")]
    pub refit_every: usize,
    #[serde(default = "default_fit_restarts")]
    pub fit_restarts: usize,
    /// `0` selects `100 * d`.
    #[serde(default)]
    pub ckg_grid_size: usize,
    /// `0` selects `256 * d`.
    #[serde(default)]
    pub baseline_candidates: usize,
    #[serde(default = "default_kg_replications")]
    pub kg_replications: usize,
    #[serde(default = "default_sga_restarts")]
    pub sga_restarts: usize,
    #[serde(default = "default_sga_max_steps")]
    pub sga_max_steps: usize,
    #[serde(default = "default_sga_grad_replications")]
    pub sga_grad_replications: usize,
    #[serde(default = "default_sga_rescore_replications")]
    pub sga_rescore_replications: usize,
}

fn default_n0() -> usize {
    6
}
fn default_iterations() -> usize {
    25
}
fn default_q() -> usize {
    1
}
fn default_noise_scale() -> f64 {
    0.05
}
fn default_refit_every() -> usize {
    1
}
fn default_fit_restarts() -> usize {
    4
}
fn default_kg_replications() -> usize {
    64
}
fn default_sga_restarts() -> usize {
    8
}
fn default_sga_max_steps() -> usize {
    60
}
fn default_sga_grad_replications() -> usize {
    64
}
fn default_sga_rescore_replications() -> usize {
    4096
}

/// Expression-defined problem available to cells by name.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CustomProblem {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: String,
    #[serde(default)]
    pub constraints: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("TOML syntax error: {0}")]
    Syntax(String),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

impl ExperimentConfig {
    /// Parses and validates; every field error is collected before failing.
    pub fn parse(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let errors = config.validate();
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    #[allow(dead_code)] // round-trip contract, exercised by the tests
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.cells.is_empty() {
            errors.push("cells: at least one experiment row is required".to_string());
        }
        if self.output_dir.is_empty() {
            errors.push("output_dir: must not be empty".to_string());
        }
        if self.jobs == 0 {
            errors.push("jobs: must be >= 1".to_string());
        }
        let mut custom_names = BTreeSet::new();
        for (i, p) in self.custom_problems.iter().enumerate() {
            let at = format!("custom_problems[{i}]");
            if !custom_names.insert(p.name.clone()) {
                errors.push(format!("{at}.name: duplicate problem name {:?}", p.name));
            }
            match Domain::new(p.lower.clone(), p.upper.clone()) {
                Ok(domain) => {
                    let exprs: Vec<String> = std::iter::once(p.objective.clone())
                        .chain(p.constraints.iter().cloned())
                        .collect();
                    let noise = vec![0.0; exprs.len()];
                    if let Err(e) = ProblemSpec::from_expressions(&p.name, domain, &exprs, noise) {
                        errors.push(format!("{at}: {e}"));
                    }
                }
                Err(e) => errors.push(format!("{at}: {e}")),
            }
        }
        let mut row_ids = BTreeSet::new();
        for (i, c) in self.cells.iter().enumerate() {
            let at = format!("cells[{i}]");
            if !row_ids.insert((c.problem.clone(), c.acquisition.clone())) {
                errors.push(format!(
                    "{at}: duplicate (problem, acquisition) row ({}, {})",
                    c.problem, c.acquisition
                ));
            }
            if c.acquisition.parse::<Acquisition>().is_err() {
                errors.push(format!("{at}.acquisition: unknown name {:?}", c.acquisition));
            }
            let known_problem = ProblemSpec::builtin_names().contains(&c.problem.as_str())
                || self.custom_problems.iter().any(|p| p.name == c.problem);
            if !known_problem {
                errors.push(format!("{at}.problem: unknown problem {:?}", c.problem));
            }
            if c.replications == 0 {
                errors.push(format!("{at}.replications: must be >= 1"));
            }
            if c.q == 0 {
                errors.push(format!("{at}.q: must be >= 1"));
            }
            if c.iterations == 0 {
                errors.push(format!("{at}.iterations: must be >= 1"));
            }
            if c.refit_every == 0 {
                errors.push(format!("{at}.refit_every: must be >= 1"));
            }
            if !(c.noise_scale >= 0.0 && c.noise_scale.is_finite()) {
                errors.push(format!("{at}.noise_scale: must be finite and >= 0"));
            }
            if c.sga_restarts == 0 {
                errors.push(format!("{at}.sga_restarts: must be >= 1"));
            }
            if c.sga_grad_replications < 2 || c.sga_rescore_replications < 2 {
                errors.push(format!("{at}: sga replication budgets must be >= 2"));
            }
        }
        errors
    }

    /// Builds the problem a cell refers to, with the cell's noise scale.
    pub fn build_problem(&self, cell: &Cell) -> anyhow::Result<ProblemSpec> {
        let base = if let Some(custom) = self
            .custom_problems
            .iter()
            .find(|p| p.name == cell.problem)
        {
            let domain = Domain::new(custom.lower.clone(), custom.upper.clone())?;
            let exprs: Vec<String> = std::iter::once(custom.objective.clone())
                .chain(custom.constraints.iter().cloned())
                .collect();
            let noise = vec![0.0; exprs.len()];
            ProblemSpec::from_expressions(&custom.name, domain, &exprs, noise)?
        } else {
            ProblemSpec::builtin(&cell.problem)?
        };
        Ok(base.with_noise_scale(cell.noise_scale)?)
    }

    /// Loop configuration for one cell and run seed.
    pub fn build_bo_config(&self, cell: &Cell, seed: u64) -> anyhow::Result<BoConfig> {
        Ok(BoConfig {
            n0: cell.n0,
            iterations: cell.iterations,
            q: cell.q,
            acquisition: cell.acquisition.parse()?,
            seed,
            refit_every: cell.refit_every,
            max_design_retries: 5,
            kernel: KernelChoice::Gaussian,
            fit_restarts: cell.fit_restarts,
            sga: SgaParams {
                restarts: cell.sga_restarts,
                max_steps: cell.sga_max_steps,
                grad_replications: cell.sga_grad_replications,
                rescore_replications: cell.sga_rescore_replications,
                ..SgaParams::default()
            },
            inner: InnerParams::default(),
            ckg_grid_size: cell.ckg_grid_size,
            acq_params: Default::default(),
            baseline_candidates: cell.baseline_candidates,
            kg_replications: cell.kg_replications,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
base_seed = 42
output_dir = "out"

[[cells]]
problem = "toy-1d"
acquisition = "ckg"
replications = 2
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let config = ExperimentConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(config.jobs, 1);
        let cell = &config.cells[0];
        assert_eq!(cell.n0, 6);
        assert_eq!(cell.iterations, 25);
        assert_eq!(cell.q, 1);
        assert_eq!(cell.noise_scale, 0.05);
    }

    #[test]
    fn round_trips_through_serialization() {
        let config = ExperimentConfig::parse_str(MINIMAL).unwrap();
        let text = config.to_toml();
        let back = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn zero_q_is_named_in_the_error() {
        let bad = MINIMAL.replace("replications = 2", "replications = 2\nq = 0");
        match ExperimentConfig::parse_str(&bad) {
            Err(ConfigError::Invalid(errors)) => {
                assert!(errors.iter().any(|e| e.contains("cells[0].q")), "{errors:?}");
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_acquisition_and_problem_both_reported() {
        let bad = r#"
base_seed = 1
output_dir = "out"

[[cells]]
problem = "nope"
acquisition = "esp"
replications = 1
"#;
        match ExperimentConfig::parse_str(bad) {
            Err(ConfigError::Invalid(errors)) => {
                assert_eq!(errors.len(), 2, "{errors:?}");
            }
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn custom_problems_validated_and_usable() {
        let text = r#"
base_seed = 1
output_dir = "out"

[[custom_problems]]
name = "mine"
lower = [0.0]
upper = [1.0]
objective = "x1^2"
constraints = ["0.2 - x1"]

[[cells]]
problem = "mine"
acquisition = "ei"
replications = 1
"#;
        let config = ExperimentConfig::parse_str(text).unwrap();
        let problem = config.build_problem(&config.cells[0]).unwrap();
        assert_eq!(problem.n_constraints(), 1);

        let bad = text.replace("x1^2", "x3^2");
        assert!(matches!(
            ExperimentConfig::parse_str(&bad),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn duplicate_rows_rejected() {
        let dup = format!(
            "{MINIMAL}\n[[cells]]\nproblem = \"toy-1d\"\nacquisition = \"ckg\"\nreplications = 1\n"
        );
        assert!(matches!(
            ExperimentConfig::parse_str(&dup),
            Err(ConfigError::Invalid(_))
        ));
    }
}
