//! Sequential optimization loop: initial design, per-iteration model refits,
//! batch selection, observation, and recommendation of the estimated best
//! feasible solution. The c-KG path maximizes the batch acquisition by
//! stochastic gradient ascent; the baseline acquisitions run the generic
//! candidate-scoring loop with greedy constant-liar batching for `q > 1`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    constrained_ei, expected_improvement, kg_discrete, probability_of_improvement,
    AcquisitionParams, Incumbent, IncumbentSource,
};
use crate::domain::Domain;
use crate::error::{CkgError, Result};
use crate::gp::{GpModelDoc, GpPosterior, KernelDoc, TrainingSet};
use crate::hyper::{fit_hyperparameters, FitOptions, FittedModel};
use crate::kernel::KernelSpec;
use crate::problems::ProblemSpec;
use crate::seeding::{derive, rng_from, tags};
use crate::solvers::{
    maximize_ckg, min_posterior_mean, FeasibilityMode, FeasibleMinResult, InnerParams,
    InnerSolver, SgaParams,
};

/// Batch selection criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    Ckg,
    Ei,
    Eic,
    Pi,
    Ucb,
    KgDiscrete,
}

impl Acquisition {
    pub fn name(&self) -> &'static str {
        match self {
            Acquisition::Ckg => "ckg",
            Acquisition::Ei => "ei",
            Acquisition::Eic => "eic",
            Acquisition::Pi => "pi",
            Acquisition::Ucb => "ucb",
            Acquisition::KgDiscrete => "kg-discrete",
        }
    }
}

impl std::str::FromStr for Acquisition {
    type Err = CkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ckg" => Ok(Acquisition::Ckg),
            "ei" => Ok(Acquisition::Ei),
            "eic" => Ok(Acquisition::Eic),
            "pi" => Ok(Acquisition::Pi),
            "ucb" => Ok(Acquisition::Ucb),
            "kg-discrete" => Ok(Acquisition::KgDiscrete),
            other => Err(CkgError::invalid(format!(
                "unknown acquisition {other:?} (expected ckg, ei, eic, pi, ucb or kg-discrete)"
            ))),
        }
    }
}

/// Kernel family used for the fitted surrogates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum KernelChoice {
    Gaussian,
    Matern { nu: f64 },
}

impl KernelChoice {
    fn template(&self, d: usize) -> KernelSpec {
        match self {
            KernelChoice::Gaussian => KernelSpec::gaussian(1.0, vec![1.0; d]),
            KernelChoice::Matern { nu } => KernelSpec::matern(1.0, *nu, 1.0),
        }
    }
}

/// Loop configuration; see field comments for defaults.
#[derive(Clone, Debug, Serialize)]
pub struct BoConfig {
    /// Initial design size; must be at least `d + 2`.
    pub n0: usize,
    /// Number of batch-selection iterations `N`.
    pub iterations: usize,
    pub q: usize,
    pub acquisition: Acquisition,
    pub seed: u64,
    /// Re-estimate hyperparameters every this many iterations.
    pub refit_every: usize,
    /// Bound on fresh initial designs when no feasible posterior point exists.
    pub max_design_retries: usize,
    pub kernel: KernelChoice,
    pub fit_restarts: usize,
    pub sga: SgaParams,
    pub inner: InnerParams,
    /// Discretization size for the c-KG inner minimizations; `0` selects
    /// `100 * d`.
    pub ckg_grid_size: usize,
    pub acq_params: AcquisitionParams,
    /// Candidate-set size for the baseline acquisitions; `0` selects
    /// `256 * d`.
    pub baseline_candidates: usize,
    /// Replications per candidate when scoring `kg-discrete`.
    pub kg_replications: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            n0: 6,
            iterations: 25,
            q: 1,
            acquisition: Acquisition::Ckg,
            seed: 0,
            refit_every: 1,
            max_design_retries: 5,
            kernel: KernelChoice::Gaussian,
            fit_restarts: 4,
            sga: SgaParams::default(),
            inner: InnerParams::default(),
            ckg_grid_size: 0,
            acq_params: AcquisitionParams::default(),
            baseline_candidates: 0,
            kg_replications: 64,
        }
    }
}

/// Recommendation snapshot stored per iteration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Recommendation {
    pub x: Vec<f64>,
    pub posterior_value: f64,
    pub feasible: bool,
    pub max_violation: f64,
}

impl From<&FeasibleMinResult> for Recommendation {
    fn from(r: &FeasibleMinResult) -> Self {
        Recommendation {
            x: r.x_star.iter().copied().collect(),
            posterior_value: r.value,
            feasible: r.feasible,
            max_violation: r.max_violation,
        }
    }
}

/// Fitted hyperparameters recorded per iteration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelHyper {
    pub mean: f64,
    pub kernel: KernelDoc,
    pub noise_var: f64,
    pub log_marginal: f64,
}

impl From<&FittedModel> for ModelHyper {
    fn from(m: &FittedModel) -> Self {
        ModelHyper {
            mean: m.mean.constant,
            kernel: KernelDoc {
                kind: m.kernel.kind_name().to_string(),
                params: m.kernel.params(),
            },
            noise_var: m.noise_var,
            log_marginal: m.log_marginal,
        }
    }
}

/// One line of the run trace. Iteration 0 is the initial design.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Points sampled this iteration (the whole design at iteration 0).
    pub batch: Vec<Vec<f64>>,
    /// Raw observations, indexed `[output][point]`.
    pub observations: Vec<Vec<f64>>,
    pub hyperparameters: Vec<ModelHyper>,
    pub recommendation: Recommendation,
    pub cumulative_evaluations: usize,
    pub wall_time_ms: f64,
}

/// Full seeded trace of one optimization run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub problem: String,
    pub acquisition: String,
    pub seed: u64,
    pub config: BoConfig,
    pub iterations: Vec<IterationRecord>,
    pub final_models: Vec<GpModelDoc>,
    pub n_evaluations: usize,
}

impl RunRecord {
    pub fn final_recommendation(&self) -> &Recommendation {
        &self
            .iterations
            .last()
            .expect("a run always records at least the initial fit")
            .recommendation
    }

    /// Zeroes the wall-clock fields, leaving only the deterministic content.
    pub fn strip_timing(&mut self) {
        for it in &mut self.iterations {
            it.wall_time_ms = 0.0;
        }
    }
}

/// Latin-hypercube initial design.
pub fn initial_design(n0: usize, domain: &Domain, seed: u64) -> DMatrix<f64> {
    domain.latin_hypercube(n0, &mut rng_from(seed))
}

/// Estimated best feasible solution under the current posteriors.
pub fn recommend(
    posteriors: &[GpPosterior],
    domain: &Domain,
    starts: usize,
    seed: u64,
) -> Result<FeasibleMinResult> {
    min_posterior_mean(posteriors, FeasibilityMode::Current, domain, starts, seed)
}

struct DataStore {
    inputs: Vec<DVector<f64>>,
    observations: Vec<Vec<f64>>,
}

impl DataStore {
    fn new(n_outputs: usize) -> Self {
        DataStore {
            inputs: Vec::new(),
            observations: vec![Vec::new(); n_outputs],
        }
    }

    fn push(&mut self, x: DVector<f64>, obs: &[f64]) {
        self.inputs.push(x);
        for (store, v) in self.observations.iter_mut().zip(obs) {
            store.push(*v);
        }
    }

    fn n(&self) -> usize {
        self.inputs.len()
    }

    fn training_set(&self, noise: &[f64]) -> Result<TrainingSet> {
        let d = self.inputs[0].len();
        let x = DMatrix::from_fn(self.n(), d, |i, j| self.inputs[i][j]);
        let outputs = self
            .observations
            .iter()
            .map(|col| DVector::from_vec(col.clone()))
            .collect();
        TrainingSet::new(x, outputs, noise.to_vec())
    }
}

struct FittedState {
    models: Vec<FittedModel>,
    posteriors: Vec<GpPosterior>,
}

fn fit_state(
    data: &DataStore,
    template: &KernelSpec,
    fit_restarts: usize,
    fit_seed: u64,
    reuse: Option<&[FittedModel]>,
) -> Result<FittedState> {
    let n_outputs = data.observations.len();
    let training = data.training_set(&vec![0.0; n_outputs])?;
    let models: Vec<FittedModel> = match reuse {
        Some(existing) => existing.to_vec(),
        None => fit_hyperparameters(
            &training,
            template,
            &FitOptions {
                restarts: fit_restarts,
                seed: fit_seed,
                ..FitOptions::default()
            },
        )?,
    };
    let posteriors = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            GpPosterior::fit(
                m.mean,
                m.kernel.clone(),
                training.inputs.clone(),
                training.outputs[i].clone(),
                m.noise_var,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedState { models, posteriors })
}

/// Executes the optimization loop on `problem` and returns the complete
/// seeded trace. Byte-for-byte deterministic given the config, apart from the
/// recorded wall times.
pub fn run(problem: &ProblemSpec, config: &BoConfig) -> Result<RunRecord> {
    let domain = problem.domain();
    let d = domain.dim();
    if config.n0 < d + 2 {
        return Err(CkgError::invalid(format!(
            "n0 = {} is below the minimum d + 2 = {}",
            config.n0,
            d + 2
        )));
    }
    if config.q == 0 || config.refit_every == 0 {
        return Err(CkgError::invalid("q and refit-every must be >= 1"));
    }
    config.sga.validate()?;
    let template = config.kernel.template(d);
    let n_outputs = problem.n_outputs();
    let seed = config.seed;

    // Step 2-4: initial design with bounded re-draws until a feasible
    // posterior point exists.
    let mut attempt = 0usize;
    let (mut data, mut state, mut rec, mut noise_rng, fit_seed_base, iter0_ms) = loop {
        let t0 = Instant::now();
        let design_seed = derive(seed, tags::DESIGN, attempt as u64);
        let fit_seed_base = derive(seed, tags::FIT, attempt as u64);
        let mut noise_rng = rng_from(derive(seed, tags::NOISE, attempt as u64));
        let design = initial_design(config.n0, domain, design_seed);
        let mut data = DataStore::new(n_outputs);
        for i in 0..config.n0 {
            let x = design.row(i).transpose();
            let obs = problem.evaluate(&x, &mut noise_rng)?;
            data.push(x, &obs);
        }
        let state = fit_state(
            &data,
            &template,
            config.fit_restarts,
            derive(fit_seed_base, tags::FIT, 0),
            None,
        )?;
        let rec = recommend(
            &state.posteriors,
            domain,
            config.inner.starts,
            derive(seed, tags::RUN, attempt as u64),
        )?;
        if rec.feasible {
            break (data, state, rec, noise_rng, fit_seed_base, t0.elapsed().as_secs_f64() * 1e3);
        }
        attempt += 1;
        if attempt > config.max_design_retries {
            return Err(CkgError::InfeasibleStart(format!(
                "no feasible posterior point after {} designs",
                attempt
            )));
        }
    };

    let mut iterations = Vec::with_capacity(config.iterations + 1);
    iterations.push(IterationRecord {
        iteration: 0,
        batch: data.inputs.iter().map(|x| x.iter().copied().collect()).collect(),
        observations: data.observations.clone(),
        hyperparameters: state.models.iter().map(ModelHyper::from).collect(),
        recommendation: Recommendation::from(&rec),
        cumulative_evaluations: data.n(),
        wall_time_ms: iter0_ms,
    });

    for n in 1..=config.iterations {
        let t0 = Instant::now();
        let acq_seed = derive(seed, tags::ACQUISITION, n as u64);
        let batch = match config.acquisition {
            Acquisition::Ckg => {
                select_ckg_batch(&state.posteriors, domain, config, &rec, acq_seed)?
            }
            _ => select_baseline_batch(&state.posteriors, &data, domain, config, &rec, acq_seed)?,
        };

        let mut batch_obs: Vec<Vec<f64>> = vec![Vec::with_capacity(config.q); n_outputs];
        for j in 0..batch.nrows() {
            let x = batch.row(j).transpose();
            let obs = problem.evaluate(&x, &mut noise_rng)?;
            for (store, v) in batch_obs.iter_mut().zip(&obs) {
                store.push(*v);
            }
            data.push(x, &obs);
        }

        let reuse = if n % config.refit_every == 0 {
            None
        } else {
            Some(&state.models[..])
        };
        state = fit_state(
            &data,
            &template,
            config.fit_restarts,
            derive(fit_seed_base, tags::FIT, n as u64),
            reuse,
        )?;
        rec = recommend(
            &state.posteriors,
            domain,
            config.inner.starts,
            derive(seed, tags::RUN, 1000 + n as u64),
        )?;

        iterations.push(IterationRecord {
            iteration: n,
            batch: (0..batch.nrows())
                .map(|j| batch.row(j).iter().copied().collect())
                .collect(),
            observations: batch_obs,
            hyperparameters: state.models.iter().map(ModelHyper::from).collect(),
            recommendation: Recommendation::from(&rec),
            cumulative_evaluations: data.n(),
            wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(RunRecord {
        problem: problem.name().to_string(),
        acquisition: config.acquisition.name().to_string(),
        seed,
        config: config.clone(),
        final_models: state
            .posteriors
            .iter()
            .enumerate()
            .map(|(i, p)| p.to_doc(i))
            .collect(),
        n_evaluations: data.n(),
        iterations,
    })
}

/// Batch selection by stochastic gradient ascent on the c-KG surface, with
/// the inner minimizations discretized over a fresh Latin hypercube anchored
/// at the current recommendation.
fn select_ckg_batch(
    posteriors: &[GpPosterior],
    domain: &Domain,
    config: &BoConfig,
    rec: &FeasibleMinResult,
    acq_seed: u64,
) -> Result<DMatrix<f64>> {
    let d = domain.dim();
    let gsize = if config.ckg_grid_size == 0 {
        100 * d
    } else {
        config.ckg_grid_size
    };
    let mut rng = rng_from(derive(acq_seed, tags::DISCRETIZATION, 0));
    let lhs = domain.latin_hypercube(gsize, &mut rng);
    let mut points = DMatrix::zeros(gsize + 1, d);
    points.view_mut((0, 0), (gsize, d)).copy_from(&lhs);
    for k in 0..d {
        points[(gsize, k)] = rec.x_star[k];
    }
    let inner = InnerSolver::grid(points)?;
    let (batch, _score) = maximize_ckg(posteriors, config.q, domain, &config.sga, &inner, acq_seed)?;
    Ok(batch.points().clone())
}

fn observed_incumbent(data: &DataStore) -> Incumbent {
    let mut best = 0usize;
    for i in 1..data.n() {
        if data.observations[0][i] < data.observations[0][best] {
            best = i;
        }
    }
    Incumbent {
        x_star: data.inputs[best].iter().copied().collect(),
        value: data.observations[0][best],
        source: IncumbentSource::ObservedBest,
    }
}

/// Best objective observation among points whose observed constraint values
/// are all feasible; `None` when no observation looks feasible.
fn observed_feasible_incumbent(data: &DataStore) -> Option<Incumbent> {
    let m = data.observations.len() - 1;
    let mut best: Option<usize> = None;
    for i in 0..data.n() {
        let feasible = (1..=m).all(|c| data.observations[c][i] <= 0.0);
        if feasible && best.map_or(true, |b| data.observations[0][i] < data.observations[0][b]) {
            best = Some(i);
        }
    }
    best.map(|i| Incumbent {
        x_star: data.inputs[i].iter().copied().collect(),
        value: data.observations[0][i],
        source: IncumbentSource::ObservedBest,
    })
}

/// Candidate-set argmax for the baseline acquisitions, with greedy
/// constant-liar batching: after each pick, every posterior is extended with
/// a fantasy observation equal to its mean at the picked point.
fn select_baseline_batch(
    posteriors: &[GpPosterior],
    data: &DataStore,
    domain: &Domain,
    config: &BoConfig,
    rec: &FeasibleMinResult,
    acq_seed: u64,
) -> Result<DMatrix<f64>> {
    let d = domain.dim();
    let count = if config.baseline_candidates == 0 {
        256 * d
    } else {
        config.baseline_candidates
    };
    let mut rng = rng_from(derive(acq_seed, tags::DISCRETIZATION, 1));
    let lhs = domain.latin_hypercube(count, &mut rng);
    let mut candidates: Vec<DVector<f64>> = (0..count).map(|i| lhs.row(i).transpose()).collect();
    candidates.push(rec.x_star.clone());

    let mut liars: Vec<GpPosterior> = posteriors.to_vec();
    let mut picked: Vec<DVector<f64>> = Vec::with_capacity(config.q);
    let observed = observed_incumbent(data);
    let feasible_observed = observed_feasible_incumbent(data);

    for slot in 0..config.q {
        let mut best: Option<(f64, usize)> = None;
        let cand_matrix = DMatrix::from_fn(candidates.len(), d, |i, j| candidates[i][j]);
        for (ci, x) in candidates.iter().enumerate() {
            if picked.iter().any(|p| (p - x).amax() < 1e-12) {
                continue;
            }
            let score = match config.acquisition {
                Acquisition::Ei => expected_improvement(&liars[0], x, &observed)?,
                Acquisition::Eic => constrained_ei(&liars, x, feasible_observed.as_ref())?,
                Acquisition::Pi => probability_of_improvement(
                    &liars[0],
                    x,
                    &observed,
                    config.acq_params.pi_epsilon,
                )?,
                Acquisition::Ucb => {
                    let (mean, var) = liars[0].mean_and_var(x)?;
                    -(mean - config.acq_params.ucb_beta * var.sqrt())
                }
                Acquisition::KgDiscrete => {
                    kg_discrete(
                        &liars[0],
                        x,
                        &cand_matrix,
                        config.kg_replications,
                        derive(acq_seed, tags::REPLICATION, slot as u64),
                    )?
                    .value
                }
                Acquisition::Ckg => unreachable!("ckg takes the gradient path"),
            };
            if best.map_or(true, |(bs, _)| score > bs) {
                best = Some((score, ci));
            }
        }
        let (_, ci) = best.ok_or_else(|| {
            CkgError::OptimizerFailure("no scorable baseline candidate".to_string())
        })?;
        let choice = candidates[ci].clone();
        if slot + 1 < config.q {
            // constant liar: pretend we observed the posterior mean
            let zm = DMatrix::from_fn(1, d, |_, k| choice[k]);
            liars = liars
                .iter()
                .map(|p| {
                    let lie = DVector::from_element(1, p.mean_at(&choice));
                    p.extend(&zm, &lie)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        picked.push(choice);
    }
    Ok(DMatrix::from_fn(config.q, d, |i, j| picked[i][j]))
}
