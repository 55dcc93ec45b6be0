//! Matrix execution: every (cell, replication) pair runs as one seeded,
//! isolated optimization writing its own JSONL trace; the summary CSV is
//! reduced single-threaded in deterministic row order afterwards.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use ckg_core::engine::{run, RunRecord};
use ckg_core::problems::ProblemSpec;
use ckg_core::seeding::{hash_str, mix};

use crate::config::{Cell, ExperimentConfig};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const META_FILE: &str = "matrix_meta.json";
pub const ORACLE_RESOLUTION: u32 = 401;

/// Analytic feasibility tolerance used for the `true-feasible?` column.
pub const TRUE_FEASIBLE_TOL: f64 = 1e-6;

/// Per-run stable seed: `hash(base seed, problem, acquisition, replication)`
/// with the library's documented SplitMix64/FNV-1a mix, so any cell can be
/// reproduced in isolation.
pub fn run_seed(base_seed: u64, problem: &str, acquisition: &str, replication: usize) -> u64 {
    mix(&[
        base_seed,
        hash_str(problem),
        hash_str(acquisition),
        replication as u64,
    ])
}

pub fn run_id(cell: &Cell, replication: usize) -> String {
    format!(
        "{}__{}__r{:03}",
        cell.problem, cell.acquisition, replication
    )
}

#[derive(Serialize)]
struct ProblemMeta {
    name: String,
    oracle_x: Vec<f64>,
    oracle_value: f64,
    objective_range: f64,
    noise: Vec<f64>,
}

#[derive(Serialize)]
struct MatrixMeta {
    base_seed: u64,
    problems: Vec<ProblemMeta>,
    failures: Vec<String>,
}

struct RunOutput {
    cell_index: usize,
    replication: usize,
    csv_rows: Vec<String>,
    outcome: std::result::Result<(), String>,
}

fn csv_rows_for(record: &RunRecord, problem: &ProblemSpec, replication: usize) -> Vec<String> {
    record
        .iterations
        .iter()
        .map(|it| {
            let x = DVector::from_vec(it.recommendation.x.clone());
            let true_g0 = problem.analytic(0, &x);
            let feasible = problem.true_feasible(&x, TRUE_FEASIBLE_TOL);
            format!(
                "{},{},{},{},{},{},{},{}",
                record.problem,
                record.acquisition,
                replication,
                it.iteration,
                it.recommendation.posterior_value,
                true_g0,
                feasible,
                it.cumulative_evaluations
            )
        })
        .collect()
}

fn write_jsonl(dir: &Path, id: &str, record: &RunRecord) -> Result<()> {
    let path = dir.join(format!("{id}.jsonl"));
    let mut f = fs::File::create(&path).with_context(|| format!("creating {path:?}"))?;
    for it in &record.iterations {
        writeln!(f, "{}", serde_json::to_string(it)?)?;
    }
    let summary_path = dir.join(format!("{id}.summary.json"));
    fs::write(&summary_path, serde_json::to_string_pretty(record)?)
        .with_context(|| format!("writing {summary_path:?}"))?;
    Ok(())
}

/// Executes the full matrix. Returns the number of failed runs; partial
/// failures do not stop the remaining cells.
pub fn run_matrix(config: &ExperimentConfig, jobs: usize) -> Result<usize> {
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {out_dir:?}"))?;

    // one problem instance per cell (noise scale may differ per cell)
    let problems: Vec<ProblemSpec> = config
        .cells
        .iter()
        .map(|c| config.build_problem(c))
        .collect::<Result<_>>()?;

    let mut tasks: Vec<(usize, usize)> = Vec::new();
    for (ci, cell) in config.cells.iter().enumerate() {
        for rep in 0..cell.replications {
            tasks.push((ci, rep));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;

    let outputs: Vec<RunOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ci, rep)| {
                let cell = &config.cells[ci];
                let problem = &problems[ci];
                let seed = run_seed(config.base_seed, &cell.problem, &cell.acquisition, rep);
                let id = run_id(cell, rep);
                let result = config
                    .build_bo_config(cell, seed)
                    .and_then(|bo| run(problem, &bo).map_err(Into::into))
                    .and_then(|record| {
                        write_jsonl(&out_dir, &id, &record)?;
                        Ok(csv_rows_for(&record, problem, rep))
                    });
                match result {
                    Ok(csv_rows) => RunOutput {
                        cell_index: ci,
                        replication: rep,
                        csv_rows,
                        outcome: Ok(()),
                    },
                    Err(e) => RunOutput {
                        cell_index: ci,
                        replication: rep,
                        csv_rows: Vec::new(),
                        outcome: Err(format!("{id}: {e}")),
                    },
                }
            })
            .collect()
    });

    // deterministic reduction: tasks were generated in (cell, replication)
    // order and par_iter preserves positions
    let mut csv = String::from(
        "problem,acquisition,replication,iteration,best-feasible-posterior-value,true-g0-at-recommendation,true-feasible?,cumulative-evaluations\n",
    );
    let mut failures = Vec::new();
    for out in &outputs {
        match &out.outcome {
            Ok(()) => {
                for row in &out.csv_rows {
                    csv.push_str(row);
                    csv.push('\n');
                }
            }
            Err(msg) => failures.push(msg.clone()),
        }
        let _ = (out.cell_index, out.replication);
    }
    fs::write(out_dir.join(SUMMARY_FILE), csv)?;

    let mut problem_meta = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (ci, cell) in config.cells.iter().enumerate() {
        if !seen.insert(cell.problem.clone()) {
            continue;
        }
        let p = &problems[ci];
        let oracle = p.grid_oracle(ORACLE_RESOLUTION)?;
        let (lo, hi) = p.grid_output_range(0, 101)?;
        problem_meta.push(ProblemMeta {
            name: cell.problem.clone(),
            oracle_x: oracle.x,
            oracle_value: oracle.value,
            objective_range: hi - lo,
            noise: p.noise().to_vec(),
        });
    }
    let meta = MatrixMeta {
        base_seed: config.base_seed,
        problems: problem_meta,
        failures: failures.clone(),
    };
    fs::write(
        out_dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)?,
    )?;

    for f in &failures {
        eprintln!("run failed: {f}");
    }
    Ok(failures.len())
}
