//! `bench gradcheck`: Theorem-style verification of the acquisition gradient
//! estimator on a named fixture, printing one line per batch coordinate.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use ckg_core::acquisition::CkgEvaluator;
use ckg_core::fixtures::{gradient_fixture, GRADIENT_FIXTURES};
use ckg_core::gradient::{gradcheck, LMeanEstimator};

pub fn gradcheck_cmd(
    fixture: &str,
    replications: usize,
    fd_step: f64,
    seed: u64,
    dump: Option<&Path>,
) -> Result<bool> {
    if fixture == "list" {
        for name in GRADIENT_FIXTURES {
            println!("{name}");
        }
        return Ok(true);
    }
    let f = gradient_fixture(fixture)?;
    println!(
        "fixture {} (d={}, q={}, m={}), {} replications, fd step {:.1e}, seed {}",
        f.name, f.shape.0, f.shape.1, f.shape.2, replications, fd_step, seed
    );

    if let Some(path) = dump {
        let evaluator = CkgEvaluator::new(&f.posteriors, &f.inner, &f.domain, seed)?;
        let (_, records) = evaluator.grad_with(
            &f.z,
            replications,
            seed,
            LMeanEstimator::SelfNormalized,
            true,
        )?;
        let mut file =
            std::fs::File::create(path).with_context(|| format!("creating {path:?}"))?;
        for r in &records {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
        println!("wrote {} gradient samples to {}", records.len(), path.display());
    }

    let report = gradcheck(
        &f.posteriors,
        &f.inner,
        &f.domain,
        &f.z,
        replications,
        fd_step,
        seed,
    )?;
    println!("point coord   gradient      +-se          finite-diff   +-se          z");
    for c in &report.components {
        println!(
            "{:>5} {:>5}   {:>12.6e}  {:>12.6e}  {:>12.6e}  {:>12.6e}  {:>6.2}",
            c.t, c.k, c.grad, c.grad_se, c.fd, c.fd_se, c.z_score
        );
    }
    let ok = report.max_abs_z <= 3.0;
    println!(
        "[{}] max |z| = {:.2} over {} components",
        if ok { "PASS" } else { "FAIL" },
        report.max_abs_z,
        report.components.len()
    );
    Ok(ok)
}
