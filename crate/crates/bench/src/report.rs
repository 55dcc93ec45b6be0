//! Aggregation of a finished matrix into a markdown summary and a
//! plot-ready TSV: true regret per (problem, acquisition, iteration), with a
//! t-based 95% confidence interval over replications. Recommendations that
//! violate the analytic constraints are counted separately, never folded into
//! regret.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::runner::{META_FILE, SUMMARY_FILE};

#[derive(serde::Deserialize)]
struct ProblemMeta {
    name: String,
    oracle_value: f64,
    objective_range: f64,
}

#[derive(serde::Deserialize)]
struct MatrixMeta {
    problems: Vec<ProblemMeta>,
    #[serde(default)]
    failures: Vec<String>,
}

struct Row {
    problem: String,
    acquisition: String,
    iteration: usize,
    true_g0: f64,
    true_feasible: bool,
}

fn parse_summary(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            bail!("summary line {} has {} fields", ln + 1, fields.len());
        }
        rows.push(Row {
            problem: fields[0].to_string(),
            acquisition: fields[1].to_string(),
            iteration: fields[3].parse()?,
            true_g0: fields[5].parse()?,
            true_feasible: fields[6] == "true",
        });
    }
    Ok(rows)
}

/// 95% half-width of the mean from `n` samples with standard deviation `sd`.
fn t_half_width(n: usize, sd: f64) -> f64 {
    if n < 2 {
        return f64::NAN;
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    t * sd / (n as f64).sqrt()
}

pub struct ReportFiles {
    pub markdown: String,
    pub tsv: String,
}

pub fn build_report(dir: &Path) -> Result<ReportFiles> {
    let summary = dir.join(SUMMARY_FILE);
    if !summary.exists() {
        bail!("no completed runs found in {dir:?} (missing {SUMMARY_FILE})");
    }
    let rows = parse_summary(&summary)?;
    if rows.is_empty() {
        bail!("summary in {dir:?} contains no data rows");
    }
    let meta: MatrixMeta = serde_json::from_str(
        &fs::read_to_string(dir.join(META_FILE)).with_context(|| "reading matrix metadata")?,
    )?;
    let oracle: BTreeMap<String, (f64, f64)> = meta
        .problems
        .iter()
        .map(|p| (p.name.clone(), (p.oracle_value, p.objective_range)))
        .collect();

    // (problem, acquisition, iteration) -> (regrets over feasible reps, infeasible count)
    let mut groups: BTreeMap<(String, String, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for row in &rows {
        let Some(&(opt, _)) = oracle.get(&row.problem) else {
            bail!("problem {} missing from matrix metadata", row.problem);
        };
        let entry = groups
            .entry((row.problem.clone(), row.acquisition.clone(), row.iteration))
            .or_default();
        if row.true_feasible {
            entry.0.push(row.true_g0 - opt);
        } else {
            entry.1 += 1;
        }
    }

    let mut tsv = String::from(
        "problem\tacquisition\titeration\tn_feasible\tmean_regret\tci95_half_width\tinfeasible_fraction\n",
    );
    let mut md = String::from("# Benchmark report\n\n");
    md.push_str(&format!("- data rows: {}\n", rows.len()));
    if !meta.failures.is_empty() {
        md.push_str(&format!("- **failed runs: {}**\n", meta.failures.len()));
        for f in &meta.failures {
            md.push_str(&format!("  - {f}\n"));
        }
    }
    md.push_str("\n## Problems\n\n");
    for p in &meta.problems {
        md.push_str(&format!(
            "- `{}`: oracle optimum {:.6}, objective range {:.6}\n",
            p.name, p.oracle_value, p.objective_range
        ));
    }
    md.push_str("\n## Final-iteration regret\n\n");
    md.push_str("| problem | acquisition | n feasible | median regret | mean regret | 95% CI | infeasible |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");

    let mut final_iter: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (problem, acquisition, iteration) in groups.keys() {
        let e = final_iter
            .entry((problem.clone(), acquisition.clone()))
            .or_default();
        *e = (*e).max(*iteration);
    }

    for ((problem, acquisition, iteration), (regrets, infeasible)) in &groups {
        let n = regrets.len();
        let total = n + infeasible;
        let (mean, sd) = mean_sd(regrets);
        tsv.push_str(&format!(
            "{problem}\t{acquisition}\t{iteration}\t{n}\t{}\t{}\t{}\n",
            mean,
            t_half_width(n, sd),
            *infeasible as f64 / total.max(1) as f64
        ));
        if final_iter[&(problem.clone(), acquisition.clone())] == *iteration {
            let median = median(regrets);
            md.push_str(&format!(
                "| {problem} | {acquisition} | {n} | {median:.6} | {mean:.6} | ±{:.6} | {}/{} |\n",
                t_half_width(n, sd),
                infeasible,
                total
            ));
        }
    }
    Ok(ReportFiles { markdown: md, tsv })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Writes `report.md` and `plot_data.tsv` into the run directory.
pub fn report(dir: &Path) -> Result<()> {
    let files = build_report(dir)?;
    fs::write(dir.join("report.md"), &files.markdown)?;
    fs::write(dir.join("plot_data.tsv"), &files.tsv)?;
    println!("{}", files.markdown);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_matches_reference() {
        // t_{0.975, 9} = 2.262157...
        let hw = t_half_width(10, 1.0);
        assert!((hw - 2.262_157_162_740_99 / 10f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
