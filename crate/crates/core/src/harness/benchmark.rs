//! Learner-by-environment comparison across seeds.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;

use super::config::{LearnerKind, TrainConfig};
use super::mean_sample_std;
use super::train::train;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkCell {
    pub learner: LearnerKind,
    pub env: String,
    pub seed: u64,
}

impl BenchmarkCell {
    pub fn dir_name(&self) -> String {
        let env: String = self
            .env
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("{}_{}_seed{}", self.learner, env, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: BenchmarkCell,
    /// Final greedy test return, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub learner: LearnerKind,
    pub env: String,
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub cells: Vec<CellResult>,
    pub rows: Vec<ComparisonRow>,
}

/// Expands learners × envs × seeds in that nesting order.
pub fn matrix(learners: &[LearnerKind], envs: &[String], seeds: &[u64]) -> Vec<BenchmarkCell> {
    let mut cells = Vec::new();
    for &learner in learners {
        for env in envs {
            for &seed in seeds {
                cells.push(BenchmarkCell {
                    learner,
                    env: env.clone(),
                    seed,
                });
            }
        }
    }
    cells
}

fn summarize(cells: &[CellResult]) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for c in cells {
        let idx = match rows
            .iter()
            .position(|r| r.learner == c.cell.learner && r.env == c.cell.env)
        {
            Some(i) => i,
            None => {
                rows.push(ComparisonRow {
                    learner: c.cell.learner,
                    env: c.cell.env.clone(),
                    returns: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    failures: 0,
                });
                rows.len() - 1
            }
        };
        match &c.outcome {
            Ok(v) => rows[idx].returns.push(*v),
            Err(_) => rows[idx].failures += 1,
        }
    }
    for r in &mut rows {
        if !r.returns.is_empty() {
            (r.mean, r.std) = mean_sample_std(&r.returns);
        }
    }
    rows
}

/// Trains every cell from `base` with its learner, env and seed replaced.
/// Each cell writes into its own subdirectory of `out_dir`; failed cells are
/// recorded and do not stop the others.
pub fn benchmark(base: &TrainConfig, cells: &[BenchmarkCell], out_dir: &Path) -> Result<BenchmarkReport> {
    fs::create_dir_all(out_dir)?;
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            let mut cfg = base.clone();
            cfg.learner = cell.learner;
            cfg.env = cell.env.clone();
            cfg.seed = cell.seed;
            let outcome = train(&cfg, &out_dir.join(cell.dir_name()))
                .map(|o| o.final_eval.mean)
                .map_err(|e| e.to_string());
            CellResult {
                cell: cell.clone(),
                outcome,
            }
        })
        .collect();
    let report = BenchmarkReport {
        rows: summarize(&results),
        cells: results,
    };
    fs::write(out_dir.join("comparison.csv"), report.csv())?;
    fs::write(out_dir.join("comparison.txt"), report.table())?;
    Ok(report)
}

impl BenchmarkReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("learner,env,seeds,mean_return,std_return,failures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.learner,
                r.env,
                r.returns.len(),
                r.mean,
                r.std,
                r.failures
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let score = if r.returns.is_empty() {
                    "failed".to_string()
                } else if r.returns.len() == 1 {
                    format!("{:.3}", r.mean)
                } else {
                    format!("{:.3} ± {:.3}", r.mean, r.std)
                };
                [r.learner.to_string(), r.env.clone(), r.returns.len().to_string(), score]
            })
            .collect();
        let header = ["learner", "env", "seeds", "test return"];
        let mut widths = header.map(|h| h.chars().count());
        for c in &cells {
            for (w, s) in widths.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header.map(String::from));
        out.push_str(&line(&widths.map(|w| "-".repeat(w))));
        for c in &cells {
            out.push_str(&line(c));
        }
        for c in self.cells.iter().filter(|c| c.outcome.is_err()) {
            out.push_str(&format!(
                "failed: {} ({})\n",
                c.cell.dir_name(),
                c.outcome.as_ref().unwrap_err()
            ));
        }
        out
    }
}
