//! Hyperparameter grid presets and the search driver.

use mentor_core::eval::MetricSummary;
use mentor_core::ingest::SplitDataset;
use mentor_core::model::Context;
use mentor_core::train::train_loop;
use rayon::prelude::*;

use crate::{CliError, RunConfig};

/// One searched key and its candidate values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: &'static str,
    pub values: Vec<f64>,
}

/// `published`: the published search ranges. The alignment weight covers both
/// the small range of the search setup and the larger one of the
/// sensitivity study.
pub fn preset(name: &str) -> Result<Vec<GridAxis>, CliError> {
    match name {
        "published" => Ok(vec![
            GridAxis { key: "dropout", values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7] },
            GridAxis { key: "lambda_f", values: vec![0.5, 1.0, 1.5, 2.0, 2.5] },
            GridAxis { key: "lambda_g", values: vec![1e-2, 1e-3, 1e-4] },
            GridAxis { key: "tau", values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] },
            GridAxis { key: "lambda_align", values: vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0] },
        ]),
        other => Err(CliError::Usage(format!("unknown grid preset {other:?}"))),
    }
}

pub type Assignment = Vec<(&'static str, f64)>;

/// Cartesian product; the last axis varies fastest.
pub fn combinations(axes: &[GridAxis]) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push((axis.key, v));
                    next
                })
            })
            .collect();
    }
    out
}

pub fn apply(base: &RunConfig, assignment: &Assignment) -> Result<RunConfig, CliError> {
    let mut cfg = base.clone();
    for (k, v) in assignment {
        cfg.set(k, &v.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub assignment: Assignment,
    pub valid: MetricSummary,
}

/// Trains every assignment, at most `workers` at a time. Results keep the
/// enumeration order.
pub fn run_grid(
    base: &RunConfig,
    assignments: &[Assignment],
    workers: usize,
    split: &SplitDataset,
    ctx: &Context,
) -> Result<Vec<GridResult>, CliError> {
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| {
        assignments
            .par_iter()
            .map(|a| {
                let cfg = apply(base, a)?;
                let (model, _) = train_loop(&cfg.train, split, ctx)?;
                log::info!("grid {} -> valid R@20 {:.4}", describe(a), model.best_valid.recall20);
                Ok(GridResult { assignment: a.clone(), valid: model.best_valid })
            })
            .collect()
    })
}

pub fn describe(a: &Assignment) -> String {
    a.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// Index of the first result with the highest validation Recall@20.
pub fn best(results: &[GridResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if best.is_none_or(|b| r.valid.recall20 > results[b].valid.recall20) {
            best = Some(i);
        }
    }
    best
}
