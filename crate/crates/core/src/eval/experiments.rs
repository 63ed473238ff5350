//! Grid experiments: transfer matrices, locale-subset growth, temperature
//! sweeps, and data size against performance. Cells run on a bounded worker
//! pool; results are collected in input order so output never depends on
//! scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_writer, pearson, EvalReport};
use crate::error::{Error, Result};

pub(crate) fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Tau of the model fine-tuned on `locales[row]`, tested on `locales[col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub locales: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    /// `(row, col, message)` for every cell that failed.
    pub failures: Vec<(usize, usize, String)>,
}

impl TransferMatrix {
    pub fn get(&self, train: &str, test: &str) -> Option<f64> {
        let i = self.locales.iter().position(|l| l == train)?;
        let j = self.locales.iter().position(|l| l == test)?;
        self.cells[i][j]
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).filter_map(|(_, c)| *c))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Long format: `train_locale,test_locale,tau`; failed cells have an empty tau.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["train_locale", "test_locale", "tau"]).map_err(io)?;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let tau = c.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([self.locales[i].as_str(), self.locales[j].as_str(), tau.as_str()]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains one model per locale (rows) and evaluates it on every locale
/// (columns). A failed training fails its whole row; failed cells are
/// recorded, not fatal.
pub fn transfer_matrix<M, T, E>(locales: &[String], workers: usize, train_fn: T, eval_fn: E) -> Result<TransferMatrix>
where
    M: Send,
    T: Fn(&str) -> Result<M> + Sync,
    E: Fn(&M, &str) -> Result<f64> + Sync,
{
    if locales.len() < 2 {
        return Err(Error::InvalidArgument("a transfer matrix needs at least 2 locales".into()));
    }
    let rows: Vec<Vec<std::result::Result<f64, String>>> = run_pool(workers, || {
        locales
            .par_iter()
            .map(|train| match train_fn(train) {
                Ok(model) => locales
                    .iter()
                    .map(|test| eval_fn(&model, test).map_err(|e| e.to_string()))
                    .collect(),
                Err(e) => vec![Err(format!("training failed: {e}")); locales.len()],
            })
            .collect()
    })?;
    let mut failures = Vec::new();
    let cells = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .enumerate()
                .map(|(j, c)| match c {
                    Ok(v) => Some(v),
                    Err(msg) => {
                        log::warn!("transfer cell ({}, {}) missing: {msg}", locales[i], locales[j]);
                        failures.push((i, j, msg));
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(TransferMatrix {
        locales: locales.to_vec(),
        cells,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub target: String,
    pub training_set: String,
    pub set_size: usize,
    pub score: Option<f64>,
}

/// Trains once per named training set and scores each target locale.
pub fn subset_growth<M, T, E>(
    targets: &[String],
    training_sets: &[(String, BTreeSet<String>)],
    workers: usize,
    train_fn: T,
    eval_fn: E,
) -> Result<Vec<GrowthPoint>>
where
    M: Send,
    T: Fn(&BTreeSet<String>) -> Result<M> + Sync,
    E: Fn(&M, &str) -> Result<f64> + Sync,
{
    if let Some((name, _)) = training_sets.iter().find(|(_, s)| s.is_empty()) {
        return Err(Error::InvalidArgument(format!("training set `{name}` is empty")));
    }
    let per_set: Vec<Vec<GrowthPoint>> = run_pool(workers, || {
        training_sets
            .par_iter()
            .map(|(name, set)| {
                let model = train_fn(set);
                targets
                    .iter()
                    .map(|target| {
                        let score = match &model {
                            Ok(m) => eval_fn(m, target),
                            Err(e) => Err(Error::InvalidArgument(format!("training failed: {e}"))),
                        };
                        if let Err(e) = &score {
                            log::warn!("growth cell ({target}, {name}) missing: {e}");
                        }
                        GrowthPoint {
                            target: target.clone(),
                            training_set: name.clone(),
                            set_size: set.len(),
                            score: score.ok(),
                        }
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(per_set.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_temperature: f64,
    pub aggregate: String,
    pub score: Option<f64>,
}

/// One run per temperature; emits fine-tuned, zero-shot and overall aggregates.
pub fn temperature_sweep<R>(temperatures: &[f64], workers: usize, run: R) -> Result<Vec<SweepRow>>
where
    R: Fn(f64) -> Result<EvalReport> + Sync,
{
    if let Some(t) = temperatures.iter().find(|t| !(**t >= 1.0)) {
        return Err(Error::InvalidArgument(format!("temperature {t} is below 1")));
    }
    let reports: Vec<Result<EvalReport>> = run_pool(workers, || temperatures.par_iter().map(|t| run(*t)).collect())?;
    let mut out = Vec::new();
    for (t, rep) in temperatures.iter().zip(reports) {
        let rep = rep.map_err(|e| log::warn!("sweep cell τ={t} failed: {e}")).ok();
        let aggs = [
            ("fine_tuned", rep.as_ref().and_then(|r| r.mean_fine_tuned())),
            ("zero_shot", rep.as_ref().and_then(|r| r.mean_zero_shot())),
            ("all", rep.as_ref().and_then(|r| r.mean_all())),
        ];
        for (name, score) in aggs {
            out.push(SweepRow {
                tau_temperature: *t,
                aggregate: name.into(),
                score,
            });
        }
    }
    Ok(out)
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSummary {
    /// `(locale, ln count, tau)`
    pub points: Vec<(String, f64, f64)>,
    pub r: f64,
}

/// Pearson correlation between log record count and per-locale tau.
pub fn data_vs_perf(report: &EvalReport, counts: &BTreeMap<String, usize>) -> Result<CorrelationSummary> {
    let mut points = Vec::new();
    for row in &report.rows {
        if let Some(&c) = counts.get(&row.locale) {
            if c >= 1 {
                points.push((row.locale.clone(), (c as f64).ln(), row.tau));
            }
        }
    }
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 locales with both a score and a count, got {}",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| p.1).collect();
    let y: Vec<f64> = points.iter().map(|p| p.2).collect();
    Ok(CorrelationSummary { r: pearson(&x, &y)?, points })
}
