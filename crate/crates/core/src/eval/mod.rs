//! Evaluation: per-locale segment-level Kendall tau with bootstrap intervals,
//! replicate averaging, and the cross-locale experiment designs.

pub(crate) mod experiments;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::manifest::{aggregate_target, Manifest};
use crate::model::{predict, ModelParameters};

pub use experiments::{
    data_vs_perf, subset_growth, temperature_sweep, transfer_matrix, CorrelationSummary, GrowthPoint,
    SweepRow, TransferMatrix, write_rows_csv,
};
pub use stats::{bootstrap_ci, bootstrap_tau, kendall_tau_b, pearson, quantile_sorted, BootstrapConfig};

/// One scored utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub utterance_id: String,
    pub locale: String,
    pub prediction: f64,
    pub target: f64,
}

/// Scores every record with its own locale tag (unknown tags fall back to the
/// wildcard embedding inside the model).
pub fn predict_manifest(params: &ModelParameters, m: &Manifest, features: &FeatureStore) -> Result<Vec<PredictionRow>> {
    m.records()
        .iter()
        .map(|r| {
            let (p, _) = predict(params, features.get(&r.utterance_id)?, &r.locale)?;
            Ok(PredictionRow {
                utterance_id: r.utterance_id.clone(),
                locale: r.locale.clone(),
                prediction: p.y_hat,
                target: aggregate_target(r),
            })
        })
        .collect()
}

/// Rows grouped by locale, keeping manifest order inside each group.
fn by_locale(preds: &[PredictionRow]) -> BTreeMap<&str, (Vec<f64>, Vec<f64>)> {
    let mut out: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in preds {
        let e = out.entry(p.locale.as_str()).or_default();
        e.0.push(p.prediction);
        e.1.push(p.target);
    }
    out
}

/// Unweighted mean over locales of the per-locale tau, skipping locales where
/// tau is undefined. `None` when no locale qualifies.
pub fn locale_mean_tau(preds: &[PredictionRow]) -> Option<f64> {
    let taus: Vec<f64> = by_locale(preds)
        .values()
        .filter_map(|(p, t)| kendall_tau_b(p, t).ok())
        .collect();
    mean(&taus)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocaleSplit {
    FineTuned,
    ZeroShot,
}

impl fmt::Display for LocaleSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocaleSplit::FineTuned => "fine_tuned",
            LocaleSplit::ZeroShot => "zero_shot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleRow {
    pub locale: String,
    pub n: usize,
    pub tau: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub split: LocaleSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLocale {
    pub locale: String,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<LocaleRow>,
    pub skipped: Vec<SkippedLocale>,
}

impl EvalReport {
    fn mean_where(&self, keep: impl Fn(&LocaleRow) -> bool) -> Option<f64> {
        let taus: Vec<f64> = self.rows.iter().filter(|r| keep(r)).map(|r| r.tau).collect();
        mean(&taus)
    }

    pub fn mean_fine_tuned(&self) -> Option<f64> {
        self.mean_where(|r| r.split == LocaleSplit::FineTuned)
    }

    pub fn mean_zero_shot(&self) -> Option<f64> {
        self.mean_where(|r| r.split == LocaleSplit::ZeroShot)
    }

    pub fn mean_all(&self) -> Option<f64> {
        self.mean_where(|_| true)
    }

    pub fn tau(&self, locale: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.locale == locale).map(|r| r.tau)
    }

    /// Writes per-locale rows, then one aggregate row per group (`locale` is
    /// `ALL:<group>`, `n` is the number of locales averaged, CI columns empty).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["locale", "n", "tau", "ci_low", "ci_high", "split"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.locale.clone(),
                r.n.to_string(),
                r.tau.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.split.to_string(),
            ])
            .map_err(io)?;
        }
        let groups = [
            ("fine_tuned", self.mean_fine_tuned(), LocaleSplit::FineTuned),
            ("zero_shot", self.mean_zero_shot(), LocaleSplit::ZeroShot),
        ];
        for (name, value, split) in groups {
            if let Some(v) = value {
                let n = self.rows.iter().filter(|r| r.split == split).count();
                w.write_record([format!("ALL:{name}"), n.to_string(), v.to_string(), String::new(), String::new(), name.into()])
                    .map_err(io)?;
            }
        }
        if let Some(v) = self.mean_all() {
            w.write_record(["ALL:all".into(), self.rows.len().to_string(), v.to_string(), String::new(), String::new(), "all".into()])
                .map_err(io)?;
        }
        for s in &self.skipped {
            log::warn!("skipped locale {} (n={}): {}", s.locale, s.n, s.reason);
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the per-locale rows back; aggregate rows are dropped.
    pub fn read_rows(path: &Path) -> Result<Vec<LocaleRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::io(path, e.into()))?;
            if rec.get(0).is_some_and(|l| l.starts_with("ALL:")) {
                continue;
            }
            rows.push(rec.deserialize(None).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?);
        }
        Ok(rows)
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

/// Bootstrap seed for one locale, derived from the run seed and the tag.
fn locale_seed(seed: u64, locale: &str) -> u64 {
    locale
        .bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Per-locale report from predictions. Locales where tau is undefined are
/// listed as skipped. The interval is widened to include the point estimate
/// when the percentile interval misses it.
pub fn report_from_predictions(
    preds: &[PredictionRow],
    zero_shot: &BTreeSet<String>,
    boot: &BootstrapConfig,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (locale, (p, t)) in by_locale(preds) {
        let split = if zero_shot.contains(locale) { LocaleSplit::ZeroShot } else { LocaleSplit::FineTuned };
        let skip = |reason: String| SkippedLocale { locale: locale.to_string(), n: p.len(), reason };
        if p.len() < 2 {
            skipped.push(skip("fewer than 2 utterances".into()));
            continue;
        }
        match kendall_tau_b(&p, &t) {
            Ok(tau) => {
                let cfg = BootstrapConfig { seed: locale_seed(boot.seed, locale), ..*boot };
                let (lo, hi) = bootstrap_tau(&p, &t, &cfg)?;
                rows.push(LocaleRow {
                    locale: locale.to_string(),
                    n: p.len(),
                    tau,
                    ci_low: lo.min(tau),
                    ci_high: hi.max(tau),
                    split,
                });
            }
            Err(Error::Degenerate(msg)) => skipped.push(skip(msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport { rows, skipped })
}

/// Scores `test` with `params` and builds the per-locale report.
pub fn evaluate(
    params: &ModelParameters,
    test: &Manifest,
    features: &FeatureStore,
    zero_shot: &BTreeSet<String>,
    boot: &BootstrapConfig,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    let preds = predict_manifest(params, test, features)?;
    Ok((report_from_predictions(&preds, zero_shot, boot)?, preds))
}

pub fn write_predictions_csv(path: &Path, preds: &[PredictionRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for p in preds {
        w.serialize(p).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display()))))
        .collect()
}

/// Averages replicate runs over the same test set. Per-locale tau is the
/// arithmetic mean of the runs' taus; the interval comes from resampling
/// utterances jointly across runs and averaging the per-run taus on each
/// resample.
pub fn replicate_average(
    runs: &[Vec<PredictionRow>],
    zero_shot: &BTreeSet<String>,
    boot: &BootstrapConfig,
) -> Result<EvalReport> {
    let first = runs.first().ok_or_else(|| Error::Empty("no runs to average".into()))?;
    let reports = runs
        .iter()
        .map(|r| report_from_predictions(r, zero_shot, boot))
        .collect::<Result<Vec<_>>>()?;
    let locale_set = |rep: &EvalReport| rep.rows.iter().map(|r| r.locale.clone()).collect::<BTreeSet<_>>();
    let reference = locale_set(&reports[0]);
    for (i, rep) in reports.iter().enumerate().skip(1) {
        if locale_set(rep) != reference {
            return Err(Error::InvalidArgument(format!("run {i} covers a different set of scored locales")));
        }
    }
    let ids = |r: &[PredictionRow]| r.iter().map(|p| p.utterance_id.clone()).collect::<Vec<_>>();
    let first_ids = ids(first);
    if runs.iter().any(|r| ids(r) != first_ids) {
        return Err(Error::InvalidArgument("runs were scored on different utterances".into()));
    }

    let grouped: Vec<_> = runs.iter().map(|r| by_locale(r)).collect();
    let mut rows = Vec::new();
    for row in &reports[0].rows {
        let loc = row.locale.as_str();
        let tau = reports.iter().map(|r| r.tau(loc).expect("same locale set")).sum::<f64>() / runs.len() as f64;
        let per_run: Vec<&(Vec<f64>, Vec<f64>)> = grouped.iter().map(|g| &g[loc]).collect();
        let n = per_run[0].0.len();
        let cfg = BootstrapConfig { seed: locale_seed(boot.seed, loc), ..*boot };
        let mut xs = vec![0.0; n];
        let mut ys = vec![0.0; n];
        let (lo, hi) = bootstrap_ci(n, &cfg, |idx| {
            let mut sum = 0.0;
            for (p, t) in &per_run {
                for (k, &i) in idx.iter().enumerate() {
                    xs[k] = p[i];
                    ys[k] = t[i];
                }
                sum += kendall_tau_b(&xs, &ys)?;
            }
            Ok(sum / per_run.len() as f64)
        })?;
        rows.push(LocaleRow {
            locale: row.locale.clone(),
            n,
            tau,
            ci_low: lo.min(tau),
            ci_high: hi.max(tau),
            split: row.split,
        });
    }
    Ok(EvalReport {
        rows,
        skipped: reports[0].skipped.clone(),
    })
}
