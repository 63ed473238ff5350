//! Ratings manifests: JSONL loading and validation, the time / zero-shot / dev
//! splits, and per-utterance target aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

/// One rated utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub utterance_id: String,
    pub audio_path: String,
    pub locale: String,
    pub ratings: Vec<f64>,
    pub system_id: String,
    pub project_id: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(flatten)]
    record: RatingRecord,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// Returns true when `r` lies on the 9-point grid {1.0, 1.5, ..., 5.0}.
pub fn on_rating_grid(r: f64) -> bool {
    if !r.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&r) {
        return false;
    }
    let doubled = r * 2.0;
    (doubled - doubled.round()).abs() < 1e-9
}

/// Case-normalizes a BCP-47-style tag: language lowercase, script titlecase,
/// region uppercase. `_` separators become `-`.
pub fn normalize_locale(tag: &str) -> String {
    tag.trim()
        .split(['-', '_'])
        .enumerate()
        .map(|(i, sub)| {
            if i == 0 {
                sub.to_ascii_lowercase()
            } else if sub.len() == 2 && sub.chars().all(|c| c.is_ascii_alphabetic())
                || sub.len() == 3 && sub.chars().all(|c| c.is_ascii_digit())
            {
                sub.to_ascii_uppercase()
            } else if sub.len() == 4 && sub.chars().all(|c| c.is_ascii_alphabetic()) {
                let lower = sub.to_ascii_lowercase();
                let mut chars = lower.chars();
                match chars.next() {
                    Some(first) => first.to_ascii_uppercase().to_string() + chars.as_str(),
                    None => lower,
                }
            } else {
                sub.to_ascii_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join("-")
}

impl RatingRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.utterance_id.is_empty() {
            return Err("empty utterance_id".into());
        }
        if self.locale.trim().is_empty() {
            return Err("empty locale".into());
        }
        if self.ratings.is_empty() {
            return Err("ratings list is empty".into());
        }
        if let Some(bad) = self.ratings.iter().find(|r| !on_rating_grid(**r)) {
            return Err(format!(
                "rating {bad} is off the 0.5-step grid between 1.0 and 5.0"
            ));
        }
        Ok(())
    }

    pub fn mean_rating(&self) -> f64 {
        self.ratings.iter().sum::<f64>() / self.ratings.len() as f64
    }
}

/// Per-utterance regression target: mean rating mapped linearly from [1, 5] to [0, 1].
pub fn aggregate_target(record: &RatingRecord) -> f64 {
    (record.mean_rating() - RATING_MIN) / (RATING_MAX - RATING_MIN)
}

/// An ordered, validated set of rating records with a locale index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<RatingRecord>,
    locale_index: BTreeMap<String, Vec<usize>>,
}

impl Manifest {
    /// Builds a manifest, normalizing locales and rejecting invalid or duplicate records.
    pub fn new(records: Vec<RatingRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut normalized = Vec::with_capacity(records.len());
        for mut r in records {
            r.validate().map_err(Error::InvalidArgument)?;
            r.locale = normalize_locale(&r.locale);
            if !seen.insert(r.utterance_id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate utterance_id {}",
                    r.utterance_id
                )));
            }
            normalized.push(r);
        }
        Ok(Self::from_valid(normalized))
    }

    fn from_valid(records: Vec<RatingRecord>) -> Self {
        let mut locale_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            locale_index.entry(r.locale.clone()).or_default().push(i);
        }
        Self {
            records,
            locale_index,
        }
    }

    fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        Self::from_valid(
            indices
                .into_iter()
                .map(|i| self.records[i].clone())
                .collect(),
        )
    }

    pub fn filter(&self, mut keep: impl FnMut(&RatingRecord) -> bool) -> Self {
        Self::from_valid(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn restrict_to_locales(&self, locales: &BTreeSet<String>) -> Self {
        self.filter(|r| locales.contains(&r.locale))
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn locale_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.locale_index
    }

    pub fn locales(&self) -> BTreeSet<String> {
        self.locale_index.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads a JSONL manifest. Blank lines are skipped; unknown fields are ignored
/// with a warning.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut warned: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        for key in raw.extra.keys() {
            if warned.insert(key.clone()) {
                log::warn!("{}:{lineno}: ignoring unknown field `{key}`", path.display());
            }
        }
        let mut record = raw.record;
        record.validate().map_err(err)?;
        record.locale = normalize_locale(&record.locale);
        if !seen.insert(record.utterance_id.clone()) {
            return Err(err(format!(
                "duplicate utterance_id {}",
                record.utterance_id
            )));
        }
        records.push(record);
    }
    Ok(Manifest::from_valid(records))
}

/// Splits at `cutoff`: records strictly before go left, the rest (including
/// `timestamp == cutoff`) go right. Order is preserved on both sides.
pub fn split_by_time(m: &Manifest, cutoff: DateTime<Utc>) -> (Manifest, Manifest) {
    let (before, after): (Vec<_>, Vec<_>) = m
        .records
        .iter()
        .cloned()
        .partition(|r| r.timestamp < cutoff);
    (Manifest::from_valid(before), Manifest::from_valid(after))
}

/// Partitions locales by record count: a locale is zero-shot iff its count is
/// strictly below `threshold`.
pub fn holdout_zero_shot(m: &Manifest, threshold: usize) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut fine_tuned = BTreeSet::new();
    let mut zero_shot = BTreeSet::new();
    for (locale, idx) in &m.locale_index {
        if idx.len() < threshold {
            zero_shot.insert(locale.clone());
        } else {
            fine_tuned.insert(locale.clone());
        }
    }
    (fine_tuned, zero_shot)
}

/// Draws `round_half_up(fraction * |train|)` records without replacement as a
/// dev set. Both outputs keep manifest order.
pub fn sample_dev(train: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dev fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = train.len();
    let n_dev = ((fraction * n as f64) + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, n_dev.min(n)).into_vec();
    picked.sort_unstable();
    let dev_set: HashSet<usize> = picked.iter().copied().collect();
    let rest = (0..n).filter(|i| !dev_set.contains(i));
    Ok((train.subset(rest), train.subset(picked)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocaleStat {
    pub count: usize,
    pub frequency: f64,
}

/// Record count and natural frequency per locale.
pub fn locale_stats(m: &Manifest) -> Result<BTreeMap<String, LocaleStat>> {
    if m.is_empty() {
        return Err(Error::Empty("locale statistics of an empty manifest".into()));
    }
    let total = m.len() as f64;
    Ok(m
        .locale_index
        .iter()
        .map(|(l, idx)| {
            (
                l.clone(),
                LocaleStat {
                    count: idx.len(),
                    frequency: idx.len() as f64 / total,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub time_cutoff: DateTime<Utc>,
    pub zero_shot_threshold: usize,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            time_cutoff: "2021-12-01T00:00:00Z".parse().expect("valid literal"),
            zero_shot_threshold: 8000,
            dev_fraction: 0.025,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.dev_fraction must lie in (0, 1), got {}",
                self.dev_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: Manifest,
    pub dev: Manifest,
    pub test: Manifest,
    pub fine_tuned_locales: BTreeSet<String>,
    pub zero_shot_locales: BTreeSet<String>,
}

/// Full split protocol: time split into train-pool / test, zero-shot locales
/// chosen by total record count and removed from the train pool, then dev
/// sampled globally from what remains.
pub fn split(m: &Manifest, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    if m.is_empty() {
        return Err(Error::Empty("cannot split an empty manifest".into()));
    }
    let (pool, test) = split_by_time(m, spec.time_cutoff);
    let (_, zero_shot) = holdout_zero_shot(m, spec.zero_shot_threshold);
    let pool = pool.filter(|r| !zero_shot.contains(&r.locale));
    let fine_tuned = pool.locales();
    let (train, dev) = sample_dev(&pool, spec.dev_fraction, spec.seed)?;
    Ok(SplitResult {
        train,
        dev,
        test,
        fine_tuned_locales: fine_tuned,
        zero_shot_locales: zero_shot,
    })
}
