//! Run configuration and the experiment commands behind the `squid` binary.
//!
//! A [`RunConfig`] is resolved once (defaults, then the training preset, then
//! the TOML file, then command-line overrides), validated, and written into
//! every output directory as `run_config.toml`. Re-running from that file
//! reproduces the outputs byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::FrontendConfig;
use crate::error::{Error, Result};
use crate::eval::experiments::run_pool;
use crate::eval::{
    evaluate, kendall_tau_b, predict_manifest, read_predictions_csv, replicate_average, subset_growth,
    temperature_sweep, transfer_matrix, write_predictions_csv, write_rows_csv, BootstrapConfig, EvalReport,
    LocaleRow, LocaleSplit, PredictionRow, TransferMatrix,
};
use crate::features::FeatureStore;
use crate::manifest::{load_manifest, split, Manifest, SplitResult, SplitSpec};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParameters};
use crate::sampler::SamplerConfig;
use crate::svg;
use crate::synthbench::{default_locales, ArtifactAxis, gen_dataset, mix_seed, GeneratedDataset, SynthConfig};
use crate::trainer::{select_best, train, write_metrics_csv, TrainConfig};

pub const CONFIG_FILE: &str = "run_config.toml";
pub const DEFAULT_PRESET: &str = "desk-tiny";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Directory audio paths are relative to; defaults to the manifest's directory.
    pub audio_root: Option<PathBuf>,
    /// Log-Mel cache; features are recomputed on every run when unset.
    pub cache_dir: Option<PathBuf>,
    /// Checkpoint to initialise training from.
    pub warm_start: Option<PathBuf>,
}

/// Shorthand for synthetic locales: used only when the file does not spell
/// out `synth.locales`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLocalesConfig {
    pub count: usize,
    /// Per-locale utterance counts overriding `synth.utterances_per_locale`.
    pub utterances: BTreeMap<String, usize>,
    /// How strongly each locale's raters attend to one artifact axis, in
    /// [0, 1]. Locale `i` weights axis `i mod 4` (noise, gaps, flat prosody,
    /// robotize) by 1 and the others by `1 - focus`. 0 gives even weights.
    pub focus: f64,
}

impl Default for SynthLocalesConfig {
    fn default() -> Self {
        Self {
            count: 2,
            utterances: BTreeMap::new(),
            focus: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Matrix locales; empty means every fine-tuned locale.
    pub locales: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    /// Subset sweep targets; empty means every test locale.
    pub targets: Vec<String>,
    /// Subset sweep training sets; empty means nested prefixes of the
    /// fine-tuned locales of size 1, 2, 4, ... and all.
    pub training_sets: Vec<Vec<String>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            temperatures: vec![1.0, 2.0, 10.0, 100.0],
            targets: Vec::new(),
            training_sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every component seed is derived from it.
    pub seed: u64,
    pub workers: usize,
    /// Training preset the `train` table started from.
    pub preset: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub bootstrap: BootstrapConfig,
    pub synth_locales: SynthLocalesConfig,
    pub synth: SynthConfig,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            workers: 1,
            preset: DEFAULT_PRESET.into(),
            data: DataConfig::default(),
            model: ModelConfig::tiny(),
            frontend: FrontendConfig::desk(),
            split: SplitSpec::default(),
            train: TrainConfig::desk_tiny(),
            sampler: SamplerConfig::default(),
            bootstrap: BootstrapConfig::default(),
            synth_locales: SynthLocalesConfig::default(),
            synth: SynthConfig::default(),
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

/// Command-line values applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub preset: Option<String>,
    pub warm_start: Option<PathBuf>,
}

impl RunConfig {
    /// Resolves defaults, preset, optional TOML file and overrides, then validates.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let text = match file {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::resolve_str(&text, overrides)
    }

    pub fn resolve_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let preset = match (&overrides.preset, file.get("preset")) {
            (Some(p), _) => p.clone(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => DEFAULT_PRESET.into(),
        };
        let base = Self {
            preset: preset.clone(),
            train: TrainConfig::preset(&preset)?,
            ..Self::default()
        };
        let mut merged = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let explicit_locales = file.get("synth").and_then(|s| s.get("locales")).is_some();
        deep_merge(&mut merged, toml::Value::Table(file));
        let mut cfg: Self = merged.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.preset = preset;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(ws) = &overrides.warm_start {
            cfg.data.warm_start = Some(ws.clone());
        }
        if !explicit_locales {
            cfg.synth.locales = default_locales(cfg.synth_locales.count);
            let focus = cfg.synth_locales.focus;
            if !(0.0..=1.0).contains(&focus) {
                return Err(Error::Config(format!("synth_locales.focus {focus} must lie in [0, 1]")));
            }
            if focus > 0.0 {
                for (i, spec) in cfg.synth.locales.iter_mut().enumerate() {
                    let total = 1.0 + 3.0 * (1.0 - focus);
                    for (axis, w) in spec.artifact_axes.iter_mut() {
                        let raw = if *axis == ArtifactAxis::ALL[i % 4] { 1.0 } else { 1.0 - focus };
                        *w = raw / total;
                    }
                }
            }
        }
        cfg.apply_utterance_overrides()?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_utterance_overrides(&mut self) -> Result<()> {
        for (locale, n) in &self.synth_locales.utterances {
            let spec = self
                .synth
                .locales
                .iter_mut()
                .find(|s| &s.locale == locale)
                .ok_or_else(|| Error::Config(format!("synth_locales.utterances names unknown locale `{locale}`")))?;
            spec.utterances = Some(*n);
        }
        Ok(())
    }

    /// Component seeds are always derived from the global seed so that a
    /// single `--seed` controls the whole run.
    /// They are kept to 63 bits because TOML integers are signed.
    fn derive_seeds(&mut self) {
        let derive = |salt: u64| mix_seed(self.seed ^ salt) >> 1;
        self.synth.seed = derive(0x5157_0001);
        self.split.seed = derive(0x5157_0002);
        self.sampler.seed = derive(0x5157_0003);
        self.bootstrap.seed = derive(0x5157_0004);
    }

    /// Training seed of replica `r`.
    pub fn replica_seed(&self, r: usize) -> u64 {
        mix_seed(self.seed ^ (0x5157_0100 + r as u64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.model.validate()?;
        self.frontend.validate()?;
        if self.model.n_mels != self.frontend.n_mels || self.model.t_max != self.frontend.t_max {
            return Err(Error::Config(format!(
                "model expects {} mels x {} frames but the frontend produces {} x {}",
                self.model.n_mels, self.model.t_max, self.frontend.n_mels, self.frontend.t_max
            )));
        }
        self.split.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.bootstrap.resamples == 0 || !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err(Error::Config("bootstrap needs resamples >= 1 and level in (0, 1)".into()));
        }
        self.synth.validate()?;
        if let Some(t) = self.sweep.temperatures.iter().find(|t| !(**t >= 1.0)) {
            return Err(Error::Config(format!("sweep temperature {t} is below 1")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Manifest, split and features for a run.
pub struct Data {
    pub manifest: Manifest,
    pub split: SplitResult,
    pub features: FeatureStore,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg
            .data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
        let manifest = load_manifest(path)?;
        let root = match &cfg.data.audio_root {
            Some(r) => r.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let split = split(&manifest, &cfg.split)?;
        log::info!(
            "{} records: train {}, dev {}, test {}; fine-tuned {:?}, zero-shot {:?}",
            manifest.len(),
            split.train.len(),
            split.dev.len(),
            split.test.len(),
            split.fine_tuned_locales,
            split.zero_shot_locales
        );
        let mut features = FeatureStore::new(cfg.frontend.clone());
        features.load(&manifest, &root, cfg.data.cache_dir.as_deref())?;
        Ok(Self { manifest, split, features })
    }
}

fn warm_start(cfg: &RunConfig) -> Result<Option<ModelParameters>> {
    cfg.data.warm_start.as_deref().map(load_checkpoint).transpose()
}

/// Trains on `train`, scores snapshots on `dev`, returns the best one.
pub fn train_best(
    cfg: &RunConfig,
    sampler: &SamplerConfig,
    train_set: &Manifest,
    dev: &Manifest,
    features: &FeatureStore,
    seed: u64,
) -> Result<ModelParameters> {
    let outcome = train(&cfg.train, &cfg.model, train_set, dev, features, sampler, warm_start(cfg)?, seed)?;
    Ok(select_best(&outcome.snapshots)?.params.clone())
}

/// Outputs of one training replica.
#[derive(Debug, Clone)]
pub struct ReplicaResult {
    pub dir: PathBuf,
    pub best_step: usize,
    pub report: EvalReport,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub replicas: Vec<ReplicaResult>,
    /// Replicate average over the test split.
    pub report: EvalReport,
}

/// Synthesises a dataset into `out`.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<GeneratedDataset> {
    create_dir(out)?;
    let data = gen_dataset(&cfg.synth, out)?;
    cfg.write(out)?;
    Ok(data)
}

/// Trains `train.replicas` models, evaluates each best snapshot on the test
/// split, and writes per-replica and averaged reports.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    cfg.write(out)?;
    let data = Data::load(cfg)?;
    let replicas = run_pool(cfg.workers, || {
        (0..cfg.train.replicas)
            .into_par_iter()
            .map(|r| train_replica(cfg, &data, r, &out.join(format!("replica-{r}"))))
            .collect::<Result<Vec<_>>>()
    })??;
    let runs: Vec<_> = replicas.iter().map(|r| r.predictions.clone()).collect();
    let report = replicate_average(&runs, &data.split.zero_shot_locales, &cfg.bootstrap)?;
    write_report(&report, out, "replicate-averaged test tau")?;
    Ok(TrainSummary { replicas, report })
}

fn train_replica(cfg: &RunConfig, data: &Data, r: usize, dir: &Path) -> Result<ReplicaResult> {
    create_dir(&dir.join("snapshots"))?;
    let outcome = train(
        &cfg.train,
        &cfg.model,
        &data.split.train,
        &data.split.dev,
        &data.features,
        &cfg.sampler,
        warm_start(cfg)?,
        cfg.replica_seed(r),
    )?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    for s in &outcome.snapshots {
        save_checkpoint(&dir.join("snapshots").join(format!("step-{:06}.sqck", s.step)), &s.params)?;
    }
    let best = select_best(&outcome.snapshots)?;
    save_checkpoint(&dir.join("best.sqck"), &best.params)?;
    let loss: Vec<(f64, f64)> = outcome.metrics.iter().map(|m| (m.step as f64, m.train_loss)).collect();
    let dev: Vec<(f64, f64)> =
        outcome.snapshots.iter().filter_map(|s| s.dev_score.map(|d| (s.step as f64, d))).collect();
    svg::curves(&dir.join("training.svg"), "training", "step", "value", &[
        ("train loss".into(), loss),
        ("dev tau".into(), dev),
    ])?;
    let (report, predictions) = evaluate(
        &best.params,
        &data.split.test,
        &data.features,
        &data.split.zero_shot_locales,
        &cfg.bootstrap,
    )?;
    write_predictions_csv(&dir.join("predictions.csv"), &predictions)?;
    write_report(&report, dir, &format!("test tau, replica {r} (step {})", best.step))?;
    Ok(ReplicaResult {
        dir: dir.to_path_buf(),
        best_step: best.step,
        report,
        predictions,
    })
}

fn write_report(report: &EvalReport, dir: &Path, title: &str) -> Result<()> {
    report.write_csv(&dir.join("report.csv"))?;
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| (format!("{} ({})", r.locale, r.split), r.tau, r.ci_low, r.ci_high))
        .collect();
    svg::intervals(&dir.join("report.svg"), title, "Kendall tau", &rows)
}

/// Which records `run_eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Test,
    Dev,
    Train,
    All,
    FineTuned,
    ZeroShot,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "test" => Self::Test,
            "dev" => Self::Dev,
            "train" => Self::Train,
            "all" => Self::All,
            "fine_tuned" => Self::FineTuned,
            "zero_shot" => Self::ZeroShot,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown split `{other}` (expected test, dev, train, all, fine_tuned or zero_shot)"
                )))
            }
        })
    }
}

/// Scores a checkpoint on one split of the configured manifest.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, which: EvalSplit, out: &Path) -> Result<EvalReport> {
    let params = load_checkpoint(checkpoint)?;
    if params.config.n_mels != cfg.frontend.n_mels || params.config.t_max != cfg.frontend.t_max {
        return Err(Error::Config(format!(
            "checkpoint expects {} mels x {} frames, frontend produces {} x {}",
            params.config.n_mels, params.config.t_max, cfg.frontend.n_mels, cfg.frontend.t_max
        )));
    }
    create_dir(out)?;
    cfg.write(out)?;
    let data = Data::load(cfg)?;
    let s = &data.split;
    let records = match which {
        EvalSplit::Test => s.test.clone(),
        EvalSplit::Dev => s.dev.clone(),
        EvalSplit::Train => s.train.clone(),
        EvalSplit::All => data.manifest.clone(),
        EvalSplit::FineTuned => s.test.restrict_to_locales(&s.fine_tuned_locales),
        EvalSplit::ZeroShot => s.test.restrict_to_locales(&s.zero_shot_locales),
    };
    if records.is_empty() {
        return Err(Error::Empty(format!("split {which:?} has no records")));
    }
    let (report, preds) = evaluate(&params, &records, &data.features, &s.zero_shot_locales, &cfg.bootstrap)?;
    write_predictions_csv(&out.join("predictions.csv"), &preds)?;
    write_report(&report, out, &format!("{} tau", checkpoint.display()))?;
    let points: Vec<_> = preds.iter().map(|p| (p.locale.clone(), p.target, p.prediction)).collect();
    svg::scatter(&out.join("scatter.svg"), "prediction vs target", "target", "prediction", &points)?;
    for sk in &report.skipped {
        log::warn!("skipped {} (n = {}): {}", sk.locale, sk.n, sk.reason);
    }
    Ok(report)
}

fn locale_tau(params: &ModelParameters, test: &Manifest, features: &FeatureStore, locale: &str) -> Result<f64> {
    let subset = test.filter(|r| r.locale == locale);
    if subset.len() < 2 {
        return Err(Error::Empty(format!("locale {locale} has fewer than 2 test records")));
    }
    let preds = predict_manifest(params, &subset, features)?;
    let p: Vec<f64> = preds.iter().map(|r| r.prediction).collect();
    let t: Vec<f64> = preds.iter().map(|r| r.target).collect();
    kendall_tau_b(&p, &t)
}

fn only_locales(m: &Manifest, set: &BTreeSet<String>) -> Manifest {
    m.restrict_to_locales(set)
}

/// Mono-locale training for every matrix locale, each scored on every locale.
pub fn run_transfer(cfg: &RunConfig, out: &Path) -> Result<TransferMatrix> {
    create_dir(out)?;
    cfg.write(out)?;
    let data = Data::load(cfg)?;
    let locales: Vec<String> = if cfg.transfer.locales.is_empty() {
        data.split.fine_tuned_locales.iter().cloned().collect()
    } else {
        cfg.transfer.locales.clone()
    };
    let seed = cfg.replica_seed(0);
    let matrix = transfer_matrix(
        &locales,
        cfg.workers,
        |locale| {
            let set = BTreeSet::from([locale.to_string()]);
            train_best(
                cfg,
                &cfg.sampler,
                &only_locales(&data.split.train, &set),
                &only_locales(&data.split.dev, &set),
                &data.features,
                seed,
            )
        },
        |model, locale| locale_tau(model, &data.split.test, &data.features, locale),
    )?;
    matrix.write_csv(&out.join("transfer.csv"))?;
    svg::heatmap(&out.join("transfer.svg"), "test tau (rows: training locale)", &matrix.locales, &matrix.cells)?;
    Ok(matrix)
}

/// Sweep dimension of `run_sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Temperature,
    Subset,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(Self::Temperature),
            "subset" => Ok(Self::Subset),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter `{other}` (expected temperature or subset)"
            ))),
        }
    }
}

pub fn run_sweep(cfg: &RunConfig, param: SweepParam, out: &Path) -> Result<()> {
    create_dir(out)?;
    cfg.write(out)?;
    let data = Data::load(cfg)?;
    match param {
        SweepParam::Temperature => temperature_curve(cfg, &data, out),
        SweepParam::Subset => growth_curve(cfg, &data, out),
    }
}

fn temperature_curve(cfg: &RunConfig, data: &Data, out: &Path) -> Result<()> {
    let s = &data.split;
    let rows = temperature_sweep(&cfg.sweep.temperatures, cfg.workers, |tau| {
        let sampler = SamplerConfig { temperature: tau, ..cfg.sampler.clone() };
        // same replica seeds at every temperature
        let runs = (0..cfg.train.replicas)
            .map(|r| {
                let model = train_best(cfg, &sampler, &s.train, &s.dev, &data.features, cfg.replica_seed(r))?;
                predict_manifest(&model, &s.test, &data.features)
            })
            .collect::<Result<Vec<_>>>()?;
        replicate_average(&runs, &s.zero_shot_locales, &cfg.bootstrap)
    })?;
    write_rows_csv(&out.join("sweep.csv"), &rows)?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        if let Some(score) = r.score {
            series.entry(r.aggregate.clone()).or_default().push((r.tau_temperature.log10(), score));
        }
    }
    svg::curves(&out.join("sweep.svg"), "temperature sweep", "log10 temperature", "mean tau", &series.into_iter().collect::<Vec<_>>())
}

fn growth_curve(cfg: &RunConfig, data: &Data, out: &Path) -> Result<()> {
    let s = &data.split;
    let targets: Vec<String> = if cfg.sweep.targets.is_empty() {
        s.test.locales().into_iter().collect()
    } else {
        cfg.sweep.targets.clone()
    };
    let sets: Vec<(String, BTreeSet<String>)> = if cfg.sweep.training_sets.is_empty() {
        nested_prefixes(&s.fine_tuned_locales.iter().cloned().collect::<Vec<_>>())
    } else {
        cfg.sweep
            .training_sets
            .iter()
            .map(|set| (set.join("+"), set.iter().cloned().collect()))
            .collect()
    };
    let seed = cfg.replica_seed(0);
    let points = subset_growth(
        &targets,
        &sets,
        cfg.workers,
        |set| {
            train_best(
                cfg,
                &cfg.sampler,
                &only_locales(&s.train, set),
                &only_locales(&s.dev, set),
                &data.features,
                seed,
            )
        },
        |model, target| locale_tau(model, &s.test, &data.features, target),
    )?;
    write_rows_csv(&out.join("growth.csv"), &points)?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &points {
        if let Some(score) = p.score {
            series.entry(p.target.clone()).or_default().push((p.set_size as f64, score));
        }
    }
    svg::curves(&out.join("growth.svg"), "locale subset growth", "training locales", "tau", &series.into_iter().collect::<Vec<_>>())
}

/// Prefixes of size 1, 2, 4, ... plus the full list.
fn nested_prefixes(locales: &[String]) -> Vec<(String, BTreeSet<String>)> {
    let mut sizes = Vec::new();
    let mut k = 1;
    while k < locales.len() {
        sizes.push(k);
        k *= 2;
    }
    sizes.push(locales.len());
    sizes
        .into_iter()
        .filter(|k| *k > 0)
        .map(|k| (format!("first-{k}"), locales[..k].iter().cloned().collect()))
        .collect()
}

/// Merges run directories (each holding `predictions.csv` and `report.csv`)
/// into one replicate-averaged report.
pub fn run_report(cfg: &RunConfig, dirs: &[PathBuf], out: &Path) -> Result<EvalReport> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    let mut zero_shot = BTreeSet::new();
    for d in dirs {
        runs.push(read_predictions_csv(&d.join("predictions.csv"))?);
        let rows: Vec<LocaleRow> = EvalReport::read_rows(&d.join("report.csv"))?;
        zero_shot.extend(rows.into_iter().filter(|r| r.split == LocaleSplit::ZeroShot).map(|r| r.locale));
    }
    let report = replicate_average(&runs, &zero_shot, &cfg.bootstrap)?;
    create_dir(out)?;
    cfg.write(out)?;
    write_report(&report, out, &format!("average of {} runs", dirs.len()))?;
    Ok(report)
}
