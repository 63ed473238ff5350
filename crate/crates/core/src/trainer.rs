//! Fine-tuning: Adam with linear warmup, global-norm clipping, periodic
//! snapshots scored on dev, and best-snapshot selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{locale_mean_tau, predict_manifest};
use crate::features::FeatureStore;
use crate::manifest::{locale_stats, Manifest};
use crate::model::{backward_into, predict, LocaleVocab, ModelConfig, ModelParameters};
use crate::sampler::{temperature_probs, BatchSampler, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub snapshot_every: usize,
    pub replicas: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::squid_default()
    }
}

impl TrainConfig {
    pub fn squid_default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            total_steps: 100_000,
            warmup_steps: 1500,
            snapshot_every: 10_000,
            replicas: 3,
            clip_norm: Some(1.0),
        }
    }

    pub fn voicemos() -> Self {
        Self {
            batch_size: 8,
            total_steps: 10_000,
            snapshot_every: 1000,
            ..Self::squid_default()
        }
    }

    /// Small-model settings for single-CPU runs. The tiny encoder starts from
    /// random weights, so it needs a far larger step size than fine-tuning a
    /// pre-trained network.
    pub fn desk_tiny() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            total_steps: 5000,
            warmup_steps: 100,
            snapshot_every: 500,
            replicas: 3,
            clip_norm: Some(1.0),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "squid-default" => Ok(Self::squid_default()),
            "voicemos" => Ok(Self::voicemos()),
            "desk-tiny" => Ok(Self::desk_tiny()),
            other => Err(Error::Config(format!("unknown training preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.snapshot_every == 0 || self.replicas == 0 {
            return Err(Error::Config(
                "train.batch_size, total_steps, snapshot_every and replicas must be positive".into(),
            ));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "train.warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.total_steps % self.snapshot_every != 0 {
            return Err(Error::Config(format!(
                "train.snapshot_every {} does not divide total_steps {}",
                self.snapshot_every, self.total_steps
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to the base rate over the warmup, then constant.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over flat slices. `t` is the 1-based update
/// count.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam moments mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParameters,
    pub v: ModelParameters,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Applies one Adam step to every tensor. Fails without modifying anything if
/// a gradient is not finite.
pub fn adam_step(state: &mut AdamState, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) -> Result<()> {
    for t in grads.tensors() {
        if let Some(pos) = t.data.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}[{pos}] is {} at update {}",
                t.name,
                t.data[pos],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let g = grads.tensors();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        adam_update(p.data, g.data, m.data, v.data, state.step, lr);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Single-run training loop state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    params: ModelParameters,
    grad: ModelParameters,
    adam: AdamState,
    sampler: BatchSampler<'a>,
    train: &'a Manifest,
    features: &'a FeatureStore,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Initializes from `seed`, or from `warm_start` whose weights are carried
    /// over while the step counter and optimizer state start fresh.
    pub fn new(
        cfg: &TrainConfig,
        model_cfg: &ModelConfig,
        train: &'a Manifest,
        features: &'a FeatureStore,
        sampler_cfg: &SamplerConfig,
        warm_start: Option<ModelParameters>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let stats = locale_stats(train)?;
        let natural: BTreeMap<String, f64> = stats.iter().map(|(l, s)| (l.clone(), s.frequency)).collect();
        let dist = temperature_probs(&natural, sampler_cfg.temperature)?;
        let sampler_cfg = SamplerConfig {
            batch_size: cfg.batch_size,
            ..sampler_cfg.clone()
        };
        let sampler = BatchSampler::new(train, &dist, &sampler_cfg)?;
        for r in train.records() {
            features.get(&r.utterance_id)?;
        }
        let params = match warm_start {
            Some(p) => {
                if &p.config != model_cfg {
                    return Err(Error::Config("warm-start checkpoint has a different model configuration".into()));
                }
                let unseen: Vec<_> = stats.keys().filter(|l| !p.vocab.contains(l)).collect();
                if !unseen.is_empty() {
                    log::warn!("locales {unseen:?} are not in the warm-start vocabulary and train the wildcard embedding");
                }
                p
            }
            None => ModelParameters::init(model_cfg, &LocaleVocab::new(stats.keys().cloned()), seed)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sampler_cfg.seed.rotate_left(32));
        rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            grad: params.zeros_like(),
            adam: AdamState::new(&params),
            params,
            sampler,
            train,
            features,
            rng,
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimizer update on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.sampler.next_training_batch(&mut self.rng);
        for t in self.grad.tensors_mut() {
            t.data.fill(0.0);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut loss_sum = 0.0;
        for item in &batch {
            let spec = self.features.get(&item.utterance_id)?;
            let (pred, trace) = predict(&self.params, spec, &item.locale_for_embedding)?;
            let err = pred.y_hat - item.target;
            loss_sum += err * err;
            backward_into(&self.params, &trace, 2.0 * err * scale, &mut self.grad)?;
        }
        let grad_norm = self.grad.squared_norm().sqrt();
        if let Some(c) = self.cfg.clip_norm {
            if grad_norm > c {
                self.grad.scale(c / grad_norm);
            }
        }
        self.step += 1;
        let lr = lr_schedule(self.step, &self.cfg);
        adam_step(&mut self.adam, &mut self.params, &self.grad, lr)?;
        Ok(StepStats {
            step: self.step,
            train_loss: loss_sum * scale,
            lr,
            grad_norm,
        })
    }

    /// Mean squared error over the whole training manifest with true locales.
    pub fn train_mse(&self) -> Result<f64> {
        let preds = predict_manifest(&self.params, self.train, self.features)?;
        Ok(preds.iter().map(|p| (p.prediction - p.target).powi(2)).sum::<f64>() / preds.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub params: ModelParameters,
    /// Unweighted mean of per-locale dev Kendall tau; `None` if every dev
    /// locale was degenerate.
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub dev_score: Option<f64>,
}

pub struct TrainOutcome {
    pub snapshots: Vec<Snapshot>,
    pub metrics: Vec<MetricsRow>,
}

/// Dev selection score for a parameter set.
pub fn dev_score(params: &ModelParameters, dev: &Manifest, features: &FeatureStore) -> Result<Option<f64>> {
    let preds = predict_manifest(params, dev, features)?;
    Ok(locale_mean_tau(&preds))
}

/// Runs `cfg.total_steps` updates, snapshotting and scoring on `dev` every
/// `cfg.snapshot_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Manifest,
    dev: &Manifest,
    features: &FeatureStore,
    sampler_cfg: &SamplerConfig,
    warm_start: Option<ModelParameters>,
    seed: u64,
) -> Result<TrainOutcome> {
    if dev.is_empty() {
        return Err(Error::Empty("dev split is empty".into()));
    }
    for r in dev.records() {
        features.get(&r.utterance_id)?;
    }
    let mut trainer = Trainer::new(cfg, model_cfg, train, features, sampler_cfg, warm_start, seed)?;
    let mut snapshots = Vec::with_capacity(cfg.total_steps / cfg.snapshot_every);
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    while trainer.step_count() < cfg.total_steps {
        let s = trainer.step()?;
        let mut row = MetricsRow {
            step: s.step,
            train_loss: s.train_loss,
            lr: s.lr,
            dev_score: None,
        };
        if s.step % cfg.snapshot_every == 0 {
            let score = dev_score(trainer.params(), dev, features)?;
            log::info!("step {} loss {:.5} dev {:?}", s.step, s.train_loss, score);
            row.dev_score = score;
            snapshots.push(Snapshot {
                step: s.step,
                params: trainer.params().clone(),
                dev_score: score,
            });
        }
        metrics.push(row);
    }
    Ok(TrainOutcome { snapshots, metrics })
}

/// Index of the highest score; ties go to the earliest, undefined scores rank last.
pub fn best_index(scores: &[Option<f64>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("no snapshots to select from".into()));
    }
    let key = |s: &Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if key(s) > key(&scores[best]) {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_best(snapshots: &[Snapshot]) -> Result<&Snapshot> {
    let scores: Vec<_> = snapshots.iter().map(|s| s.dev_score).collect();
    Ok(&snapshots[best_index(&scores)?])
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { learning_rate: 2e-4, warmup_steps: 1500, ..TrainConfig::squid_default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(750, &cfg) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1500, &cfg), 2e-4);
        assert_eq!(lr_schedule(90_000, &cfg), 2e-4);
    }

    #[test]
    fn presets() {
        let v = TrainConfig::preset("voicemos").unwrap();
        assert_eq!((v.batch_size, v.total_steps, v.learning_rate), (8, 10_000, 1e-5));
        let d = TrainConfig::squid_default();
        assert_eq!((d.batch_size, d.total_steps, d.warmup_steps, d.snapshot_every), (32, 100_000, 1500, 10_000));
        for name in ["squid-default", "voicemos", "desk-tiny"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("nope").is_err());
        let bad = TrainConfig { snapshot_every: 3000, ..d };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [1.5, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1);
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.37, -12.0] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, 0.01);
            // m_hat = g, v_hat = g^2
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-9);
        }
    }

    fn descend_quadratic(lr: f64, steps: u64) -> Vec<f64> {
        let mut w = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        (1..=steps)
            .map(|t| {
                let g = [2.0 * (w[0] - 3.0)];
                adam_update(&mut w, &g, &mut m, &mut v, t, lr);
                w[0]
            })
            .collect()
    }

    #[test]
    fn quadratic_matches_reference_trajectory() {
        // independent scalar simulation of the same update rule
        let reference = [
            0.4999999991666671,
            0.9955864355743387,
            1.482291869767673,
            1.9540845310988655,
            2.4030925430676287,
            2.8196007783810884,
            3.192616734924977,
            3.511222113634524,
            3.7665220156287718,
            3.953447738025442,
        ];
        let w = descend_quadratic(0.5, 10);
        for (a, b) in w.iter().zip(reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // the approach to 3 is monotone until momentum carries it past the minimum
        for k in 1..6 {
            assert!((w[k] - 3.0).abs() < (w[k - 1] - 3.0).abs());
        }
        let small = descend_quadratic(0.1, 10);
        let mut prev = 3.0;
        for x in small {
            assert!((x - 3.0).abs() < prev);
            prev = (x - 3.0).abs();
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(best_index(&[Some(0.1), Some(0.3), Some(0.2)]).unwrap(), 1);
        assert_eq!(best_index(&[Some(0.5)]).unwrap(), 0);
        assert_eq!(best_index(&[Some(0.2), Some(0.2)]).unwrap(), 0);
        assert_eq!(best_index(&[None, Some(-0.5)]).unwrap(), 1);
        assert!(best_index(&[]).is_err());
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParameters::init(&cfg, &LocaleVocab::new(["a"]), 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head_bias = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut st, &mut p, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains("head_bias"));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }
}
