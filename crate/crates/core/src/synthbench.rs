//! Controllable multilingual MOS benchmark.
//!
//! Each synthetic locale has its own carrier voice (pitch, formant timbre,
//! syllable rate). Utterances are degraded along shared artifact axes with a
//! hidden severity, and ratings are a noisy, grid-snapped linear function of
//! that severity. Because severity, not locale, drives the ratings, a model
//! that learns artifacts in one locale can rank utterances in another.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, RatingRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactAxis {
    AdditiveNoise,
    Discontinuity,
    FlatProsody,
    Robotize,
}

impl ArtifactAxis {
    pub const ALL: [ArtifactAxis; 4] = [
        ArtifactAxis::AdditiveNoise,
        ArtifactAxis::Discontinuity,
        ArtifactAxis::FlatProsody,
        ArtifactAxis::Robotize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Carrier {
    pub base_pitch_hz: f64,
    pub formants_hz: Vec<f64>,
    pub syllable_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLocaleSpec {
    pub locale: String,
    pub carrier: Carrier,
    /// Per-axis weights, non-negative and summing to one.
    pub artifact_axes: BTreeMap<ArtifactAxis, f64>,
    /// Overrides [`SynthConfig::utterances_per_locale`] for this locale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterances: Option<usize>,
}

impl SynthLocaleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("locale {}: {m}", self.locale)));
        let c = &self.carrier;
        if !(80.0..=400.0).contains(&c.base_pitch_hz) {
            return bad(format!("base pitch {} Hz outside [80, 400]", c.base_pitch_hz));
        }
        if c.formants_hz.is_empty() || c.formants_hz.iter().any(|f| !(*f > 0.0)) {
            return bad("formant centers must be positive and non-empty".into());
        }
        if !(c.syllable_rate_hz > 0.0) {
            return bad(format!("syllable rate {} must be positive", c.syllable_rate_hz));
        }
        if self.artifact_axes.is_empty() {
            return bad("at least one artifact axis is required".into());
        }
        if self.artifact_axes.values().any(|w| !(*w >= 0.0)) {
            return bad("artifact weights must be non-negative".into());
        }
        let total: f64 = self.artifact_axes.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("artifact weights sum to {total}, not 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub locales: Vec<SynthLocaleSpec>,
    pub utterances_per_locale: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Severity is drawn uniformly from `[severity_low, severity_high]`.
    pub severity_low: f64,
    pub severity_high: f64,
    /// Rater noise, in rating points.
    pub annotator_sigma: f64,
    /// Mean raters per utterance; each utterance gets `1 + Poisson(mean - 1)`.
    pub mean_raters: f64,
    pub sample_rate: u32,
    pub time_start: DateTime<Utc>,
    pub time_end: DateTime<Utc>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            locales: default_locales(2),
            utterances_per_locale: 50,
            min_duration_s: 2.0,
            max_duration_s: 6.0,
            severity_low: 0.0,
            severity_high: 1.0,
            annotator_sigma: 0.5,
            mean_raters: 1.4,
            sample_rate: 16_000,
            time_start: "2021-01-01T00:00:00Z".parse().expect("valid literal"),
            time_end: "2022-03-01T00:00:00Z".parse().expect("valid literal"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.locales.is_empty() {
            return Err(Error::Config("synth.locales is empty".into()));
        }
        for l in &self.locales {
            l.validate()?;
        }
        if !(self.annotator_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "synth.annotator_sigma must be >= 0, got {}",
                self.annotator_sigma
            )));
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::Config(format!(
                "synth duration range [{}, {}] is invalid",
                self.min_duration_s, self.max_duration_s
            )));
        }
        if !(0.0 <= self.severity_low && self.severity_low <= self.severity_high && self.severity_high <= 1.0) {
            return Err(Error::Config("synth severity range must lie within [0, 1]".into()));
        }
        if !(self.mean_raters >= 1.0) {
            return Err(Error::Config(format!("synth.mean_raters must be >= 1, got {}", self.mean_raters)));
        }
        if self.sample_rate < 8000 {
            return Err(Error::Config(format!("synth.sample_rate {} is below 8000", self.sample_rate)));
        }
        if self.time_end <= self.time_start {
            return Err(Error::Config("synth.time_end must follow time_start".into()));
        }
        Ok(())
    }
}

const LOCALE_POOL: [&str; 16] = [
    "en-US", "fr-FR", "de-DE", "es-ES", "it-IT", "ja-JP", "ko-KR", "pt-BR", "hi-IN", "sw-KE", "tr-TR", "vi-VN",
    "pl-PL", "nl-NL", "th-TH", "ar-EG",
];

/// `n` locales (at most 16) with distinct carriers and the same evenly weighted
/// artifact axes.
pub fn default_locales(n: usize) -> Vec<SynthLocaleSpec> {
    let axes: BTreeMap<ArtifactAxis, f64> = ArtifactAxis::ALL.iter().map(|a| (*a, 0.25)).collect();
    (0..n.min(LOCALE_POOL.len()))
        .map(|i| {
            let k = i as f64;
            SynthLocaleSpec {
                locale: LOCALE_POOL[i].to_string(),
                carrier: Carrier {
                    // golden-ratio stepping spreads carriers without collisions
                    base_pitch_hz: 90.0 + ((k * 0.618_034).fract() * 200.0).round(),
                    formants_hz: vec![
                        450.0 + ((k * 0.381_966).fract() * 400.0).round(),
                        1100.0 + ((k * 0.754_877).fract() * 900.0).round(),
                        2300.0 + ((k * 0.569_840).fract() * 900.0).round(),
                    ],
                    syllable_rate_hz: 3.0 + (k * 0.723_607).fract() * 3.0,
                },
                artifact_axes: axes.clone(),
                utterances: None,
            }
        })
        .collect()
}

/// Everything needed to re-render a clean utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub n_samples: usize,
    pub sample_rate: u32,
    pub base_pitch_hz: f64,
    pub formants_hz: Vec<f64>,
    pub syllable_rate_hz: f64,
    /// Relative pitch-modulation depth.
    pub prosody_depth: f64,
    pub prosody_rates: [f64; 2],
    pub phases: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanUtterance {
    pub waveform: Waveform,
    pub params: RenderParams,
}

const PROSODY_DEPTH: f64 = 0.15;
const FORMANT_BW_HZ: f64 = 130.0;
const PEAK: f64 = 0.5;
const BLOCK: usize = 64;

fn render(p: &RenderParams) -> Vec<f32> {
    let sr = p.sample_rate as f64;
    let dur = p.n_samples as f64 / sr;
    let top = (sr / 2.0 - 200.0).min(7000.0);
    let envelope = |f: f64| {
        p.formants_hz
            .iter()
            .enumerate()
            .map(|(i, c)| (-0.5 * ((f - c) / FORMANT_BW_HZ).powi(2)).exp() / ((i + 1) as f64).sqrt())
            .sum::<f64>()
            + 0.01
    };
    let f0_at = |t: f64| {
        let m = 0.6 * (2.0 * PI * p.prosody_rates[0] * t + p.phases[0]).sin()
            + 0.3 * (2.0 * PI * p.prosody_rates[1] * t + p.phases[1]).sin()
            - 0.5 * (t / dur - 0.5);
        p.base_pitch_hz * (1.0 + p.prosody_depth * m)
    };
    let mut out = vec![0.0f64; p.n_samples];
    let mut phase = 0.0f64;
    let mut amps: Vec<f64> = Vec::new();
    for (b, chunk) in out.chunks_mut(BLOCK).enumerate() {
        let t_mid = ((b * BLOCK) as f64 + BLOCK as f64 / 2.0) / sr;
        let f0 = f0_at(t_mid);
        let n_harm = (top / f0).floor() as usize;
        amps.clear();
        amps.extend((1..=n_harm).map(|k| envelope(k as f64 * f0)));
        for (i, y) in chunk.iter_mut().enumerate() {
            let t = (b * BLOCK + i) as f64 / sr;
            phase = (phase + 2.0 * PI * f0_at(t) / sr) % (2.0 * PI);
            let s: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
            let syll = 0.5 * (1.0 - (2.0 * PI * p.syllable_rate_hz * t + p.phases[2]).cos());
            *y = s * (0.08 + 0.92 * syll);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 0.0 { PEAK / peak } else { 0.0 };
    out.iter().map(|v| (v * g) as f32).collect()
}

/// Harmonic source shaped by the carrier's formants, with syllable-rate
/// amplitude modulation and a moving pitch contour.
pub fn gen_clean<R: Rng + ?Sized>(
    spec: &SynthLocaleSpec,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<CleanUtterance> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} must be positive")));
    }
    let n_samples = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let params = RenderParams {
        n_samples,
        sample_rate,
        base_pitch_hz: spec.carrier.base_pitch_hz * rng.random_range(0.9..1.1),
        formants_hz: spec.carrier.formants_hz.clone(),
        syllable_rate_hz: spec.carrier.syllable_rate_hz * rng.random_range(0.9..1.1),
        prosody_depth: PROSODY_DEPTH,
        prosody_rates: [rng.random_range(0.5..1.0), rng.random_range(1.5..2.5)],
        phases: [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ],
    };
    let waveform = Waveform::new(render(&params), sample_rate)?;
    Ok(CleanUtterance { waveform, params })
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64
}

/// Length of each discontinuity gap.
pub const GAP_MS: f64 = 20.0;

/// Applies each axis at severity `severity * weight / max_weight`, so the
/// dominant axis sees the full severity. Severity 0 returns the clean
/// waveform untouched.
pub fn degrade<R: Rng + ?Sized>(
    clean: &CleanUtterance,
    axes: &BTreeMap<ArtifactAxis, f64>,
    severity: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside [0, 1]")));
    }
    apply_levels(clean, &axis_levels(axes, severity), rng)
}

/// Per-axis degradation levels for an utterance of the given severity.
pub fn axis_levels(axes: &BTreeMap<ArtifactAxis, f64>, severity: f64) -> BTreeMap<ArtifactAxis, f64> {
    let max_w = axes.values().copied().fold(0.0, f64::max);
    axes.iter()
        .map(|(a, w)| (*a, if max_w > 0.0 { w / max_w * severity } else { 0.0 }))
        .collect()
}

/// Applies each axis at its level in `[0, 1]`; all-zero levels return the
/// clean waveform untouched.
pub fn apply_levels<R: Rng + ?Sized>(
    clean: &CleanUtterance,
    levels: &BTreeMap<ArtifactAxis, f64>,
    rng: &mut R,
) -> Result<Waveform> {
    let level = |a: ArtifactAxis| levels.get(&a).copied().unwrap_or(0.0).clamp(0.0, 1.0);
    let sr = clean.params.sample_rate;
    let mut x = match level(ArtifactAxis::FlatProsody) {
        s if s > 0.0 => render(&RenderParams {
            prosody_depth: clean.params.prosody_depth * (1.0 - s),
            ..clean.params.clone()
        }),
        _ => clean.waveform.samples.clone(),
    };
    let s = level(ArtifactAxis::Robotize);
    if s > 0.0 {
        x = flatten_envelope(&x, s);
    }
    let s = level(ArtifactAxis::Discontinuity);
    let gaps = (s * 10.0).round() as usize;
    if gaps > 0 {
        insert_gaps(&mut x, gaps, (GAP_MS * sr as f64 / 1000.0).round() as usize, rng);
    }
    let s = level(ArtifactAxis::AdditiveNoise);
    if s > 0.0 {
        let snr_db = 40.0 * (1.0 - s);
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let (ps, pn) = (power(&x), power(&noise));
        if pn > 0.0 {
            let g = (ps / pn / 10f64.powf(snr_db / 10.0)).sqrt() as f32;
            x.iter_mut().zip(&noise).for_each(|(v, n)| *v += g * n);
        }
    }
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Waveform::new(x, sr)
}

/// One zero gap per equal segment, kept clear of the segment edges so gaps
/// never touch.
fn insert_gaps<R: Rng + ?Sized>(x: &mut [f32], count: usize, gap: usize, rng: &mut R) {
    let seg = x.len() / count;
    let margin = gap / 2;
    for k in 0..count {
        let lo = k * seg + margin;
        let hi = (k + 1) * seg;
        if hi < lo + gap + margin {
            log::warn!("utterance too short for {count} gaps");
            return;
        }
        let start = rng.random_range(lo..=hi - gap - margin);
        x[start..start + gap].fill(0.0);
    }
}

const STFT_N: usize = 512;
const STFT_HOP: usize = 128;
const SMOOTH_BINS: usize = 6;

/// Divides each frame's spectrum by its smoothed magnitude envelope raised to
/// `s` (s = 1 whitens the timbre completely), then restores the input power.
fn flatten_envelope(x: &[f32], s: f64) -> Vec<f32> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(STFT_N);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(STFT_N);
    let window: Vec<f64> = (0..STFT_N).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / STFT_N as f64).cos()).collect();
    let pad = STFT_N;
    let total = x.len() + 2 * pad;
    let mut out = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_N];
    let sample = |i: usize| -> f64 {
        if i >= pad && i - pad < x.len() {
            x[i - pad] as f64
        } else {
            0.0
        }
    };
    let half = STFT_N / 2;
    let mut start = 0;
    while start + STFT_N <= total {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(sample(start + i) * window[i], 0.0);
        }
        fwd.process(&mut buf);
        let mags: Vec<f64> = buf[..=half].iter().map(|c| c.norm()).collect();
        let env: Vec<f64> = (0..=half)
            .map(|k| {
                let lo = k.saturating_sub(SMOOTH_BINS);
                let hi = (k + SMOOTH_BINS).min(half);
                mags[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64 + 1e-9
            })
            .collect();
        let log_mean = env.iter().map(|e| e.ln()).sum::<f64>() / env.len() as f64;
        for k in 0..=half {
            let g = (s * (log_mean - env[k].ln())).exp();
            buf[k] *= g;
            if k != 0 && k != half {
                buf[STFT_N - k] = buf[k].conj();
            }
        }
        inv.process(&mut buf);
        for i in 0..STFT_N {
            out[start + i] += buf[i].re / STFT_N as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
        start += STFT_HOP;
    }
    let y: Vec<f64> = (0..x.len())
        .map(|i| {
            let n = norm[i + pad];
            if n > 1e-9 {
                out[i + pad] / n
            } else {
                0.0
            }
        })
        .collect();
    let pin = power(x);
    let pout = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
    let g = if pout > 0.0 { (pin / pout).sqrt() } else { 0.0 };
    y.iter().map(|v| (v * g) as f32).collect()
}

/// Ratings on the 0.5-step grid: `clamp(5 - 4 s + N(0, sigma), 1, 5)`.
pub fn rate<R: Rng + ?Sized>(severity: f64, sigma: f64, raters: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside [0, 1]")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("rater noise: {e}")))?;
    Ok((0..raters)
        .map(|_| {
            let r = (5.0 - 4.0 * severity + noise.sample(rng)).clamp(1.0, 5.0);
            (r * 2.0).round() / 2.0
        })
        .collect())
}

/// `1 + Poisson(mean - 1)` raters.
pub fn draw_raters<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    let extra = mean - 1.0;
    if extra <= 0.0 {
        return 1;
    }
    let p = Poisson::new(extra).expect("positive rate");
    1 + p.sample(rng) as usize
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Ground-truth severity per utterance id.
    pub severity: BTreeMap<String, f64>,
}

/// SplitMix64 finalizer, used to derive independent per-utterance seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Generated {
    record: RatingRecord,
    severity: f64,
    wav: Waveform,
}

fn gen_one(cfg: &SynthConfig, spec: &SynthLocaleSpec, li: usize, ui: usize) -> Result<Generated> {
    let seed = mix_seed(mix_seed(cfg.seed ^ mix_seed(li as u64)) ^ ui as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
    let severity = rng.random_range(cfg.severity_low..=cfg.severity_high);
    let clean = gen_clean(spec, duration, cfg.sample_rate, &mut rng)?;
    let levels = axis_levels(&spec.artifact_axes, severity);
    let wav = apply_levels(&clean, &levels, &mut rng)?;
    let raters = draw_raters(cfg.mean_raters, &mut rng);
    let ratings = rate(severity, cfg.annotator_sigma, raters, &mut rng)?;
    let span = (cfg.time_end - cfg.time_start).num_seconds();
    let timestamp = cfg.time_start + Duration::seconds(rng.random_range(0..span));
    let id = format!("{}-{ui:05}", spec.locale);
    Ok(Generated {
        record: RatingRecord {
            audio_path: format!("wav/{id}.wav"),
            utterance_id: id,
            locale: spec.locale.clone(),
            ratings,
            system_id: format!("synth-{}", ui % 4),
            project_id: "synthbench".into(),
            timestamp,
        },
        severity,
        wav,
    })
}

/// Writes `manifest.jsonl`, `wav/` and `severity.csv` under `out`.
/// Utterances are generated in parallel from per-utterance seeds, so the
/// output does not depend on the worker count.
pub fn gen_dataset(cfg: &SynthConfig, out: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let wav_dir = out.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let jobs: Vec<(usize, usize)> = cfg
        .locales
        .iter()
        .enumerate()
        .flat_map(|(li, l)| (0..l.utterances.unwrap_or(cfg.utterances_per_locale)).map(move |ui| (li, ui)))
        .collect();
    let generated: Vec<Generated> = jobs
        .par_iter()
        .map(|&(li, ui)| {
            let g = gen_one(cfg, &cfg.locales[li], li, ui)?;
            write_wav(&out.join(&g.record.audio_path), &g.wav)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut severity = BTreeMap::new();
    let mut records = Vec::with_capacity(generated.len());
    for g in generated {
        severity.insert(g.record.utterance_id.clone(), g.severity);
        records.push(g.record);
    }
    let manifest = Manifest::new(records)?;
    manifest.write_jsonl(&out.join("manifest.jsonl"))?;
    let sev_path = out.join("severity.csv");
    let mut w = csv::Writer::from_path(&sev_path).map_err(|e| Error::io(&sev_path, e.into()))?;
    w.write_record(["utterance_id", "severity"]).map_err(|e| Error::io(&sev_path, e.into()))?;
    for r in manifest.records() {
        w.write_record([r.utterance_id.clone(), severity[&r.utterance_id].to_string()])
            .map_err(|e| Error::io(&sev_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&sev_path, e))?;
    Ok(GeneratedDataset {
        dir: out.to_path_buf(),
        manifest,
        severity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{aggregate_target, load_manifest};
    use rustfft::FftPlanner;

    fn spec() -> SynthLocaleSpec {
        default_locales(3).remove(1)
    }

    fn only(axis: ArtifactAxis) -> BTreeMap<ArtifactAxis, f64> {
        BTreeMap::from([(axis, 1.0)])
    }

    fn clean(seed: u64, dur: f64) -> CleanUtterance {
        gen_clean(&spec(), dur, 16_000, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn clean_length_bounds_and_determinism() {
        let a = clean(1, 1.0);
        assert_eq!(a.waveform.samples.len(), 16_000);
        assert!(a.waveform.samples.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a, clean(1, 1.0));
        assert_ne!(a.waveform, clean(2, 1.0).waveform);
    }

    #[test]
    fn spectrum_peaks_near_formants() {
        let c = clean(3, 1.0);
        let n = c.waveform.samples.len();
        let mut buf: Vec<Complex<f64>> = c.waveform.samples.iter().map(|v| Complex::new(*v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let hz = |k: usize| k as f64 * 16_000.0 / n as f64;
        let formants = &c.params.formants_hz;
        let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0, 0.0, 0);
        for (k, v) in buf[..n / 2].iter().enumerate() {
            let f = hz(k);
            let d = formants.iter().map(|c| (f - c).abs()).fold(f64::INFINITY, f64::min);
            if d < 150.0 {
                near += v.norm_sqr();
                n_near += 1;
            } else if d > 600.0 {
                far += v.norm_sqr();
                n_far += 1;
            }
        }
        let ratio = (near / n_near as f64) / (far / n_far as f64);
        assert!(ratio > 20.0, "formant band density only {ratio:.2}x the rest");
    }

    #[test]
    fn zero_severity_is_identity() {
        let c = clean(4, 0.5);
        let axes = spec().artifact_axes;
        let out = degrade(&c, &axes, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, c.waveform);
    }

    #[test]
    fn full_noise_is_zero_db() {
        let c = clean(5, 1.0);
        let noisy = degrade(&c, &only(ArtifactAxis::AdditiveNoise), 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // the output may be rescaled to fit [-1, 1]; undo that using the clean signal
        let num: f64 = noisy.samples.iter().zip(&c.waveform.samples).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let g = num / c.waveform.samples.iter().map(|b| (*b as f64).powi(2)).sum::<f64>();
        let residual: Vec<f32> = noisy.samples.iter().zip(&c.waveform.samples).map(|(a, b)| a - (g as f32) * b).collect();
        let snr = 10.0 * (power(&c.waveform.samples) * g * g / power(&residual)).log10();
        assert!(snr.abs() < 1.0, "snr {snr:.3} dB");
    }

    fn zero_runs(x: &[f32], min_len: usize) -> usize {
        let mut runs = 0;
        let mut len = 0;
        for v in x.iter().chain(std::iter::once(&1.0)) {
            if *v == 0.0 {
                len += 1;
            } else {
                if len >= min_len {
                    runs += 1;
                }
                len = 0;
            }
        }
        runs
    }

    #[test]
    fn full_discontinuity_has_ten_gaps() {
        for seed in 0..5 {
            let c = clean(6 + seed, 2.0);
            assert_eq!(zero_runs(&c.waveform.samples, 320), 0);
            let out = degrade(&c, &only(ArtifactAxis::Discontinuity), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(zero_runs(&out.samples, 320), 10);
            let half = degrade(&c, &only(ArtifactAxis::Discontinuity), 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(zero_runs(&half.samples, 320), 5);
        }
    }

    #[test]
    fn flat_prosody_and_robotize_change_signal_boundedly() {
        let c = clean(9, 1.0);
        for axis in [ArtifactAxis::FlatProsody, ArtifactAxis::Robotize] {
            let out = degrade(&c, &only(axis), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(out.samples.len(), c.waveform.samples.len());
            assert_ne!(out, c.waveform, "{axis:?}");
            assert!(out.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn robotize_at_zero_strength_reconstructs() {
        let c = clean(10, 0.5);
        let y = flatten_envelope(&c.waveform.samples, 0.0);
        let err = y.iter().zip(&c.waveform.samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rating_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rate(0.0, 0.0, 3, &mut rng).unwrap(), vec![5.0; 3]);
        assert_eq!(rate(1.0, 0.0, 2, &mut rng).unwrap(), vec![1.0; 2]);
        assert_eq!(rate(0.5, 0.0, 1, &mut rng).unwrap(), vec![3.0]);
        for r in rate(0.3, 2.0, 1000, &mut rng).unwrap() {
            assert!(crate::manifest::on_rating_grid(r));
        }
        assert!(rate(1.5, 0.0, 1, &mut rng).is_err());
    }

    #[test]
    fn expected_target_falls_with_severity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut prev = f64::INFINITY;
        for b in 0..5 {
            let s = 0.1 + 0.2 * b as f64;
            let mean = (0..1000).map(|_| rate(s, 0.7, 1, &mut rng).unwrap()[0]).sum::<f64>() / 1000.0;
            assert!(mean < prev, "bucket {b}: {mean} >= {prev}");
            prev = mean;
        }
    }

    #[test]
    fn rater_count_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean = (0..20_000).map(|_| draw_raters(1.4, &mut rng)).sum::<usize>() as f64 / 20_000.0;
        assert!((mean - 1.4).abs() < 0.14);
        assert_eq!(draw_raters(1.0, &mut rng), 1);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SynthConfig::default();
        cfg.annotator_sigma = -0.1;
        assert!(cfg.validate().unwrap_err().to_string().contains("annotator_sigma"));
        let mut s = spec();
        s.carrier.base_pitch_hz = 50.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.artifact_axes.insert(ArtifactAxis::Robotize, 0.9);
        assert!(s.validate().is_err());
        s.artifact_axes.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let cfg = SynthConfig {
            utterances_per_locale: 10,
            min_duration_s: 0.3,
            max_duration_s: 0.5,
            seed: 5,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let d = gen_dataset(&cfg, a.path()).unwrap();
        gen_dataset(&cfg, b.path()).unwrap();
        assert_eq!(d.manifest.len(), 20);
        assert_eq!(std::fs::read_dir(a.path().join("wav")).unwrap().count(), 20);
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&a.path().join("manifest.jsonl")), read(&b.path().join("manifest.jsonl")));
        assert_eq!(read(&a.path().join("severity.csv")), read(&b.path().join("severity.csv")));
        let loaded = load_manifest(&a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, d.manifest);
        for r in loaded.records() {
            let w = crate::dsp::read_wav(&a.path().join(&r.audio_path)).unwrap();
            crate::dsp::log_mel(&w, &crate::dsp::FrontendConfig::desk()).unwrap();
            assert!(d.severity.contains_key(&r.utterance_id));
            assert!((0.0..=1.0).contains(&aggregate_target(r)));
        }
    }

    #[test]
    fn levels_scale_by_the_dominant_weight() {
        let axes = BTreeMap::from([(ArtifactAxis::AdditiveNoise, 0.5), (ArtifactAxis::Robotize, 0.25), (ArtifactAxis::FlatProsody, 0.25)]);
        let l = axis_levels(&axes, 0.8);
        assert_eq!(l[&ArtifactAxis::AdditiveNoise], 0.8);
        assert_eq!(l[&ArtifactAxis::Robotize], 0.4);
        let even: BTreeMap<_, _> = ArtifactAxis::ALL.iter().map(|a| (*a, 0.25)).collect();
        assert!(axis_levels(&even, 1.0).values().all(|v| *v == 1.0));
    }
}
