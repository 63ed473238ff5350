use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub target_sr: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub t_max: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            target_sr: 16000,
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-10,
            t_max: 3200,
        }
    }
}

impl FrontendConfig {
    /// Desk-scale default: identical framing with a 512-frame (5.12 s) capacity.
    pub fn desk() -> Self {
        Self {
            t_max: 512,
            ..Self::default()
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.target_sr as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.target_sr as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("frontend: {m}")));
        if self.target_sr == 0 || self.n_mels == 0 || self.t_max == 0 {
            return bad("target_sr, n_mels and t_max must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.target_sr as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= target_sr/2, got {} / {}",
                self.f_min, self.f_max
            ));
        }
        if self.hop_samples() == 0 || self.window_samples() < self.hop_samples() {
            return bad("window must be at least one hop and hop must be positive".into());
        }
        if self.fft_size < self.window_samples() {
            return bad("fft_size must cover the analysis window".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// Fixed-length log-Mel features, `t_max` rows of `n_mels`, with a validity mask.
/// Valid rows precede padding rows, and padding rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_mels: usize,
    pub frames: Vec<f32>,
    pub mask: Vec<bool>,
}

impl LogMelSpectrogram {
    pub fn t_max(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Checks the prefix-mask and zero-padding invariants.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.mask.len() * self.n_mels {
            return Err(Error::Shape(format!(
                "{} values for {} x {} spectrogram",
                self.frames.len(),
                self.mask.len(),
                self.n_mels
            )));
        }
        let valid = self.valid_frames();
        if self.mask[valid..].iter().any(|m| *m) {
            return Err(Error::Shape("valid frames must precede padding".into()));
        }
        if (valid..self.t_max()).any(|t| self.row(t).iter().any(|v| *v != 0.0)) {
            return Err(Error::Shape("padding rows must be zero".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over the `fft_size/2 + 1` power bins,
/// returned as `n_mels` rows. Also returns the filter center frequencies.
pub fn mel_filterbank(cfg: &FrontendConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_bins = cfg.fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.target_sr as f64 / cfg.fft_size as f64;
    let filters = (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect();
    (filters, edges[1..=cfg.n_mels].to_vec())
}

/// Frames before padding: `1 + floor((n - window) / hop)`, at least 1.
pub fn frame_count(n_samples: usize, cfg: &FrontendConfig) -> usize {
    let win = cfg.window_samples();
    if n_samples <= win {
        1
    } else {
        1 + (n_samples - win) / cfg.hop_samples()
    }
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl Analyzer {
    fn new(cfg: &FrontendConfig) -> Self {
        let win = cfg.window_samples();
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
            window,
            filters: mel_filterbank(cfg).0,
        }
    }
}

/// Unpadded log-Mel frames, row-major `frames x n_mels`.
pub fn log_mel_frames(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    w.validate()?;
    if w.sample_rate != cfg.target_sr {
        return Err(Error::InvalidArgument(format!(
            "waveform at {} Hz, front end expects {} Hz",
            w.sample_rate, cfg.target_sr
        )));
    }
    let analyzer = Analyzer::new(cfg);
    let hop = cfg.hop_samples();
    let n_frames = frame_count(w.samples.len(), cfg);
    let floor = cfg.log_floor;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0f64; cfg.fft_size / 2 + 1];
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, wv) in analyzer.window.iter().enumerate() {
            let s = w.samples.get(start + i).copied().unwrap_or(0.0) as f64;
            buf[i].re = s * wv;
        }
        analyzer.fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        out.push(
            analyzer
                .filters
                .iter()
                .map(|filt| {
                    let energy: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                    energy.max(floor).ln() as f32
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Log-Mel spectrogram padded or truncated to `cfg.t_max` frames.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let frames = log_mel_frames(w, cfg)?;
    pad_or_truncate(&frames, cfg.t_max)
}

/// Zero-pads (mask false) or truncates from the end to exactly `t_max` rows.
pub fn pad_or_truncate(frames: &[Vec<f32>], t_max: usize) -> Result<LogMelSpectrogram> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be at least 1".into()));
    }
    let n_mels = frames
        .first()
        .map(|r| r.len())
        .ok_or_else(|| Error::InvalidArgument("spectrogram needs at least one frame".into()))?;
    if frames.iter().any(|r| r.len() != n_mels) {
        return Err(Error::Shape("ragged spectrogram rows".into()));
    }
    let keep = frames.len().min(t_max);
    let mut data = vec![0.0f32; t_max * n_mels];
    for (t, row) in frames.iter().take(keep).enumerate() {
        data[t * n_mels..(t + 1) * n_mels].copy_from_slice(row);
    }
    let mask = (0..t_max).map(|t| t < keep).collect();
    Ok(LogMelSpectrogram {
        n_mels,
        frames: data,
        mask,
    })
}
