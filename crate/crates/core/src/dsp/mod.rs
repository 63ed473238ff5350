//! Audio front end: WAV I/O, rational resampling, and fixed-length log-Mel
//! spectrograms.

mod cache;
mod melspec;
mod resample;
mod wav;

pub use cache::{read_spectrogram, write_spectrogram};
pub use melspec::{
    frame_count, hz_to_mel, log_mel, log_mel_frames, mel_filterbank, mel_to_hz, pad_or_truncate,
    FrontendConfig, LogMelSpectrogram,
};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(s) = self
            .samples
            .iter()
            .find(|s| !s.is_finite() || s.abs() > 1.0 + 1e-6)
        {
            return Err(Error::InvalidArgument(format!(
                "sample {s} outside [-1, 1]"
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
