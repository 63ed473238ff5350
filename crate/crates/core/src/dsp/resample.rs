//! Polyphase windowed-sinc resampling for arbitrary rational rate ratios.
//!
//! The interpolation kernel is a Kaiser-windowed sinc (beta 8.6) spanning 64
//! zero crossings of the anti-aliasing cutoff, so upsampling uses 64 input taps
//! per output phase and downsampling widens the kernel in proportion to the
//! rate ratio.

use super::Waveform;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 8.6;
const ZERO_CROSSINGS: usize = 64;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind, by power series.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

struct PolyphaseKernel {
    /// `phases[p][j]` weights input sample `base + j + 1 - taps/2` for output phase `p`.
    phases: Vec<Vec<f64>>,
    taps: usize,
}

impl PolyphaseKernel {
    fn new(up: u64, down: u64) -> Self {
        // cutoff relative to the input Nyquist
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        let taps = ((ZERO_CROSSINGS as f64 / cutoff).ceil() as usize).next_multiple_of(2);
        let half_width = taps as f64 / 2.0;
        let norm = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                (0..taps)
                    .map(|j| {
                        // distance from the output instant to the input tap, in input samples
                        let offset = j as f64 + 1.0 - half_width;
                        let tau = frac - offset;
                        let r = tau / half_width;
                        if r.abs() >= 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                        cutoff * sinc(cutoff * tau) * window
                    })
                    .collect()
            })
            .collect();
        Self { phases, taps }
    }
}

/// Resamples `w` to `target_sr`. Output length is `round(len * target_sr / sample_rate)`;
/// an equal rate returns the input unchanged.
pub fn resample(w: &Waveform, target_sr: u32) -> Result<Waveform> {
    if target_sr == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    w.validate()?;
    if w.sample_rate == target_sr {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate as u64, target_sr as u64);
    let up = target_sr as u64 / g;
    let down = w.sample_rate as u64 / g;
    let kernel = PolyphaseKernel::new(up, down);

    let n_in = w.samples.len() as u64;
    let n_out = (n_in * target_sr as u64 + w.sample_rate as u64 / 2) / w.sample_rate as u64;
    let x = &w.samples;
    let half = kernel.taps as i64 / 2;
    let samples = (0..n_out)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as i64;
            let phase = &kernel.phases[(pos % up) as usize];
            let start = base + 1 - half;
            let mut acc = 0.0f64;
            for (j, weight) in phase.iter().enumerate() {
                let k = start + j as i64;
                if k >= 0 && (k as usize) < x.len() {
                    acc += weight * x[k as usize] as f64;
                }
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_sr,
    })
}
