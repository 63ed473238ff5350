//! On-disk spectrogram cache: `SQMS` magic, then `t`, `n_mels` and mask length
//! as little-endian u32, one mask byte per frame, then `t * n_mels`
//! little-endian f32 values.

use std::fs;
use std::path::Path;

use super::LogMelSpectrogram;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQMS";

pub fn write_spectrogram(path: &Path, s: &LogMelSpectrogram) -> Result<()> {
    let t = s.t_max();
    let mut buf = Vec::with_capacity(16 + t + s.frames.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [t as u32, s.n_mels as u32, s.mask.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(s.mask.iter().map(|m| *m as u8));
    for v in &s.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_spectrogram(path: &Path) -> Result<LogMelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::InvalidArgument(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a spectrogram cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, n_mels, mask_len) = (word(0), word(1), word(2));
    if mask_len != t || bytes.len() != 16 + mask_len + 4 * t * n_mels {
        return Err(corrupt("inconsistent header"));
    }
    let mask = bytes[16..16 + mask_len].iter().map(|b| *b != 0).collect();
    let frames = bytes[16 + mask_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let s = LogMelSpectrogram {
        n_mels,
        frames,
        mask,
    };
    s.validate()?;
    Ok(s)
}
