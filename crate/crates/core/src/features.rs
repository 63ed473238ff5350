//! Per-utterance log-Mel features, computed once and shared by training and
//! evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dsp::{log_mel, read_spectrogram, read_wav, resample, write_spectrogram, FrontendConfig, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::manifest::Manifest;

#[derive(Debug, Clone)]
pub struct FeatureStore {
    frontend: FrontendConfig,
    specs: HashMap<String, Arc<LogMelSpectrogram>>,
}

impl FeatureStore {
    pub fn new(frontend: FrontendConfig) -> Self {
        Self {
            frontend,
            specs: HashMap::new(),
        }
    }

    pub fn frontend(&self) -> &FrontendConfig {
        &self.frontend
    }

    pub fn insert(&mut self, utterance_id: impl Into<String>, spec: LogMelSpectrogram) -> Result<()> {
        if spec.n_mels != self.frontend.n_mels || spec.t_max() != self.frontend.t_max {
            return Err(Error::Shape(format!(
                "features are {}x{}, store expects {}x{}",
                spec.t_max(),
                spec.n_mels,
                self.frontend.t_max,
                self.frontend.n_mels
            )));
        }
        self.specs.insert(utterance_id.into(), Arc::new(spec));
        Ok(())
    }

    pub fn get(&self, utterance_id: &str) -> Result<&LogMelSpectrogram> {
        self.specs
            .get(utterance_id)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("no features for utterance {utterance_id}")))
    }

    pub fn contains(&self, utterance_id: &str) -> bool {
        self.specs.contains_key(utterance_id)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Reads, resamples and featurizes every record not already present.
    /// Relative audio paths resolve against `audio_root`. With `cache_dir`,
    /// features are stored on disk under a directory keyed by the front-end
    /// settings and reused on later calls. Entries are keyed by utterance id
    /// and audio content, so one cache can serve several datasets.
    pub fn load(
        &mut self,
        manifest: &Manifest,
        audio_root: &Path,
        cache_dir: Option<&Path>,
    ) -> Result<()> {
        let cache = match cache_dir {
            Some(dir) => {
                let dir = dir.join(format!("{:016x}", frontend_key(&self.frontend)));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                Some(dir)
            }
            None => None,
        };
        let todo: Vec<_> = manifest
            .records()
            .iter()
            .filter(|r| !self.specs.contains_key(&r.utterance_id))
            .collect();
        let frontend = &self.frontend;
        let computed: Vec<(String, LogMelSpectrogram)> = todo
            .par_iter()
            .map(|r| {
                let audio = resolve(audio_root, &r.audio_path);
                let spec = match &cache {
                    Some(dir) => {
                        let bytes = std::fs::read(&audio).map_err(|e| Error::io(&audio, e))?;
                        let path = dir.join(format!("{}-{:016x}.sqms", r.utterance_id, fnv1a(&bytes)));
                        if path.exists() {
                            read_spectrogram(&path)?
                        } else {
                            let s = extract(&audio, frontend)?;
                            write_spectrogram(&path, &s)?;
                            s
                        }
                    }
                    None => extract(&audio, frontend)?,
                };
                Ok((r.utterance_id.clone(), spec))
            })
            .collect::<Result<_>>()?;
        for (id, spec) in computed {
            self.insert(id, spec)?;
        }
        Ok(())
    }
}

fn resolve(root: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// WAV file to padded log-Mel features at the front end's sample rate.
pub fn extract(path: &Path, frontend: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let w = read_wav(path)?;
    let w = resample(&w, frontend.target_sr)?;
    log_mel(&w, frontend)
}

/// FNV-1a over the serialized front-end settings.
fn frontend_key(cfg: &FrontendConfig) -> u64 {
    let text = serde_json::to_string(cfg).expect("front-end config serializes");
    fnv1a(text.as_bytes())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
