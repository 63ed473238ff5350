//! Temperature-rebalanced locale sampling and wildcard-locale substitution.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{aggregate_target, Manifest};
use crate::model::ANY_LOC;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub anyloc_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            anyloc_fraction: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 1.0) {
            return Err(Error::Config(format!(
                "sampler.temperature must be >= 1, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.anyloc_fraction) {
            return Err(Error::Config(format!(
                "sampler.anyloc_fraction must lie in [0, 1], got {}",
                self.anyloc_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sampler.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Sampling probability per locale, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LocaleDistribution {
    probs: BTreeMap<String, f64>,
}

impl LocaleDistribution {
    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn get(&self, locale: &str) -> Option<f64> {
        self.probs.get(locale).copied()
    }
}

/// `q_l = p_l^(1/tau) / sum_k p_k^(1/tau)`.
pub fn temperature_probs(natural: &BTreeMap<String, f64>, tau: f64) -> Result<LocaleDistribution> {
    if !(tau >= 1.0) {
        return Err(Error::InvalidArgument(format!("temperature must be >= 1, got {tau}")));
    }
    if natural.is_empty() {
        return Err(Error::Empty("no locales to sample".into()));
    }
    if let Some((l, p)) = natural.iter().find(|(_, p)| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "locale {l} has non-positive probability {p}"
        )));
    }
    let total: f64 = natural.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "natural frequencies sum to {total}, not 1"
        )));
    }
    let scaled: BTreeMap<String, f64> = natural
        .iter()
        .map(|(l, p)| (l.clone(), p.powf(1.0 / tau)))
        .collect();
    let z: f64 = scaled.values().sum();
    Ok(LocaleDistribution {
        probs: scaled.into_iter().map(|(l, q)| (l, q / z)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// Index into the manifest the batch was drawn from.
    pub record: usize,
    pub utterance_id: String,
    /// Locale fed to the embedding; either the record's locale or [`ANY_LOC`].
    pub locale_for_embedding: String,
    pub target: f64,
}

/// Draws batches: each slot picks a locale from the distribution, then an
/// utterance uniformly within it, with replacement.
pub struct BatchSampler<'a> {
    manifest: &'a Manifest,
    locales: Vec<(&'a str, &'a [usize])>,
    weights: WeightedIndex<f64>,
    batch_size: usize,
    anyloc_fraction: f64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(manifest: &'a Manifest, dist: &LocaleDistribution, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut locales = Vec::with_capacity(dist.probs.len());
        let mut weights = Vec::with_capacity(dist.probs.len());
        for (locale, q) in &dist.probs {
            let (key, idx) = manifest
                .locale_index()
                .get_key_value(locale.as_str())
                .filter(|(_, idx)| !idx.is_empty())
                .ok_or_else(|| Error::Empty(format!("locale {locale} has no training records")))?;
            locales.push((key.as_str(), idx.as_slice()));
            weights.push(*q);
        }
        let weights = WeightedIndex::new(weights)
            .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
        Ok(Self {
            manifest,
            locales,
            weights,
            batch_size: cfg.batch_size,
            anyloc_fraction: cfg.anyloc_fraction,
        })
    }

    /// One batch of exactly `batch_size` items with true locale tags.
    pub fn next_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<BatchItem> {
        (0..self.batch_size)
            .map(|_| {
                let (locale, idx) = self.locales[self.weights.sample(rng)];
                let record = idx[rng.random_range(0..idx.len())];
                let r = &self.manifest.records()[record];
                BatchItem {
                    record,
                    utterance_id: r.utterance_id.clone(),
                    locale_for_embedding: locale.to_string(),
                    target: aggregate_target(r),
                }
            })
            .collect()
    }

    /// A batch with wildcard substitution applied.
    pub fn next_training_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<BatchItem> {
        let batch = self.next_batch(rng);
        apply_anyloc(batch, self.anyloc_fraction, rng)
    }
}

/// Convenience wrapper over [`BatchSampler`] for a single batch.
pub fn next_batch<R: Rng + ?Sized>(
    train: &Manifest,
    dist: &LocaleDistribution,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    Ok(BatchSampler::new(train, dist, cfg)?.next_batch(rng))
}

/// Independently replaces each item's embedding locale with [`ANY_LOC`] with
/// probability `fraction`. One uniform draw is consumed per item regardless.
pub fn apply_anyloc<R: Rng + ?Sized>(mut batch: Vec<BatchItem>, fraction: f64, rng: &mut R) -> Vec<BatchItem> {
    for item in &mut batch {
        let u: f64 = rng.random();
        if u < fraction {
            item.locale_for_embedding = ANY_LOC.to_string();
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::RatingRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(l, p)| (l.to_string(), *p)).collect()
    }

    fn manifest(counts: &[(&str, usize)]) -> Manifest {
        let mut recs = vec![];
        for (loc, n) in counts {
            for i in 0..*n {
                recs.push(RatingRecord {
                    utterance_id: format!("{loc}-{i}"),
                    audio_path: String::new(),
                    locale: loc.to_string(),
                    ratings: vec![1.0 + 0.5 * (i % 9) as f64],
                    system_id: "s".into(),
                    project_id: "p".into(),
                    timestamp: "2021-02-01T00:00:00Z".parse().unwrap(),
                });
            }
        }
        Manifest::new(recs).unwrap()
    }

    #[test]
    fn unit_temperature_is_identity() {
        let p = dist(&[("aa-AA", 0.7), ("bb-BB", 0.2), ("cc-CC", 0.1)]);
        let q = temperature_probs(&p, 1.0).unwrap();
        for (l, v) in &p {
            assert!((q.get(l).unwrap() - v).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let p = dist(&[("aa-AA", 0.97), ("bb-BB", 0.02), ("cc-CC", 0.01)]);
        let q = temperature_probs(&p, 1e9).unwrap();
        for v in q.probs().values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_locale_example() {
        // 0.8^0.1 = 0.977933, 0.2^0.1 = 0.851340; normalized by their sum 1.829273
        let q = temperature_probs(&dist(&[("aa-AA", 0.8), ("bb-BB", 0.2)]), 10.0).unwrap();
        let a = 0.8f64.powf(0.1);
        let b = 0.2f64.powf(0.1);
        assert!((q.get("aa-AA").unwrap() - a / (a + b)).abs() < 1e-15);
        assert!((q.get("aa-AA").unwrap() - 0.534604).abs() < 1e-5);
        assert!((q.get("bb-BB").unwrap() - 0.465396).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(temperature_probs(&dist(&[("aa-AA", 1.0), ("bb-BB", 0.0)]), 2.0).is_err());
        assert!(temperature_probs(&dist(&[("aa-AA", 1.0)]), 0.5).is_err());
    }

    #[test]
    fn single_locale_batches() {
        let m = manifest(&[("aa-AA", 5)]);
        let q = temperature_probs(&dist(&[("aa-AA", 1.0)]), 10.0).unwrap();
        let cfg = SamplerConfig { batch_size: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = next_batch(&m, &q, &cfg, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
        assert!(b.iter().all(|i| i.locale_for_embedding == "aa-AA"));
    }

    #[test]
    fn seeded_streams_repeat() {
        let m = manifest(&[("aa-AA", 5), ("bb-BB", 3)]);
        let q = temperature_probs(&dist(&[("aa-AA", 0.6), ("bb-BB", 0.4)]), 2.0).unwrap();
        let s = BatchSampler::new(&m, &q, &SamplerConfig::default()).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| s.next_training_batch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn emitted_ids_exist() {
        let m = manifest(&[("aa-AA", 5), ("bb-BB", 3)]);
        let q = temperature_probs(&dist(&[("aa-AA", 0.5), ("bb-BB", 0.5)]), 1.0).unwrap();
        let s = BatchSampler::new(&m, &q, &SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for item in s.next_batch(&mut rng) {
            let r = &m.records()[item.record];
            assert_eq!(r.utterance_id, item.utterance_id);
            assert_eq!(r.locale, item.locale_for_embedding);
        }
    }

    #[test]
    fn missing_locale_is_an_error() {
        let m = manifest(&[("aa-AA", 5)]);
        let q = temperature_probs(&dist(&[("aa-AA", 0.5), ("bb-BB", 0.5)]), 1.0).unwrap();
        assert!(matches!(
            BatchSampler::new(&m, &q, &SamplerConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn empirical_frequencies_follow_distribution() {
        let m = manifest(&[("aa-AA", 7), ("bb-BB", 2)]);
        let q = temperature_probs(&dist(&[("aa-AA", 0.75), ("bb-BB", 0.25)]), 1.0).unwrap();
        let cfg = SamplerConfig { batch_size: 1000, ..Default::default() };
        let s = BatchSampler::new(&m, &q, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = 0usize;
        for _ in 0..100 {
            a += s.next_batch(&mut rng).iter().filter(|i| i.locale_for_embedding == "aa-AA").count();
        }
        assert!((a as f64 / 100_000.0 - 0.75).abs() < 0.01);
    }

    #[test]
    fn anyloc_extremes_and_rate() {
        let m = manifest(&[("aa-AA", 4)]);
        let q = temperature_probs(&dist(&[("aa-AA", 1.0)]), 1.0).unwrap();
        let cfg = SamplerConfig { batch_size: 100_000, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = next_batch(&m, &q, &cfg, &mut rng).unwrap();
        assert_eq!(apply_anyloc(batch.clone(), 0.0, &mut rng), batch);
        let all = apply_anyloc(batch.clone(), 1.0, &mut rng);
        assert!(all.iter().all(|i| i.locale_for_embedding == ANY_LOC));
        assert!(all.iter().zip(&batch).all(|(a, b)| a.target == b.target && a.record == b.record));
        let some = apply_anyloc(batch, 0.05, &mut rng);
        let n = some.iter().filter(|i| i.locale_for_embedding == ANY_LOC).count();
        assert!((4500..=5500).contains(&n), "{n}");
    }

    proptest::proptest! {
        #[test]
        fn order_preserved_and_flattening(raw in proptest::collection::vec(0.01f64..1.0, 2..8), tau in 1.0f64..50.0) {
            let total: f64 = raw.iter().sum();
            let p: BTreeMap<String, f64> = raw.iter().enumerate().map(|(i, v)| (format!("l{i}"), v / total)).collect();
            let q = temperature_probs(&p, tau).unwrap();
            let q2 = temperature_probs(&p, tau * 2.0).unwrap();
            proptest::prop_assert!((q.probs().values().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, pa) in &p {
                for (b, pb) in &p {
                    if pa > pb {
                        proptest::prop_assert!(q.get(a).unwrap() > q.get(b).unwrap());
                    }
                }
            }
            // a higher temperature moves q toward uniform: entropy rises and
            // the largest-to-smallest ratio shrinks
            let entropy = |d: &LocaleDistribution| -d.probs().values().map(|v| v * v.ln()).sum::<f64>();
            let spread = |d: &LocaleDistribution| {
                let v: Vec<f64> = d.probs().values().copied().collect();
                v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(1.0, f64::min)
            };
            proptest::prop_assert!(entropy(&q2) >= entropy(&q) - 1e-12);
            proptest::prop_assert!(spread(&q2) <= spread(&q) + 1e-12);
        }
    }
}
