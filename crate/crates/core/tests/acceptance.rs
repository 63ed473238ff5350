//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use squid::dsp::{pad_or_truncate, FrontendConfig, LogMelSpectrogram};
use squid::eval::{bootstrap_tau, kendall_tau_b, BootstrapConfig};
use squid::features::FeatureStore;
use squid::manifest::{aggregate_target, Manifest, RatingRecord};
use squid::model::{backward_into, predict, LocaleVocab, ModelConfig, ModelParameters, ANY_LOC};
use squid::sampler::{temperature_probs, BatchSampler, SamplerConfig};
use squid::synthbench::{default_locales, gen_dataset, SynthConfig};
use squid::trainer::{TrainConfig, Trainer};

#[path = "acceptance/pipeline.rs"]
mod pipeline_criteria;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn brute_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                c += 1;
            } else if dx * dy < 0.0 {
                d += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if tx == n0 || ty == n0 {
        return None;
    }
    Some((c - d) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

fn kendall_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            match trial % 3 {
                0 => (0..n).map(|_| rng.random::<f64>()).collect(),
                1 => (0..n).map(|_| rng.random_range(0..5) as f64 * 0.5).collect(),
                _ => (0..n).map(|_| rng.random_range(0..2) as f64).collect(),
            }
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        match (kendall_tau_b(&x, &y), brute_tau(&x, &y)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(squid::Error::Degenerate(_)), None) => degenerate += 1,
            (a, b) => return Err(format!("trial {trial}: fast {a:?} vs brute {b:?}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-12 && secs < 10.0,
        format!("max |fast - brute| = {worst:.1e} over 1000 inputs ({degenerate} degenerate on both), {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 2

fn random_spec(cfg: &ModelConfig, valid: usize, rng: &mut ChaCha8Rng) -> LogMelSpectrogram {
    let frames: Vec<Vec<f32>> = (0..valid)
        .map(|_| (0..cfg.n_mels).map(|_| rng.random_range(-10.0f32..2.0)).collect())
        .collect();
    pad_or_truncate(&frames, cfg.t_max).unwrap()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut p = ModelParameters::init(&cfg, &LocaleVocab::new(["en-US", "fr-FR"]), 17).map_err(|e| e.to_string())?;
    // full-scale head so encoder gradients are not uniformly tiny
    let bound = 1.0 / (p.head_weight.len() as f64).sqrt();
    p.head_weight.mapv_inplace(|_| rng.random_range(-bound..bound));
    p.touch();
    let data = [
        (random_spec(&cfg, 301, &mut rng), "en-US", 0.8),
        (random_spec(&cfg, 57, &mut rng), "fr-FR", 0.1),
    ];
    let loss = |p: &ModelParameters| {
        data.iter()
            .map(|(s, l, y)| (predict(p, s, l).unwrap().0.y_hat - y).powi(2))
            .sum::<f64>()
            / data.len() as f64
    };

    let mut grad = p.zeros_like();
    for (s, l, y) in &data {
        let (pred, trace) = predict(&p, s, l).unwrap();
        backward_into(&p, &trace, 2.0 * (pred.y_hat - y) / data.len() as f64, &mut grad).unwrap();
    }

    // half uniform over all coordinates, half stratified by tensor so small
    // tensors (LayerNorm, head, embedding) are always exercised
    let n = p.num_params();
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
    let mut coords: Vec<usize> = (0..50).map(|_| rng.random_range(0..n)).collect();
    for _ in 0..50 {
        let t = rng.random_range(0..sizes.len());
        coords.push(sizes[..t].iter().sum::<usize>() + rng.random_range(0..sizes[t]));
    }
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    for &c in &coords {
        let orig = p.get_flat(c);
        p.set_flat(c, orig + h);
        let plus = loss(&p);
        p.set_flat(c, orig - h);
        let minus = loss(&p);
        p.set_flat(c, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad.get_flat(c);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel >= worst.0 {
            worst = (rel, p.flat_name(c));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-4 && secs < 120.0,
        format!("max relative error {:.2e} (at {}) over 100 coordinates, {secs:.1} s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 3

fn record(id: String, locale: &str, rating: f64) -> RatingRecord {
    RatingRecord {
        utterance_id: id,
        audio_path: String::new(),
        locale: locale.into(),
        ratings: vec![rating],
        system_id: "s".into(),
        project_id: "p".into(),
        timestamp: "2021-06-01T00:00:00Z".parse().unwrap(),
    }
}

fn sampler_fidelity() -> Outcome {
    let counts = [("aa-AA", 700usize), ("bb-BB", 200), ("cc-CC", 80), ("dd-DD", 20)];
    let total: usize = counts.iter().map(|c| c.1).sum();
    let mut recs = Vec::new();
    for (loc, n) in counts {
        recs.extend((0..n).map(|i| record(format!("{loc}-{i}"), loc, 3.0)));
    }
    let m = Manifest::new(recs).map_err(|e| e.to_string())?;
    let natural: BTreeMap<String, f64> =
        counts.iter().map(|(l, n)| (l.to_string(), *n as f64 / total as f64)).collect();

    let mut worst = 0.0f64;
    let mut anyloc = (0usize, 0usize);
    for (k, tau) in [1.0, 2.0, 10.0, 100.0].into_iter().enumerate() {
        let dist = temperature_probs(&natural, tau).map_err(|e| e.to_string())?;
        let z: f64 = natural.values().map(|p| p.powf(1.0 / tau)).sum();
        let cfg = SamplerConfig { temperature: tau, batch_size: 1000, seed: k as u64, ..Default::default() };
        let sampler = BatchSampler::new(&m, &dist, &cfg).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..100 {
            let batch = sampler.next_batch(&mut rng);
            for item in &batch {
                *seen.entry(m.records()[item.record].locale.clone()).or_default() += 1;
            }
            let batch = squid::sampler::apply_anyloc(batch, cfg.anyloc_fraction, &mut rng);
            anyloc.0 += batch.iter().filter(|i| i.locale_for_embedding == ANY_LOC).count();
            anyloc.1 += batch.len();
        }
        for (l, p) in &natural {
            let expected = p.powf(1.0 / tau) / z;
            let got = *seen.get(l).unwrap_or(&0) as f64 / 100_000.0;
            worst = worst.max((got - expected).abs());
        }
    }
    let frac = anyloc.0 as f64 / anyloc.1 as f64;
    check(
        worst <= 0.01 && (frac - 0.05).abs() <= 0.005,
        format!("max |empirical - q| = {worst:.4} over tau in {{1, 2, 10, 100}}; ANY-LOC fraction {frac:.4}"),
    )
}

// ---------------------------------------------------------------- 4

fn target_rescaling() -> Outcome {
    let mut bad = Vec::new();
    for k in 0..9 {
        let rating = 1.0 + 0.5 * k as f64;
        let got = aggregate_target(&record("u".into(), "en-US", rating));
        if got != k as f64 / 8.0 {
            bad.push(format!("{rating} -> {got}"));
        }
    }
    check(bad.is_empty(), format!("9 grid points map exactly onto k/8; mismatches: {bad:?}"))
}

// ---------------------------------------------------------------- 5

pub fn synth_with_features(cfg: &SynthConfig, dir: &Path, frontend: &FrontendConfig) -> (Manifest, FeatureStore) {
    let data = gen_dataset(cfg, dir).expect("synthetic data");
    let mut store = FeatureStore::new(frontend.clone());
    store.load(&data.manifest, dir, None).expect("features");
    (data.manifest, store)
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        locales: default_locales(2),
        utterances_per_locale: 16,
        min_duration_s: 1.0,
        max_duration_s: 1.5,
        seed: 7,
        ..SynthConfig::default()
    };
    let (m, store) = synth_with_features(&synth, dir.path(), &FrontendConfig::desk());
    let cfg = TrainConfig::desk_tiny();
    let mut trainer = Trainer::new(&cfg, &ModelConfig::tiny(), &m, &store, &SamplerConfig::default(), None, 0)
        .map_err(|e| e.to_string())?;
    let initial = trainer.train_mse().map_err(|e| e.to_string())?;
    let mut mse = initial;
    let mut reached = None;
    while trainer.step_count() < 2000 {
        let s = trainer.step().map_err(|e| e.to_string())?;
        if s.step % 25 == 0 {
            mse = trainer.train_mse().map_err(|e| e.to_string())?;
            if mse < 1e-3 {
                reached = Some(s.step);
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    match reached {
        Some(step) => check(
            secs < 300.0,
            format!("train MSE {initial:.2e} -> {mse:.2e} (< 1e-3) at step {step}, {secs:.0} s"),
        ),
        None => Err(format!("train MSE {initial:.2e} -> {mse:.2e} after 2000 steps, {secs:.0} s")),
    }
}

// ---------------------------------------------------------------- 7

fn bootstrap_coverage() -> Outcome {
    // bivariate normal with correlation rho has tau = (2 / pi) asin(rho)
    let rho: f64 = 0.5;
    let true_tau = 2.0 / std::f64::consts::PI * rho.asin();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 80;
    let mut covered = 0;
    for trial in 0..200u64 {
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let a: f64 = normal.sample(&mut rng);
            let b: f64 = normal.sample(&mut rng);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let cfg = BootstrapConfig { seed: trial, ..Default::default() };
        let (lo, hi) = bootstrap_tau(&x, &y, &cfg).map_err(|e| e.to_string())?;
        if lo <= true_tau && true_tau <= hi {
            covered += 1;
        }
    }
    let rate = covered as f64 / 200.0;
    check(
        (0.90..=0.98).contains(&rate),
        format!("95% percentile intervals covered tau = {true_tau:.4} in {covered}/200 trials ({rate:.3}), n = {n}, B = 1000"),
    )
}

// ----------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let criteria: [Criterion; 9] = [
        (1, "kendall oracle", kendall_oracle),
        (2, "gradient check", gradient_check),
        (3, "sampler fidelity", sampler_fidelity),
        (4, "target rescaling", target_rescaling),
        (5, "overfit gate", overfit),
        (6, "transfer direction", pipeline_criteria::transfer_direction),
        (7, "bootstrap coverage", bootstrap_coverage),
        (8, "determinism", pipeline_criteria::determinism),
        (9, "end-to-end smoke", pipeline_criteria::end_to_end),
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let total = Instant::now();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(t.elapsed());
        match outcome {
            Ok(detail) => println!("acceptance {id} [PASS] {name}: {detail} ({took})"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id} [FAIL] {name}: {detail} ({took})");
            }
        }
    }
    println!("acceptance: {failed} failed, total {}", fmt_duration(total.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
