//! Rank and linear correlation, and percentile bootstrap intervals.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired sequences differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input contains NaN or infinity".into()));
    }
    Ok(())
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite values")
}

/// Number of pairs inside runs of equal values of an already sorted key.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Merge sort of `idx` by `y[idx]`, returning the number of swaps (discordant
/// pairs given a prior sort by x then y).
fn sort_count_swaps(idx: &mut [usize], buf: &mut [usize], y: &[f64]) -> u64 {
    let n = idx.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = idx.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        sort_count_swaps(l, bl, y) + sort_count_swaps(r, br, y)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if y[idx[j]] < y[idx[i]] {
            buf[k] = idx[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = idx[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&idx[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&idx[j..n]);
    idx.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b in `O(n log n)` (Knight's algorithm).
///
/// Returns [`Error::Degenerate`] when every pair is tied in `x` or in `y`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let n0 = n * (n - 1) / 2;

    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| cmp(x[a], x[b]).then(cmp(y[a], y[b])));
    let n1 = tied_pairs(idx.iter().map(|&i| x[i]));
    // pairs tied in both coordinates: runs of equal (x, y) in the sorted order
    let mut n3 = 0u64;
    let mut run = 0u64;
    for w in idx.windows(2) {
        if x[w[0]] == x[w[1]] && y[w[0]] == y[w[1]] {
            run += 1;
        } else {
            n3 += run * (run + 1) / 2;
            run = 0;
        }
    }
    n3 += run * (run + 1) / 2;

    let mut buf = vec![0usize; idx.len()];
    let swaps = sort_count_swaps(&mut idx, &mut buf, y);
    let n2 = tied_pairs(idx.iter().map(|&i| y[i]));

    if n1 == n0 || n2 == n0 {
        return Err(Error::Degenerate(format!(
            "all {n0} pairs tied in {}",
            if n1 == n0 { "x" } else { "y" }
        )));
    }
    let concordant_minus_discordant = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok((concordant_minus_discordant as f64 / denom).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation. Returns [`Error::ZeroVariance`] when either
/// side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|a| *a == v[0]) {
            return Err(Error::ZeroVariance(format!("{name} is constant")));
        }
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Linear-interpolated quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Percentile bootstrap interval for `statistic` over `n` units resampled
/// with replacement. The statistic receives the resampled unit indices.
///
/// Resamples on which the statistic is undefined ([`Error::Degenerate`] or
/// [`Error::ZeroVariance`]) are discarded; any other error is returned.
pub fn bootstrap_ci<F>(n: usize, cfg: &BootstrapConfig, mut statistic: F) -> Result<(f64, f64)>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if cfg.resamples < 1 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 2 units, got {n}")));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {} outside (0, 1)", cfg.level)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = Vec::with_capacity(cfg.resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..cfg.resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        match statistic(&idx) {
            Ok(v) => draws.push(v),
            Err(Error::Degenerate(_)) | Err(Error::ZeroVariance(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if draws.is_empty() {
        return Err(Error::Degenerate("statistic undefined on every bootstrap resample".into()));
    }
    draws.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - cfg.level) / 2.0;
    Ok((quantile_sorted(&draws, alpha), quantile_sorted(&draws, 1.0 - alpha)))
}

/// Bootstrap interval for Kendall tau-b over paired values.
pub fn bootstrap_tau(x: &[f64], y: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let mut xs = vec![0.0; x.len()];
    let mut ys = vec![0.0; y.len()];
    bootstrap_ci(x.len(), cfg, |idx| {
        for (k, &i) in idx.iter().enumerate() {
            xs[k] = x[i];
            ys[k] = y[i];
        }
        kendall_tau_b(&xs, &ys)
    })
}
