use std::time::Instant;

use crate::error::{PierError, Result};
use crate::numerics::BCE_CLAMP;
use crate::permgen::Permutation;

pub const WARMUP_REQUESTS: usize = 5;
pub const MIN_REPETITIONS: usize = 30;

fn check_labels(scores: &[f64], labels: &[u8], metric: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(PierError::dim(metric, &[scores.len()], &[labels.len()]));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(PierError::Contract(format!("{metric}: labels must be 0 or 1")));
    }
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUC: probability a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels, "auc")?;
    if pos == 0 || neg == 0 {
        return Err(PierError::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PierError::Numeric {
            param: "<scores>".into(),
            detail: "NaN score".into(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of positive ranks, tied groups sharing their average rank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let positives = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with the same clamp as training.
pub fn logloss(preds: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(preds, labels, "logloss")?;
    if preds.is_empty() {
        return Err(PierError::UndefinedMetric("logloss of an empty set".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// 1 when `best` appears, as an exact ordered sequence, among `selected`.
pub fn hr_at_1(selected: &[Permutation], best: &Permutation) -> u8 {
    u8::from(selected.contains(best))
}

/// Latency summary in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostSummary {
    pub mean_ms: f64,
    pub p99_ms: f64,
}

/// Times `run` once per request after [`WARMUP_REQUESTS`] untimed calls,
/// cycling through `requests` until `repetitions` timings are collected.
pub fn bench_cost<T>(requests: &[T], repetitions: usize, mut run: impl FnMut(&T) -> Result<()>) -> Result<CostSummary> {
    if repetitions < MIN_REPETITIONS {
        return Err(PierError::Contract(format!(
            "bench needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    if requests.is_empty() {
        return Err(PierError::Contract("bench over an empty request slice".into()));
    }
    for r in requests.iter().cycle().take(WARMUP_REQUESTS) {
        run(r)?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for r in requests.iter().cycle().take(repetitions) {
        let start = Instant::now();
        run(r)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let rank = ((0.99 * times.len() as f64).ceil() as usize).clamp(1, times.len());
    Ok(CostSummary {
        mean_ms,
        p99_ms: times[rank - 1],
    })
}
