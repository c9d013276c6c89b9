//! Brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use irispad::eval::ScoredSample;
use irispad::Label;

/// Mann-Whitney estimate: P(score_live > score_pm) + ½·P(tie).
pub fn pairwise_auc(scored: &[ScoredSample]) -> f64 {
    let live: Vec<f64> = scored.iter().filter(|s| s.true_label == Label::Live).map(|s| s.p_live).collect();
    let pm: Vec<f64> = scored.iter().filter(|s| s.true_label == Label::PostMortem).map(|s| s.p_live).collect();
    let mut acc = 0.0;
    for &l in &live {
        for &p in &pm {
            acc += if l > p {
                1.0
            } else if l == p {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (live.len() * pm.len()) as f64
}

/// Two-sided rank-sum p-value by enumerating every assignment of the pooled
/// (tie-free) values to the first sample.
pub fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = |v: f64| sorted.iter().position(|&s| s == v).unwrap() as f64 + 1.0;
    let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
    let mean = a.len() as f64 * (n as f64 + 1.0) / 2.0;
    let observed = (ranks[..a.len()].iter().sum::<f64>() - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        total += 1;
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - mean).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
