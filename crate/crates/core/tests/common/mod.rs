//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use stagecct::data::SyntheticSpec;
use stagecct::harness::{DataSource, FoldConfig, RunConfig};

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Binary cross-entropy of one prediction against a soft target, with the
/// same clamp as the library.
pub fn bce1(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Clip-BCE written directly from its definition.
pub fn clip_bce_ref(p: &[f64], y: &[f64]) -> f64 {
    let clip = |x: f64| if (0.25..=0.75).contains(&x.exp()) { x } else { 0.0 };
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            y * clip(p.ln()) + (1.0 - y) * clip((1.0 - p).ln())
        })
        .sum();
    -s / p.len() as f64
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Desk preset shrunk so a cross-validation finishes in seconds.
pub fn tiny_config(n_pos: usize, n_neg: usize, k: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = epochs;
    cfg.data = DataSource::Synthetic(SyntheticSpec {
        n_pos,
        n_neg,
        separation: 3.0,
        ..SyntheticSpec::default()
    });
    cfg.folds = FoldConfig { k, seed: 0 };
    cfg
}
