//! Clip function, clip-BCE, class centers, gradient attention and CC-loss.

use serde::{Deserialize, Serialize};

use crate::mix::PROB_EPS;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {part} loss: {value}")]
    NonFinite { part: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Lower and upper log-probability bounds of the clip band, `ln 0.25` and `ln 0.75`.
pub fn clip_band() -> (f64, f64) {
    (0.25f64.ln(), 0.75f64.ln())
}

/// Whether `exp(x)` lies in `[0.25, 0.75]`, tested in log space so that the
/// boundaries `ln 0.25` and `ln 0.75` are themselves inside.
pub fn in_band(x: f64) -> bool {
    let (lo, hi) = clip_band();
    (lo..=hi).contains(&x)
}

/// `x` when `0.25 ≤ exp(x) ≤ 0.75`, otherwise 0.
pub fn clip(x: f64) -> f64 {
    if in_band(x) {
        x
    } else {
        0.0
    }
}

/// `−(1/N) Σ [y·clip(log p) + (1 − y)·clip(log(1 − p))]`.
///
/// Only terms whose log-probability lies in the band carry gradient; the
/// band indicator itself is a constant. Confidently wrong predictions
/// (probability of the true class below 0.25) are clipped out as well.
pub fn clip_bce(tape: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n: usize = shape.iter().product();
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(LossError::Shape(format!("{} labels for {n} predictions", labels.len())));
    }
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.log(p)?;
    let q = tape.mul_scalar(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.log(q)?;
    let pos: Vec<f64> = tape
        .value(lp)
        .data()
        .iter()
        .zip(labels)
        .map(|(&x, &y)| if in_band(x) { y } else { 0.0 })
        .collect();
    let neg: Vec<f64> = tape
        .value(lq)
        .data()
        .iter()
        .zip(labels)
        .map(|(&x, &y)| if in_band(x) { 1.0 - y } else { 0.0 })
        .collect();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?)?;
    let neg = tape.constant(Tensor::new(shape, neg)?)?;
    let a = tape.mul(pos, lp)?;
    let b = tape.mul(neg, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.mul_scalar(m, -1.0)?)
}

/// Running per-class mean feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    pub width: usize,
    /// `centers[c]` is the map of class `c`.
    pub centers: [Vec<f64>; 2],
    pub counts: [u64; 2],
    pub warmup_iters: u64,
}

pub const DEFAULT_WARMUP_ITERS: u64 = 100;

impl ClassCenters {
    pub fn new(width: usize, warmup_iters: u64) -> Self {
        ClassCenters {
            width,
            centers: [vec![0.0; width], vec![0.0; width]],
            counts: [0, 0],
            warmup_iters,
        }
    }

    /// Below `warmup_iters` both maps are cleared and re-estimated from this
    /// batch alone (an absent class stays at zero); afterwards each map is
    /// the count-weighted mean of every post-warmup sample of its class.
    pub fn update(&mut self, features: &Tensor, labels: &[u8], iteration: u64) -> Result<()> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.width || s[0] != labels.len() {
            return Err(LossError::Shape(format!(
                "features {s:?} with {} labels, centers of width {}",
                labels.len(),
                self.width
            )));
        }
        let mut sum = [vec![0.0; self.width], vec![0.0; self.width]];
        let mut n = [0u64; 2];
        for (row, &y) in features.data().chunks(self.width).zip(labels) {
            let c = (y == 1) as usize;
            n[c] += 1;
            sum[c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        if iteration < self.warmup_iters {
            self.counts = [0, 0];
            for c in 0..2 {
                let inv = if n[c] > 0 { 1.0 / n[c] as f64 } else { 0.0 };
                self.centers[c] = sum[c].iter().map(|v| v * inv).collect();
            }
            return Ok(());
        }
        for c in 0..2 {
            if n[c] == 0 {
                continue;
            }
            let total = self.counts[c] + n[c];
            let old = self.counts[c] as f64;
            for (m, s) in self.centers[c].iter_mut().zip(&sum[c]) {
                *m = (*m * old + s) / total as f64;
            }
            self.counts[c] = total;
        }
        Ok(())
    }
}

/// Per-sample min-max normalization of a `[B, F]` gradient to `[0, 1]`;
/// a constant row maps to zeros.
pub fn attention_from_gradient(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 {
        return Err(LossError::Shape(format!("expected [batch, width], got {s:?}")));
    }
    let mut out = raw.clone();
    for row in out.data_mut().chunks_mut(s[1]) {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v - lo) / span);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// How the weighted distance `|f_i − m_{y_i}| ⊙ G_i` is reduced over the
/// feature elements of each sample. The batch is always averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcReduction {
    /// Sum over elements: `(1/N) Σ_i Σ_k`.
    Sum,
    /// Mean over elements: `(1/(N·F)) Σ_i Σ_k`, on the scale of one BCE term.
    #[default]
    Mean,
}

/// Center distance weighted by gradient attention, differentiable in `f` only.
pub fn cc_loss(
    tape: &mut Tape,
    f: Var,
    labels: &[u8],
    centers: &ClassCenters,
    attention: &Tensor,
    reduction: CcReduction,
) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != centers.width || attention.shape() != shape.as_slice() {
        return Err(LossError::Shape(format!(
            "f {shape:?}, {} labels, centers width {}, attention {:?}",
            labels.len(),
            centers.width,
            attention.shape()
        )));
    }
    let mut target = Vec::with_capacity(shape[0] * shape[1]);
    for &y in labels {
        target.extend_from_slice(&centers.centers[(y == 1) as usize]);
    }
    let target = tape.constant(Tensor::new(shape, target)?)?;
    let g = tape.constant(attention.clone())?;
    let d = tape.sub(f, target)?;
    let d = tape.abs(d)?;
    let w = tape.mul(d, g)?;
    let s = tape.sum(w)?;
    let denom = match reduction {
        CcReduction::Sum => labels.len(),
        CcReduction::Mean => labels.len() * centers.width,
    };
    Ok(tape.mul_scalar(s, 1.0 / denom as f64)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip_bce: f64,
    pub patchup: f64,
    pub cc: f64,
    pub total: f64,
}

/// Enabled loss terms of one step; `None` contributes exactly zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub clip_bce: Option<Var>,
    pub patchup: Option<Var>,
    pub cc: Option<Var>,
}

/// Unweighted sum of the enabled parts, in the order clip-BCE, PatchUp, CC.
pub fn total_loss(tape: &mut Tape, parts: &LossParts) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (name, part, slot) in [
        ("clip_bce", parts.clip_bce, &mut breakdown.clip_bce),
        ("patchup", parts.patchup, &mut breakdown.patchup),
        ("cc", parts.cc, &mut breakdown.cc),
    ] {
        let Some(v) = part else { continue };
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(LossError::NonFinite { part: name, value });
        }
        *slot = value;
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clip(0.5f64.ln()), 0.5f64.ln());
        assert_eq!(clip(0.9f64.ln()), 0.0);
        assert_eq!(clip(0.25f64.ln()), 0.25f64.ln());
        assert_eq!(clip(0.75f64.ln()), 0.75f64.ln());
    }

    #[test]
    fn clip_bce_examples() {
        let mut t = Tape::new();
        let p = t.param(Tensor::full(&[4], 0.5)).unwrap();
        let l = clip_bce(&mut t, p, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((t.value(l).item() + 0.5f64.ln()).abs() < 1e-15);

        let p = t.param(Tensor::new(vec![2], vec![0.99, 0.01]).unwrap()).unwrap();
        let l = clip_bce(&mut t, p, &[1.0, 1.0]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        assert!(matches!(clip_bce(&mut t, p, &[]), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn centers_warmup_and_running_mean() {
        let mut c = ClassCenters::new(2, 1);
        let f = Tensor::new(vec![2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        c.update(&f, &[0, 0], 0).unwrap();
        assert_eq!(c.centers[0], vec![3.0, 3.0]);
        assert_eq!(c.centers[1], vec![0.0, 0.0]);

        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![4, 2], vec![4.0, 8.0, 4.0, 8.0, 4.0, 8.0, 4.0, 8.0]).unwrap();
        c.update(&a, &[1, 1], 1).unwrap();
        c.update(&b, &[1, 1, 1, 1], 2).unwrap();
        let expect = [(2.0 * 1.0 + 4.0 * 4.0) / 6.0, (2.0 * 2.0 + 4.0 * 8.0) / 6.0];
        assert!((c.centers[1][0] - expect[0]).abs() < 1e-12 && (c.centers[1][1] - expect[1]).abs() < 1e-12);
        assert_eq!(c.counts, [0, 6]);
    }

    #[test]
    fn attention_normalization() {
        let g = attention_from_gradient(&Tensor::new(vec![1, 3], vec![1.0, 3.0, 5.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.5, 1.0]);
        let g = attention_from_gradient(&Tensor::full(&[2, 3], 4.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cc_example() {
        let mut t = Tape::new();
        let f = t.param(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
        let mut c = ClassCenters::new(2, 0);
        c.centers[1] = vec![1.0, 1.0];
        let g = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let l = cc_loss(&mut t, f, &[1], &c, &g, CcReduction::Sum).unwrap();
        assert_eq!(t.value(l).item(), 1.5);
        let l = cc_loss(&mut t, f, &[1], &c, &g, CcReduction::Mean).unwrap();
        assert_eq!(t.value(l).item(), 0.75);
    }

    #[test]
    fn total_sums_enabled_parts() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.7)).unwrap();
        let b = t.constant(Tensor::scalar(0.2)).unwrap();
        let c = t.constant(Tensor::scalar(0.1)).unwrap();
        let (_, br) = total_loss(
            &mut t,
            &LossParts {
                clip_bce: Some(a),
                patchup: Some(b),
                cc: Some(c),
            },
        )
        .unwrap();
        assert!((br.total - 1.0).abs() < 1e-15);
        let (_, br) = total_loss(
            &mut t,
            &LossParts {
                clip_bce: Some(a),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(br.total, 0.7);
        assert_eq!((br.patchup, br.cc), (0.0, 0.0));
    }
}
