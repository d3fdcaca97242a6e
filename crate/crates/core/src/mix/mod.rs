//! Feature-space mixing: convex mixes, block masks, hard/soft PatchUp,
//! Manifold Mixup, reweighted targets and the PatchUp loss.

mod mask;

pub use mask::{sample_block_mask, BlockMask};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum MixError {
    #[error("invalid PatchUp config: {0}")]
    Config(String),
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("block size {block} does not fit a {height}x{width} plane")]
    BlockTooLarge { block: usize, height: usize, width: usize },
    #[error("block size {0} must be odd and positive")]
    BlockSize(usize),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MixError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Hard,
    Soft,
    /// Whole-activation mixing without a mask.
    Manifold,
}

/// Hidden activations where mixing may be applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSite {
    PseudoSequence,
    FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchUpConfig {
    pub patchup_prob: f64,
    pub gamma: f64,
    pub block_size: usize,
    pub mode: MixMode,
    /// Shape of the symmetric Beta law for λ.
    pub alpha: f64,
    pub sites: Vec<MixSite>,
}

impl Default for PatchUpConfig {
    fn default() -> Self {
        PatchUpConfig {
            patchup_prob: 1.0,
            gamma: 0.75,
            block_size: 1,
            mode: MixMode::Soft,
            alpha: 2.0,
            sites: vec![MixSite::PseudoSequence],
        }
    }
}

impl PatchUpConfig {
    pub fn validate(&self) -> Result<()> {
        unit("patchup_prob", self.patchup_prob)?;
        unit("gamma", self.gamma)?;
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(MixError::BlockSize(self.block_size));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MixError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.sites.is_empty() {
            return Err(MixError::Config("at least one site is required".into()));
        }
        Ok(())
    }
}

fn unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MixError::OutOfRange { what, value })
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        }
        .into());
    }
    Ok(())
}

/// `λ·a + (1 − λ)·b`.
pub fn mix_lambda(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var> {
    unit("lambda", lambda)?;
    same_shape(tape, a, b, "mix_lambda")?;
    let a = tape.mul_scalar(a, lambda)?;
    let b = tape.mul_scalar(b, 1.0 - lambda)?;
    Ok(tape.add(a, b)?)
}

fn mask_pair(tape: &mut Tape, g: Var, mask: &BlockMask) -> Result<(Var, Var)> {
    if tape.shape(g) != mask.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "patchup",
            detail: format!("activation {:?} vs mask {:?}", tape.shape(g), mask.shape()),
        }
        .into());
    }
    let keep = tape.constant(mask.to_tensor())?;
    let alter = tape.constant(mask.complement_tensor())?;
    Ok((keep, alter))
}

/// `M·g_i + (1 − M)·g_j`.
pub fn patchup_hard(tape: &mut Tape, gi: Var, gj: Var, mask: &BlockMask) -> Result<Var> {
    same_shape(tape, gi, gj, "patchup_hard")?;
    let (keep, alter) = mask_pair(tape, gi, mask)?;
    let kept = tape.mul(keep, gi)?;
    let swapped = tape.mul(alter, gj)?;
    Ok(tape.add(kept, swapped)?)
}

/// `M·g_i + Mix_λ((1 − M)·g_i, (1 − M)·g_j)`.
pub fn patchup_soft(tape: &mut Tape, gi: Var, gj: Var, mask: &BlockMask, lambda: f64) -> Result<Var> {
    unit("lambda", lambda)?;
    same_shape(tape, gi, gj, "patchup_soft")?;
    let (keep, alter) = mask_pair(tape, gi, mask)?;
    let kept = tape.mul(keep, gi)?;
    let own = tape.mul(alter, gi)?;
    let other = tape.mul(alter, gj)?;
    let blend = mix_lambda(tape, own, other, lambda)?;
    Ok(tape.add(kept, blend)?)
}

pub fn manifold_mixup(tape: &mut Tape, gi: Var, gj: Var, lambda: f64) -> Result<Var> {
    mix_lambda(tape, gi, gj, lambda)
}

/// Target mixed with weight `pu` (`w`) and the second-term target (`y`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub w: f64,
    pub y: f64,
}

fn mix(a: f64, b: f64, t: f64) -> f64 {
    t * a + (1.0 - t) * b
}

/// Hard: `Y = y_j`; soft and manifold: `Y = Mix_λ(y_i, y_j)`; `W = Mix_pu(y_i, Y)`.
pub fn reweighted_target(yi: f64, yj: f64, pu: f64, lambda: f64, mode: MixMode) -> Result<Targets> {
    unit("y_i", yi)?;
    unit("y_j", yj)?;
    unit("pu", pu)?;
    unit("lambda", lambda)?;
    let y = match mode {
        MixMode::Hard => yj,
        MixMode::Soft | MixMode::Manifold => mix(yi, yj, lambda),
    };
    Ok(Targets { w: mix(yi, y, pu), y })
}

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of `pred` (`[B]`) against soft targets.
pub fn bce(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let n = tape.shape(pred).iter().product::<usize>();
    if targets.len() != n {
        return Err(MixError::Length(format!("{} targets for {n} predictions", targets.len())));
    }
    let shape = tape.shape(pred).to_vec();
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.log(p)?;
    let q = tape.mul_scalar(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.log(q)?;
    let t = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?)?;
    let u = tape.constant(Tensor::new(shape, targets.iter().map(|t| 1.0 - t).collect())?)?;
    let a = tape.mul(t, lp)?;
    let b = tape.mul(u, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.mul_scalar(m, -1.0)?)
}

/// `pu·bce(pred, y_i) + (1 − pu)·bce(pred, Y)`, weighting the two losses.
pub fn patchup_loss(tape: &mut Tape, pred: Var, yi: &[f64], big_y: &[f64], pu: f64) -> Result<Var> {
    unit("pu", pu)?;
    let own = bce(tape, pred, yi)?;
    let mixed = bce(tape, pred, big_y)?;
    let own = tape.mul_scalar(own, pu)?;
    let mixed = tape.mul_scalar(mixed, 1.0 - pu)?;
    Ok(tape.add(own, mixed)?)
}

/// A mixed activation and what is needed to score it.
#[derive(Clone, Debug)]
pub struct MixOutcome {
    pub mixed: Var,
    pub mask: BlockMask,
    pub lambda: f64,
    pub pu: f64,
    /// Sample `i` was paired with sample `partner[i]`.
    pub partner: Vec<usize>,
    pub mode: MixMode,
    pub site: MixSite,
    /// Per-sample `Y` targets.
    pub second_targets: Vec<f64>,
    /// Per-sample `W` targets.
    pub reweighted: Vec<f64>,
}

/// Chooses a site from `cfg.sites` (uniformly), or `None` when this step is not mixed.
pub fn draw_site<R: Rng>(cfg: &PatchUpConfig, rng: &mut R) -> Option<MixSite> {
    if !rng.random_bool(cfg.patchup_prob) {
        return None;
    }
    let i = if cfg.sites.len() == 1 { 0 } else { rng.random_range(0..cfg.sites.len()) };
    Some(cfg.sites[i])
}

/// Samples λ, a partner permutation and a mask, and mixes `g` (`[B, ...]`).
pub fn apply_patchup<R: Rng>(
    tape: &mut Tape,
    g: Var,
    labels: &[f64],
    cfg: &PatchUpConfig,
    site: MixSite,
    rng: &mut R,
) -> Result<MixOutcome> {
    cfg.validate()?;
    let shape = tape.shape(g).to_vec();
    let batch = shape[0];
    if labels.len() != batch {
        return Err(MixError::Length(format!("{} labels for batch {batch}", labels.len())));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| MixError::Config(e.to_string()))?;
    let lambda: f64 = beta.sample(rng);
    let mut partner: Vec<usize> = (0..batch).collect();
    partner.shuffle(rng);
    let gj = tape.index_select(g, &partner)?;
    let (mask, mixed) = match cfg.mode {
        MixMode::Hard => {
            let mask = sample_block_mask(&shape, cfg.gamma, cfg.block_size, rng)?;
            let mixed = patchup_hard(tape, g, gj, &mask)?;
            (mask, mixed)
        }
        MixMode::Soft => {
            let mask = sample_block_mask(&shape, cfg.gamma, cfg.block_size, rng)?;
            let mixed = patchup_soft(tape, g, gj, &mask, lambda)?;
            (mask, mixed)
        }
        MixMode::Manifold => {
            let mask = BlockMask::zeros(&shape);
            (mask, manifold_mixup(tape, g, gj, lambda)?)
        }
    };
    let pu = mask.pu();
    let mut second_targets = Vec::with_capacity(batch);
    let mut reweighted = Vec::with_capacity(batch);
    for i in 0..batch {
        let t = reweighted_target(labels[i], labels[partner[i]], pu, lambda, cfg.mode)?;
        second_targets.push(t.y);
        reweighted.push(t.w);
    }
    Ok(MixOutcome {
        mixed,
        mask,
        lambda,
        pu,
        partner,
        mode: cfg.mode,
        site,
        second_targets,
        reweighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.param(Tensor::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn lambda_arithmetic() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1], &[2.0]);
        let b = leaf(&mut t, &[1], &[-2.0]);
        let m = mix_lambda(&mut t, a, b, 0.75).unwrap();
        assert_eq!(t.value(m).data(), &[1.0]);
        assert!(matches!(mix_lambda(&mut t, a, b, 1.5), Err(MixError::OutOfRange { .. })));
    }

    #[test]
    fn hard_and_soft_examples() {
        let mut t = Tape::new();
        let gi = leaf(&mut t, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let gj = leaf(&mut t, &[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mask = BlockMask::from_keep(&[1, 2, 2], &[true, false, false, true]).unwrap();
        let h = patchup_hard(&mut t, gi, gj, &mask).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 6.0, 7.0, 4.0]);

        let gi = leaf(&mut t, &[1, 1, 2], &[1.0, 2.0]);
        let gj = leaf(&mut t, &[1, 1, 2], &[3.0, 6.0]);
        let mask = BlockMask::from_keep(&[1, 1, 2], &[true, false]).unwrap();
        let s = patchup_soft(&mut t, gi, gj, &mask, 0.5).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 4.0]);
    }

    #[test]
    fn targets() {
        let t = reweighted_target(1.0, 0.0, 0.6, 0.3, MixMode::Hard).unwrap();
        assert_eq!((t.w, t.y), (0.6, 0.0));
        let t = reweighted_target(1.0, 0.0, 0.5, 0.5, MixMode::Soft).unwrap();
        assert_eq!((t.w, t.y), (0.75, 0.5));
        assert!(reweighted_target(1.2, 0.0, 0.5, 0.5, MixMode::Soft).is_err());
    }

    #[test]
    fn loss_weighting_equals_bce_on_reweighted_target() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[3], &[0.3, 0.6, 0.9]);
        let yi = [1.0, 0.0, 1.0];
        let big_y = [0.2, 0.7, 0.0];
        let pu = 0.35;
        let w: Vec<f64> = yi.iter().zip(&big_y).map(|(a, b)| pu * a + (1.0 - pu) * b).collect();
        let l = patchup_loss(&mut t, p, &yi, &big_y, pu).unwrap();
        let r = bce(&mut t, p, &w).unwrap();
        assert!((t.value(l).item() - t.value(r).item()).abs() < 1e-12);
    }

    #[test]
    fn apply_reports_consistent_bookkeeping() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let g = t.param(Tensor::from_fn(&[6, 4, 5], |i| i as f64)).unwrap();
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let out = apply_patchup(&mut t, g, &labels, &PatchUpConfig::default(), MixSite::PseudoSequence, &mut rng).unwrap();
        let mut sorted = out.partner.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert_eq!(out.pu, out.mask.pu());
        assert!((0.0..=1.0).contains(&out.lambda));
        assert_eq!(t.shape(out.mixed), &[6, 4, 5]);
    }
}
