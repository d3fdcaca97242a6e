//! Two-pass training step: clip-BCE gradient hook at `f`, CC-loss weighting,
//! PatchUp on a hidden site, and the parameter update.

mod optim;

pub use optim::{OptimState, OptimizerConfig, OptimizerKind};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::{attention_from_gradient, cc_loss, clip_bce, total_loss, CcReduction, ClassCenters, LossBreakdown, LossError, LossParts};
use crate::mix::{apply_patchup, draw_site, patchup_loss, MixError, MixSite, PatchUpConfig};
use crate::model::{Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("iteration {iteration}: non-finite {part} loss {value}")]
    NonFinite { iteration: u64, part: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub clip_bce: bool,
    pub patchup: bool,
    pub cc: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            clip_bce: true,
            patchup: true,
            cc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub losses: LossToggles,
    pub patchup: PatchUpConfig,
    pub warmup_iters: u64,
    #[serde(default)]
    pub cc_reduction: CcReduction,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            losses: LossToggles::default(),
            patchup: PatchUpConfig::default(),
            warmup_iters: crate::loss::DEFAULT_WARMUP_ITERS,
            cc_reduction: CcReduction::default(),
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate().map_err(TrainError::Config)?;
        if !(self.losses.clip_bce || self.losses.patchup || self.losses.cc) {
            return Err(TrainError::Config("at least one loss term must be enabled".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.losses.patchup {
            self.patchup.validate()?;
        }
        Ok(())
    }
}

/// One line of the per-step loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub clip_bce: f64,
    pub patchup: f64,
    pub cc: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub iteration: u64,
    pub losses: LossBreakdown,
    pub mixed_at: Option<MixSite>,
}

/// Owns the model, class centers, optimizer state and random streams of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub centers: ClassCenters,
    pub state: OptimState,
    shuffle_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
    probe_gradient: bool,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let centers = ClassCenters::new(model.config.feature_width(), config.warmup_iters);
        let state = OptimState::new(&model.params);
        let shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mix_rng = ChaCha8Rng::seed_from_u64(seed);
        mix_rng.set_stream(1);
        Ok(Trainer {
            model,
            config,
            centers,
            state,
            shuffle_rng,
            mix_rng,
            probe_gradient: false,
        })
    }

    /// Runs the gradient hook at `f` even when CC-loss is disabled.
    #[doc(hidden)]
    pub fn set_probe_gradient(&mut self, on: bool) {
        self.probe_gradient = on;
    }

    /// One update on a `[B, T, V]` batch.
    pub fn step(&mut self, x: &Tensor, labels: &[u8]) -> Result<StepReport> {
        if labels.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let iteration = self.state.iteration;
        let toggles = self.config.losses;
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let model = &self.model;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let xv = tape.constant(x.clone())?;

        // forward, with PatchUp on a second branch when sampled
        let feats = model.features(&mut tape, &bound, xv)?;
        let prob = model.head(&mut tape, &bound, feats.seq)?;
        let site = if toggles.patchup {
            draw_site(&self.config.patchup, &mut self.mix_rng)
        } else {
            None
        };
        let mixed = match site {
            Some(MixSite::PseudoSequence) => {
                let out = apply_patchup(&mut tape, feats.seq, &y, &self.config.patchup, MixSite::PseudoSequence, &mut self.mix_rng)?;
                let p = model.head(&mut tape, &bound, out.mixed)?;
                Some((out, p))
            }
            Some(MixSite::FeatureMap) => {
                let out = apply_patchup(&mut tape, feats.map, &y, &self.config.patchup, MixSite::FeatureMap, &mut self.mix_rng)?;
                let f2 = model.features_from_map(&mut tape, &bound, feats.extractor, out.mixed)?;
                let p = model.head(&mut tape, &bound, f2.seq)?;
                Some((out, p))
            }
            None => None,
        };

        if toggles.cc {
            self.centers.update(tape.value(feats.f), labels, iteration)?;
        }
        let clip = clip_bce(&mut tape, prob, &y)?;

        let mut cc = None;
        if toggles.cc || self.probe_gradient {
            tape.backward_to(clip, feats.f)?;
            let raw = tape.grad(feats.f).unwrap_or_else(|| Tensor::zeros(tape.shape(feats.f)));
            if toggles.cc {
                let attention = attention_from_gradient(&raw)?;
                cc = Some(cc_loss(&mut tape, feats.f, labels, &self.centers, &attention, self.config.cc_reduction)?);
            }
        }
        let patchup = match &mixed {
            Some((out, p)) => Some(patchup_loss(&mut tape, *p, &y, &out.second_targets, out.pu)?),
            None => None,
        };

        tape.clear_grad();
        let parts = LossParts {
            clip_bce: toggles.clip_bce.then_some(clip),
            patchup,
            cc,
        };
        let (total, losses) = total_loss(&mut tape, &parts).map_err(|e| match e {
            LossError::NonFinite { part, value } => TrainError::NonFinite { iteration, part, value },
            e => e.into(),
        })?;
        if !losses.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                part: "total",
                value: losses.total,
            });
        }
        tape.backward(total)?;

        let grads: Vec<Option<&[f64]>> = bound.vars.iter().map(|&v| tape.grad_data(v)).collect();
        self.state.apply(&self.config.optimizer, self.model.params.entries_mut(), &grads);
        Ok(StepReport {
            iteration,
            losses,
            mixed_at: site,
        })
    }

    /// One pass over `x` (`[N, T, V]`) in shuffled mini-batches.
    pub fn epoch(&mut self, x: &Tensor, labels: &[u8], epoch: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let n = labels.len();
        if n == 0 || x.shape().first() != Some(&n) {
            return Err(TrainError::EmptyBatch);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        for chunk in order.chunks(self.config.batch_size) {
            let (bx, by) = gather(x, labels, chunk)?;
            let r = self.step(&bx, &by)?;
            on_step(&StepRecord {
                iteration: r.iteration,
                epoch,
                clip_bce: r.losses.clip_bce,
                patchup: r.losses.patchup,
                cc: r.losses.cc,
                total: r.losses.total,
            });
        }
        Ok(())
    }

    pub fn fit(&mut self, x: &Tensor, labels: &[u8], mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        for e in 0..self.config.epochs {
            self.epoch(x, labels, e, &mut on_step)?;
        }
        Ok(())
    }
}

/// Rows `idx` of a `[N, ...]` tensor with their labels.
pub fn gather(x: &Tensor, labels: &[u8], idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| labels[i]).collect()))
}
