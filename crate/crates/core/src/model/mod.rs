//! Hourly extractor → feature map → convolutional tokenizer → transformer
//! encoder → pseudo-sequence → output head.

mod network;
mod params;

pub use network::{Bound, Features, ForwardOutput, Model};
pub use params::{ParamEntry, ParamGroup, ParamStore};

use serde::{Deserialize, Serialize};

use crate::tensor::{window_out, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match [batch, {hours}, {vars}]")]
    Input { got: Vec<usize>, hours: usize, vars: usize },
    #[error("feature width {width} is not divisible into {hours} hours")]
    Indivisible { width: usize, hours: usize },
    #[error("parameter '{0}' not found")]
    UnknownParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One `MaxPool(ReLU(Conv2d(x)))` tokenizer stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_pad: usize,
}

/// How the encoder's token matrix becomes the feature vector `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePooling {
    /// Attention-weighted mean over tokens, then affine.
    Sequence,
    /// Flatten all tokens, then affine.
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    StageAdaptive,
    FullyConnected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hours: usize,
    /// Encoded variables per hour.
    pub input_dim: usize,
    pub extractor_width: usize,
    pub extractor_blocks: usize,
    /// Reconstructed feature map as `[channels, height, width]`.
    pub map_shape: [usize; 3],
    pub tokenizer: Vec<TokenizerStage>,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of each pseudo-sequence step; `f` has `hours * seq_dim` entries.
    pub seq_dim: usize,
    pub pooling: FeaturePooling,
    pub head: HeadKind,
    pub head_channels: usize,
    pub head_kernel: usize,
    pub head_layers: usize,
    pub freeze_tokenizer: bool,
    /// Multiplier on the initialization bound of the final logit layer.
    /// Small values start every prediction near 0.5; 0 starts exactly there.
    pub output_init_scale: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Keeps initial logits within about ±0.5, inside the clip band.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

impl ModelConfig {
    /// CCT-14/7x2 on 224×224 maps, 812 encoded variables, (24, 300) pseudo-sequence.
    ///
    /// The dense reconstruction layer alone has about 1.85e9 weights here
    /// (15 GB in f64), so instantiating this preset needs a large machine.
    pub fn paper() -> Self {
        let stage = |channels| TokenizerStage {
            channels,
            kernel: 7,
            stride: 2,
            pad: 3,
            pool_kernel: 3,
            pool_stride: 2,
            pool_pad: 1,
        };
        ModelConfig {
            hours: 24,
            input_dim: 812,
            extractor_width: 512,
            extractor_blocks: 8,
            map_shape: [3, 224, 224],
            tokenizer: vec![stage(64), stage(384)],
            depth: 14,
            embed_dim: 384,
            heads: 6,
            mlp_ratio: 3,
            seq_dim: 300,
            pooling: FeaturePooling::Sequence,
            head: HeadKind::StageAdaptive,
            head_channels: 64,
            head_kernel: 3,
            head_layers: 2,
            freeze_tokenizer: false,
            output_init_scale: OUTPUT_INIT_SCALE,
        }
    }

    /// Small enough to train ten folds in minutes on one CPU core.
    pub fn desk() -> Self {
        let stage = |channels| TokenizerStage {
            channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool_kernel: 2,
            pool_stride: 2,
            pool_pad: 0,
        };
        ModelConfig {
            hours: 24,
            input_dim: 64,
            extractor_width: 16,
            extractor_blocks: 2,
            map_shape: [3, 32, 32],
            tokenizer: vec![stage(8), stage(64)],
            depth: 2,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            seq_dim: 8,
            pooling: FeaturePooling::Sequence,
            head: HeadKind::StageAdaptive,
            head_channels: 16,
            head_kernel: 3,
            head_layers: 2,
            freeze_tokenizer: false,
            output_init_scale: OUTPUT_INIT_SCALE,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.hours * self.seq_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    /// Spatial extent after every tokenizer stage, as `(height, width)`.
    pub fn tokenizer_extents(&self) -> Result<Vec<(usize, usize)>> {
        let [_, mut h, mut w] = self.map_shape;
        let mut out = Vec::with_capacity(self.tokenizer.len());
        for (i, s) in self.tokenizer.iter().enumerate() {
            let (h0, w0) = (h, w);
            let fail = || ModelError::Config(format!("tokenizer stage {i}: {h0}x{w0} map smaller than kernel/pool footprint"));
            if 2 * s.pool_pad > s.pool_kernel {
                return Err(ModelError::Config(format!("tokenizer stage {i}: pool padding exceeds half the pool window")));
            }
            h = window_out(h, s.kernel, s.stride, s.pad).ok_or_else(fail)?;
            w = window_out(w, s.kernel, s.stride, s.pad).ok_or_else(fail)?;
            h = window_out(h, s.pool_kernel, s.pool_stride, s.pool_pad).ok_or_else(fail)?;
            w = window_out(w, s.pool_kernel, s.pool_stride, s.pool_pad).ok_or_else(fail)?;
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn n_tokens(&self) -> Result<usize> {
        let ext = self.tokenizer_extents()?;
        Ok(ext.last().map(|&(h, w)| h * w).unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        let positive = [
            ("hours", self.hours),
            ("input_dim", self.input_dim),
            ("extractor_width", self.extractor_width),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("seq_dim", self.seq_dim),
            ("head_channels", self.head_channels),
            ("head_kernel", self.head_kernel),
            ("head_layers", self.head_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.map_shape.contains(&0) {
            return fail("map_shape extents must be positive");
        }
        if self.tokenizer.is_empty() {
            return fail("at least one tokenizer stage is required");
        }
        if self.tokenizer.iter().any(|s| s.channels == 0 || s.kernel == 0 || s.stride == 0 || s.pool_kernel == 0 || s.pool_stride == 0) {
            return fail("tokenizer channels, kernels and strides must be positive");
        }
        if self.tokenizer.last().map(|s| s.channels) != Some(self.embed_dim) {
            return fail("the last tokenizer stage must output embed_dim channels");
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail("embed_dim must be divisible by heads");
        }
        if self.head == HeadKind::StageAdaptive && self.hours < 2 {
            return fail("the stage-adaptive head needs at least two hours");
        }
        if !(self.output_init_scale >= 0.0 && self.output_init_scale.is_finite()) {
            return fail("output_init_scale must be finite and >= 0");
        }
        self.tokenizer_extents()?;
        Ok(())
    }

    /// Activation shapes along the forward chain, excluding the batch axis.
    pub fn shape_ledger(&self) -> Result<ShapeLedger> {
        self.validate()?;
        let n = self.n_tokens()?;
        Ok(ShapeLedger {
            input: [self.hours, self.input_dim],
            extractor: [self.hours, self.extractor_width],
            map: self.map_shape,
            tokens: [n, self.embed_dim],
            feature: self.feature_width(),
            pseudo_sequence: [self.hours, self.seq_dim],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeLedger {
    pub input: [usize; 2],
    pub extractor: [usize; 2],
    pub map: [usize; 3],
    pub tokens: [usize; 2],
    pub feature: usize,
    pub pseudo_sequence: [usize; 2],
}
