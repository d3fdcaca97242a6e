use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadKind, ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Reconstruct,
    Tokenizer,
    Encoder,
    Pooling,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in a fixed creation order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.position(name)?].value)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            group,
            value,
            trainable: true,
        });
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.trainable = trainable;
        }
    }

    /// Replaces values by name; every stored parameter must be supplied with its exact shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let i = self.position(name)?;
            let expected = self.entries[i].value.shape();
            if t.shape() != expected {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    got: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::UnknownParam(format!("{} (missing from input)", self.entries[i].name)));
        }
        for (name, t) in tensors {
            let i = self.index[name];
            self.entries[i].value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    /// He-uniform: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    fn uniform(&mut self, name: String, group: ParamGroup, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.store.push(name, group, t);
    }

    fn constant(&mut self, name: String, group: ParamGroup, shape: &[usize], value: f64) {
        self.store.push(name, group, Tensor::full(shape, value));
    }

    /// He-uniform weights with the bound multiplied by `scale`; zero biases.
    fn linear_scaled(&mut self, prefix: &str, group: ParamGroup, inp: usize, out: usize, scale: f64) {
        if scale == 0.0 {
            self.constant(format!("{prefix}.weight"), group, &[inp, out], 0.0);
        } else {
            let bound = scale * (6.0 / inp as f64).sqrt();
            let rng = &mut self.rng;
            let t = Tensor::from_fn(&[inp, out], |_| rng.random_range(-bound..bound));
            self.store.push(format!("{prefix}.weight"), group, t);
        }
        self.constant(format!("{prefix}.bias"), group, &[out], 0.0);
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, inp: usize, out: usize) {
        self.linear_scaled(prefix, group, inp, out, 1.0);
    }

    fn norm(&mut self, prefix: &str, group: ParamGroup, dim: usize) {
        self.constant(format!("{prefix}.gamma"), group, &[dim], 1.0);
        self.constant(format!("{prefix}.beta"), group, &[dim], 0.0);
    }
}

/// Creates every parameter of `cfg` deterministically from `seed`.
pub(super) fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    use ParamGroup::*;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store: ParamStore::default(),
    };
    let w = cfg.extractor_width;
    init.linear("extractor.input", Extractor, cfg.input_dim, w);
    for b in 0..cfg.extractor_blocks {
        init.linear(&format!("extractor.block{b}.fc1"), Extractor, w, w);
        init.norm(&format!("extractor.block{b}.norm"), Extractor, w);
        init.linear(&format!("extractor.block{b}.fc2"), Extractor, w, w);
    }

    let [c, h, wd] = cfg.map_shape;
    init.linear("reconstruct", Reconstruct, cfg.hours * w, c * h * wd);

    let mut in_ch = c;
    for (i, s) in cfg.tokenizer.iter().enumerate() {
        let fan_in = in_ch * s.kernel * s.kernel;
        init.uniform(format!("tokenizer.conv{i}.weight"), Tokenizer, &[s.channels, in_ch, s.kernel, s.kernel], fan_in);
        init.constant(format!("tokenizer.conv{i}.bias"), Tokenizer, &[s.channels], 0.0);
        in_ch = s.channels;
    }
    let d = cfg.embed_dim;
    let n = cfg.n_tokens().expect("validated config");
    init.uniform("tokenizer.pos_embed".into(), Tokenizer, &[1, n, d], d);

    for l in 0..cfg.depth {
        let p = format!("encoder.layer{l}");
        init.norm(&format!("{p}.norm1"), Encoder, d);
        init.linear(&format!("{p}.qkv"), Encoder, d, 3 * d);
        init.linear(&format!("{p}.proj"), Encoder, d, d);
        init.norm(&format!("{p}.norm2"), Encoder, d);
        init.linear(&format!("{p}.mlp1"), Encoder, d, d * cfg.mlp_ratio);
        init.linear(&format!("{p}.mlp2"), Encoder, d * cfg.mlp_ratio, d);
    }
    init.norm("encoder.norm", Encoder, d);

    let pooled = match cfg.pooling {
        super::FeaturePooling::Sequence => {
            init.linear("pooling.score", Pooling, d, 1);
            d
        }
        super::FeaturePooling::Flatten => n * d,
    };
    init.linear("pooling.fc", Pooling, pooled, cfg.feature_width());

    match cfg.head {
        HeadKind::StageAdaptive => {
            let mut ch = cfg.seq_dim;
            for l in 0..cfg.head_layers {
                let fan_in = ch * cfg.head_kernel;
                init.uniform(format!("head.conv{l}.weight"), Head, &[cfg.head_channels, ch, cfg.head_kernel], fan_in);
                init.constant(format!("head.conv{l}.bias"), Head, &[cfg.head_channels], 0.0);
                ch = cfg.head_channels;
            }
            init.linear("head.gate", Head, cfg.seq_dim, cfg.head_channels);
            init.linear_scaled("head.out", Head, cfg.head_channels, 1, cfg.output_init_scale);
        }
        HeadKind::FullyConnected => {
            init.linear_scaled("head.out", Head, cfg.feature_width(), 1, cfg.output_init_scale);
        }
    }
    let mut store = init.store;
    if cfg.freeze_tokenizer {
        store.set_group_trainable(Tokenizer, false);
    }
    store
}
