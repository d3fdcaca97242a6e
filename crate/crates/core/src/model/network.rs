use super::params::init_params;
use super::{FeaturePooling, HeadKind, ModelConfig, ModelError, ParamStore, Result, LAYER_NORM_EPS};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Parameter handles on one tape, aligned with [`ParamStore::entries`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Intermediate activations up to the pseudo-sequence.
#[derive(Clone, Debug)]
pub struct Features {
    pub extractor: Var,
    pub map: Var,
    pub tokens: Var,
    /// Softmax attention of every encoder layer, `[batch * heads, n, n]`.
    pub attention: Vec<Var>,
    /// Final affine output of the encoder, `[batch, hours * seq_dim]`.
    pub f: Var,
    /// `[batch, hours, seq_dim]`.
    pub seq: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Features,
    /// `[batch]` probabilities.
    pub prob: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params })
    }

    /// Records every parameter as a leaf; frozen ones do not require gradients.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .entries()
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Bound { vars })
    }

    fn p(&self, b: &Bound, name: &str) -> Result<Var> {
        Ok(b.vars[self.params.position(name)?])
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(b, &format!("{prefix}.weight"))?;
        let bias = self.p(b, &format!("{prefix}.bias"))?;
        Ok(tape.linear(x, w, Some(bias))?)
    }

    fn norm(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(b, &format!("{prefix}.gamma"))?;
        let beta = self.p(b, &format!("{prefix}.beta"))?;
        Ok(tape.layer_norm(x, g, beta, LAYER_NORM_EPS)?)
    }

    /// Per-hour residual extractor with shared weights: `[B, T, V] -> [B, T, width]`.
    pub fn extract(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != cfg.hours || s[2] != cfg.input_dim {
            return Err(ModelError::Input {
                got: s.to_vec(),
                hours: cfg.hours,
                vars: cfg.input_dim,
            });
        }
        let mut h = self.linear(tape, b, x, "extractor.input")?;
        for blk in 0..cfg.extractor_blocks {
            let p = format!("extractor.block{blk}");
            let a = self.linear(tape, b, h, &format!("{p}.fc1"))?;
            let a = self.norm(tape, b, a, &format!("{p}.norm"))?;
            let a = tape.relu(a)?;
            let a = self.linear(tape, b, a, &format!("{p}.fc2"))?;
            h = tape.add(h, a)?;
        }
        Ok(h)
    }

    /// Concatenates hours in order and maps them to `[B, C, H, W]`.
    pub fn reconstruct(&self, tape: &mut Tape, b: &Bound, o: Var) -> Result<Var> {
        let batch = tape.shape(o)[0];
        let cfg = &self.config;
        let flat = tape.reshape(o, &[batch, cfg.hours * cfg.extractor_width])?;
        let m = self.linear(tape, b, flat, "reconstruct")?;
        let [c, h, w] = cfg.map_shape;
        Ok(tape.reshape(m, &[batch, c, h, w])?)
    }

    /// Convolutional tokenizer plus positional embedding: `[B, C, H, W] -> [B, n, d]`.
    pub fn tokenize(&self, tape: &mut Tape, b: &Bound, map: Var) -> Result<Var> {
        let mut x = map;
        for (i, s) in self.config.tokenizer.iter().enumerate() {
            let w = self.p(b, &format!("tokenizer.conv{i}.weight"))?;
            let bias = self.p(b, &format!("tokenizer.conv{i}.bias"))?;
            x = tape.conv2d(x, w, Some(bias), s.stride, s.pad)?;
            x = tape.relu(x)?;
            x = tape.max_pool2d(x, s.pool_kernel, s.pool_stride, s.pool_pad)?;
        }
        let s = tape.shape(x).to_vec();
        let (batch, d, n) = (s[0], s[1], s[2] * s[3]);
        let x = tape.reshape(x, &[batch, d, n])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let pos = self.p(b, "tokenizer.pos_embed")?;
        let pos = tape.expand(pos, &[batch, n, d])?;
        Ok(tape.add(x, pos)?)
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, n: usize) -> Result<Var> {
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let x = tape.reshape(x, &[batch, n, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[batch * h, n, dh])?)
    }

    /// Pre-norm encoder, final norm, pooling and affine to `f`.
    /// Returns `f` and the attention matrices.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let s = tape.shape(tokens).to_vec();
        let (batch, n, d) = (s[0], s[1], s[2]);
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let mut x = tokens;
        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("encoder.layer{l}");
            let a = self.norm(tape, b, x, &format!("{p}.norm1"))?;
            let qkv = self.linear(tape, b, a, &format!("{p}.qkv"))?;
            let q = tape.slice(qkv, 2, 0, d)?;
            let k = tape.slice(qkv, 2, d, d)?;
            let v = tape.slice(qkv, 2, 2 * d, d)?;
            let q = self.split_heads(tape, q, batch, n)?;
            let k = self.split_heads(tape, k, batch, n)?;
            let v = self.split_heads(tape, v, batch, n)?;
            let kt = tape.permute(k, &[0, 2, 1])?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores)?;
            attention.push(attn);
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.reshape(ctx, &[batch, heads, n, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, n, d])?;
            let out = self.linear(tape, b, ctx, &format!("{p}.proj"))?;
            x = tape.add(x, out)?;

            let m = self.norm(tape, b, x, &format!("{p}.norm2"))?;
            let m = self.linear(tape, b, m, &format!("{p}.mlp1"))?;
            let m = tape.relu(m)?;
            let m = self.linear(tape, b, m, &format!("{p}.mlp2"))?;
            x = tape.add(x, m)?;
        }
        let x = self.norm(tape, b, x, "encoder.norm")?;
        let pooled = match cfg.pooling {
            FeaturePooling::Sequence => {
                let score = self.linear(tape, b, x, "pooling.score")?;
                let score = tape.reshape(score, &[batch, 1, n])?;
                let weights = tape.softmax(score)?;
                let pooled = tape.matmul(weights, x)?;
                tape.reshape(pooled, &[batch, d])?
            }
            FeaturePooling::Flatten => tape.reshape(x, &[batch, n * d])?,
        };
        let f = self.linear(tape, b, pooled, "pooling.fc")?;
        Ok((f, attention))
    }

    /// Row-major reshape of `f` into `[B, hours, width / hours]`.
    pub fn to_pseudo_sequence(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let hours = self.config.hours;
        if s.len() != 2 || !s[1].is_multiple_of(hours) {
            return Err(ModelError::Indivisible {
                width: s.last().copied().unwrap_or(0),
                hours,
            });
        }
        Ok(tape.reshape(f, &[s[0], hours, s[1] / hours])?)
    }

    /// Everything after the feature map: tokenizer, encoder and reshape.
    pub fn features_from_map(&self, tape: &mut Tape, b: &Bound, extractor: Var, map: Var) -> Result<Features> {
        let tokens = self.tokenize(tape, b, map)?;
        let (f, attention) = self.encode(tape, b, tokens)?;
        let seq = self.to_pseudo_sequence(tape, f)?;
        Ok(Features {
            extractor,
            map,
            tokens,
            attention,
            f,
            seq,
        })
    }

    pub fn features(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Features> {
        let o = self.extract(tape, b, x)?;
        let map = self.reconstruct(tape, b, o)?;
        self.features_from_map(tape, b, o, map)
    }

    /// `[B, T, d]` pseudo-sequence to `[B]` probabilities.
    pub fn head(&self, tape: &mut Tape, b: &Bound, seq: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[1] != cfg.hours || s[2] != cfg.seq_dim {
            return Err(ModelError::Input {
                got: s,
                hours: cfg.hours,
                vars: cfg.seq_dim,
            });
        }
        let batch = s[0];
        let logit = match cfg.head {
            HeadKind::StageAdaptive => {
                // causal convolutions over p_1..p_{T-1}; z_t only enters through the gate
                let steps = cfg.hours - 1;
                let hist = tape.slice(seq, 1, 0, steps)?;
                let mut h = tape.permute(hist, &[0, 2, 1])?;
                for l in 0..cfg.head_layers {
                    let w = self.p(b, &format!("head.conv{l}.weight"))?;
                    let bias = self.p(b, &format!("head.conv{l}.bias"))?;
                    h = tape.conv1d(h, w, Some(bias), cfg.head_kernel - 1, 0)?;
                    h = tape.relu(h)?;
                }
                let z = tape.slice(seq, 1, steps, 1)?;
                let z = tape.reshape(z, &[batch, cfg.seq_dim])?;
                let gate = self.linear(tape, b, z, "head.gate")?;
                let gate = tape.sigmoid(gate)?;
                let gate = tape.reshape(gate, &[batch, cfg.head_channels, 1])?;
                let gate = tape.expand(gate, &[batch, cfg.head_channels, steps])?;
                let h = tape.mul(h, gate)?;
                let pooled = tape.max_axis(h, 2)?;
                self.linear(tape, b, pooled, "head.out")?
            }
            HeadKind::FullyConnected => {
                let flat = tape.reshape(seq, &[batch, cfg.feature_width()])?;
                self.linear(tape, b, flat, "head.out")?
            }
        };
        let prob = tape.sigmoid(logit)?;
        Ok(tape.reshape(prob, &[batch])?)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<ForwardOutput> {
        let features = self.features(tape, b, x)?;
        let prob = self.head(tape, b, features.seq)?;
        Ok(ForwardOutput { features, prob })
    }

    /// Probabilities for `[N, T, V]` inputs, evaluated in chunks without gradients.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(ModelError::Input {
                got: s.to_vec(),
                hours: self.config.hours,
                vars: self.config.input_dim,
            });
        }
        let n = s[0];
        let per = s[1] * s[2];
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let part = Tensor::new(vec![len, s[1], s[2]], x.data()[start * per..(start + len) * per].to_vec())?;
            let mut tape = Tape::new();
            let b = Bound {
                vars: self
                    .params
                    .entries()
                    .iter()
                    .map(|e| tape.constant(e.value.clone()))
                    .collect::<std::result::Result<_, _>>()?,
            };
            let xv = tape.constant(part)?;
            let out_v = self.forward(&mut tape, &b, xv)?;
            out.extend_from_slice(tape.value(out_v.prob).data());
            start += len;
        }
        Ok(out)
    }
}
