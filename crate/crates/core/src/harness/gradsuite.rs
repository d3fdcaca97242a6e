//! Finite-difference checks over every op kind, each loss and the whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss::{cc_loss, clip_bce, total_loss, CcReduction, ClassCenters, LossParts};
use crate::mix::{patchup_hard, patchup_loss, patchup_soft, sample_block_mask};
use crate::model::{Bound, Model, ModelConfig, ModelError};
use crate::tensor::{grad_check, GradCheckOptions, OpKind, Tape, Tensor, TensorError, Var};

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub step: f64,
    pub threshold: f64,
    /// Coordinates sampled per parameter tensor of the end-to-end model.
    pub model_coords: usize,
    pub model: ModelConfig,
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            step: 1e-5,
            threshold: 1e-4,
            model_coords: 1,
            model: ModelConfig::desk(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    /// Input or parameter holding the largest error.
    pub worst: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub threshold: f64,
    pub step: f64,
    pub cases: Vec<CaseResult>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.pass)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1)` so that kinks at zero are not straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar through fixed random weights, so that every
/// output coordinate contributes a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> crate::tensor::Result<Var> {
    let w = tape.constant(weights.reshape(tape.shape(y))?)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<(String, Tensor)>, CaseFn) {
    let pt = |name: &str, t: Tensor| (name.to_string(), t);
    macro_rules! case {
        ($points:expr, $out:expr, |$t:ident, $v:ident| $body:expr) => {{
            let weights = uniform(rng, &[$out], -1.0, 1.0);
            let f: CaseFn = Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body?;
                project($t, y, &weights)
            });
            ($points, f)
        }};
    }
    match kind {
        OpKind::Add => case!(vec![pt("a", uniform(rng, &[3, 4], -1.0, 1.0)), pt("b", uniform(rng, &[3, 4], -1.0, 1.0))], 12, |t, v| t.add(v[0], v[1])),
        OpKind::Sub => case!(vec![pt("a", uniform(rng, &[3, 4], -1.0, 1.0)), pt("b", uniform(rng, &[3, 4], -1.0, 1.0))], 12, |t, v| t.sub(v[0], v[1])),
        OpKind::Mul => case!(vec![pt("a", uniform(rng, &[3, 4], -1.0, 1.0)), pt("b", uniform(rng, &[3, 4], -1.0, 1.0))], 12, |t, v| t.mul(v[0], v[1])),
        OpKind::AddScalar => case!(vec![pt("x", uniform(rng, &[5], -1.0, 1.0))], 5, |t, v| t.add_scalar(v[0], 0.7)),
        OpKind::MulScalar => case!(vec![pt("x", uniform(rng, &[5], -1.0, 1.0))], 5, |t, v| t.mul_scalar(v[0], -1.3)),
        OpKind::Relu => case!(vec![pt("x", off_zero(rng, &[4, 5]))], 20, |t, v| t.relu(v[0])),
        OpKind::Sigmoid => case!(vec![pt("x", uniform(rng, &[4, 5], -3.0, 3.0))], 20, |t, v| t.sigmoid(v[0])),
        OpKind::Log => case!(vec![pt("x", uniform(rng, &[4, 5], 0.5, 2.0))], 20, |t, v| t.log(v[0])),
        OpKind::Abs => case!(vec![pt("x", off_zero(rng, &[4, 5]))], 20, |t, v| t.abs(v[0])),
        OpKind::Clamp => case!(vec![pt("x", uniform(rng, &[4, 5], -1.0, 1.0))], 20, |t, v| t.clamp(v[0], -0.5, 0.5)),
        OpKind::Linear => case!(
            vec![pt("x", uniform(rng, &[2, 3, 4], -1.0, 1.0)), pt("w", uniform(rng, &[4, 5], -1.0, 1.0)), pt("b", uniform(rng, &[5], -1.0, 1.0))],
            30,
            |t, v| t.linear(v[0], v[1], Some(v[2]))
        ),
        OpKind::Matmul => {
            let points = vec![
                pt("a", uniform(rng, &[3, 4], -1.0, 1.0)),
                pt("b", uniform(rng, &[4, 2], -1.0, 1.0)),
                pt("a3", uniform(rng, &[2, 3, 4], -1.0, 1.0)),
                pt("b3", uniform(rng, &[2, 4, 2], -1.0, 1.0)),
            ];
            let w2 = uniform(rng, &[6], -1.0, 1.0);
            let w3 = uniform(rng, &[12], -1.0, 1.0);
            let f: CaseFn = Box::new(move |t, v| {
                let m2 = t.matmul(v[0], v[1])?;
                let m3 = t.matmul(v[2], v[3])?;
                let a = project(t, m2, &w2)?;
                let b = project(t, m3, &w3)?;
                t.add(a, b)
            });
            (points, f)
        }
        OpKind::Reshape => case!(vec![pt("x", uniform(rng, &[2, 6], -1.0, 1.0))], 12, |t, v| {
            let r = t.reshape(v[0], &[3, 4])?;
            t.mul(r, r)
        }),
        OpKind::Permute => case!(vec![pt("x", uniform(rng, &[2, 3, 4], -1.0, 1.0))], 24, |t, v| t.permute(v[0], &[2, 0, 1])),
        OpKind::Expand => case!(vec![pt("x", uniform(rng, &[1, 3, 1], -1.0, 1.0))], 24, |t, v| t.expand(v[0], &[2, 3, 4])),
        OpKind::IndexSelect => case!(vec![pt("x", uniform(rng, &[3, 4], -1.0, 1.0))], 16, |t, v| t.index_select(v[0], &[2, 0, 2, 1])),
        OpKind::Slice => case!(vec![pt("x", uniform(rng, &[3, 5, 2], -1.0, 1.0))], 12, |t, v| t.slice(v[0], 1, 1, 2)),
        OpKind::Concat => case!(
            vec![pt("a", uniform(rng, &[2, 3], -1.0, 1.0)), pt("b", uniform(rng, &[2, 2], -1.0, 1.0))],
            10,
            |t, v| t.concat(&[v[0], v[1]], 1)
        ),
        OpKind::Sum => case!(vec![pt("x", uniform(rng, &[3, 4], -1.0, 1.0))], 1, |t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        }),
        OpKind::Mean => case!(vec![pt("x", uniform(rng, &[3, 4], -1.0, 1.0))], 1, |t, v| {
            let s = t.mean(v[0])?;
            t.mul(s, s)
        }),
        OpKind::SumAxis => case!(vec![pt("x", uniform(rng, &[2, 3, 4], -1.0, 1.0))], 8, |t, v| t.sum_axis(v[0], 1)),
        OpKind::MaxAxis => case!(vec![pt("x", uniform(rng, &[3, 5, 2], -1.0, 1.0))], 6, |t, v| t.max_axis(v[0], 1)),
        OpKind::Softmax => case!(vec![pt("x", uniform(rng, &[3, 5], -2.0, 2.0))], 15, |t, v| t.softmax(v[0])),
        OpKind::LayerNorm => case!(
            vec![pt("x", uniform(rng, &[3, 6], -2.0, 2.0)), pt("gamma", uniform(rng, &[6], 0.5, 1.5)), pt("beta", uniform(rng, &[6], -0.5, 0.5))],
            18,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
        ),
        OpKind::Conv2d => case!(
            vec![pt("x", uniform(rng, &[2, 2, 5, 5], -1.0, 1.0)), pt("w", uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)), pt("b", uniform(rng, &[3], -1.0, 1.0))],
            54,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        ),
        OpKind::MaxPool2d => case!(vec![pt("x", uniform(rng, &[2, 2, 6, 6], -1.0, 1.0))], 36, |t, v| t.max_pool2d(v[0], 3, 2, 1)),
        OpKind::Conv1d => case!(
            vec![pt("x", uniform(rng, &[2, 3, 6], -1.0, 1.0)), pt("w", uniform(rng, &[4, 3, 3], -1.0, 1.0)), pt("b", uniform(rng, &[4], -1.0, 1.0))],
            48,
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 0)
        ),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    y[0] = 0;
    y[n - 1] = 1;
    y
}

const LOSS_CASES: [&str; 5] = ["clip_bce", "patchup_loss", "cc_loss", "patchup_soft", "patchup_hard"];

/// Cases in the order of [`LOSS_CASES`].
fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<(Vec<(String, Tensor)>, CaseFn)> {
    let mut out: Vec<(Vec<(String, Tensor)>, CaseFn)> = Vec::new();

    // probabilities on both sides of the band, away from its edges
    let pred = Tensor::from_fn(&[8], |i| match i % 3 {
        0 => rng.random_range(0.28..0.72),
        1 => rng.random_range(0.05..0.22),
        _ => rng.random_range(0.78..0.95),
    });
    let y: Vec<f64> = labels(rng, 8).into_iter().map(f64::from).collect();
    out.push((vec![("pred".into(), pred)], Box::new(move |t, v| lossy(clip_bce(t, v[0], &y)))));

    let pred = uniform(rng, &[6], 0.1, 0.9);
    let yi: Vec<f64> = labels(rng, 6).into_iter().map(f64::from).collect();
    let big_y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    let pu = rng.random_range(0.05..0.95);
    out.push((
        vec![("pred".into(), pred)],
        Box::new(move |t, v| mixy(patchup_loss(t, v[0], &yi, &big_y, pu))),
    ));

    let (n, w) = (6, 5);
    let f = uniform(rng, &[n, w], -1.0, 1.0);
    let y = labels(rng, n);
    let mut centers = ClassCenters::new(w, 0);
    let seed_feats = uniform(rng, &[n, w], -1.0, 1.0);
    centers.update(&seed_feats, &y, 0).expect("shapes agree");
    let attention = uniform(rng, &[n, w], 0.0, 1.0);
    out.push((
        vec![("f".into(), f)],
        Box::new(move |t, v| lossy(cc_loss(t, v[0], &y, &centers, &attention, CcReduction::Sum))),
    ));

    let shape = [2, 3, 4];
    let mask = sample_block_mask(&shape, 0.5, 1, rng).expect("valid mask");
    let lambda = rng.random_range(0.0..1.0);
    let weights = uniform(rng, &[24], -1.0, 1.0);
    let points = vec![("gi".into(), uniform(rng, &shape, -1.0, 1.0)), ("gj".into(), uniform(rng, &shape, -1.0, 1.0))];
    let (m2, w2) = (mask.clone(), weights.clone());
    out.push((
        points.clone(),
        Box::new(move |t, v| {
            let y = mixy(patchup_soft(t, v[0], v[1], &m2, lambda))?;
            project(t, y, &w2)
        }),
    ));
    out.push((
        points,
        Box::new(move |t, v| {
            let y = mixy(patchup_hard(t, v[0], v[1], &mask))?;
            project(t, y, &weights)
        }),
    ));
    out
}

fn lossy(r: crate::loss::Result<Var>) -> crate::tensor::Result<Var> {
    r.map_err(|e| match e {
        crate::loss::LossError::Tensor(t) => t,
        e => TensorError::InvalidAttr {
            op: "loss",
            detail: e.to_string(),
        },
    })
}

fn mixy(r: crate::mix::Result<Var>) -> crate::tensor::Result<Var> {
    r.map_err(|e| match e {
        crate::mix::MixError::Tensor(t) => t,
        e => TensorError::InvalidAttr {
            op: "mix",
            detail: e.to_string(),
        },
    })
}

fn modely<T>(r: Result<T, ModelError>) -> crate::tensor::Result<T> {
    r.map_err(|e| match e {
        ModelError::Tensor(t) => t,
        e => TensorError::InvalidAttr {
            op: "model",
            detail: e.to_string(),
        },
    })
}

/// The full training objective with the centers, CC weights, pairing and mask
/// held fixed, so only the parameters move.
fn model_case(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<(String, Tensor)>, CaseFn), ModelError> {
    let mut model = Model::new(cfg.clone(), rng.random())?;
    // a random output layer keeps the logits away from zero
    for e in model.params.entries_mut() {
        if e.name.starts_with("head.out") {
            e.value = uniform(rng, e.value.shape(), -0.5, 0.5);
        }
    }
    let points = model.params.named();
    let batch = 2;
    let x = uniform(rng, &[batch, cfg.hours, cfg.input_dim], -2.0, 2.0);
    let labels = vec![0u8, 1];
    let y = vec![0.0, 1.0];
    let width = cfg.feature_width();
    let mut centers = ClassCenters::new(width, 0);
    centers.update(&uniform(rng, &[batch, width], -1.0, 1.0), &labels, 0).expect("shapes agree");
    let attention = uniform(rng, &[batch, width], 0.0, 1.0);
    let seq_shape = [batch, cfg.hours, cfg.seq_dim];
    let mask = sample_block_mask(&seq_shape, 0.75, 1, rng).expect("valid mask");
    let lambda = rng.random_range(0.0..1.0);
    let partner = vec![1usize, 0];
    let big_y: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
    let pu = mask.pu();
    let f: CaseFn = Box::new(move |t, v| {
        let b = Bound { vars: v.to_vec() };
        let xv = t.constant(x.clone())?;
        let feats = modely(model.features(t, &b, xv))?;
        let prob = modely(model.head(t, &b, feats.seq))?;
        let gj = t.index_select(feats.seq, &partner)?;
        let mixed = mixy(patchup_soft(t, feats.seq, gj, &mask, lambda))?;
        let mixed_prob = modely(model.head(t, &b, mixed))?;
        let parts = LossParts {
            clip_bce: Some(lossy(clip_bce(t, prob, &y))?),
            patchup: Some(mixy(patchup_loss(t, mixed_prob, &y, &big_y, pu))?),
            cc: Some(lossy(cc_loss(t, feats.f, &labels, &centers, &attention, CcReduction::default()))?),
        };
        lossy(total_loss(t, &parts).map(|(total, _)| total))
    });
    Ok((points, f))
}

fn run_case(name: &str, seeds: usize, opts: &SuiteOptions, max_coords: Option<usize>, mut build: impl FnMut(&mut ChaCha8Rng) -> crate::tensor::Result<(Vec<(String, Tensor)>, CaseFn)>) -> crate::tensor::Result<CaseResult> {
    let mut res = CaseResult {
        name: name.to_string(),
        seeds,
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        pass: true,
    };
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (points, f) = build(&mut rng)?;
        let gopts = GradCheckOptions {
            step: opts.step,
            threshold: opts.threshold,
            max_coords,
            seed: s,
            fault: opts.fault,
            ..GradCheckOptions::default()
        };
        let report = grad_check(f, &points, &gopts)?;
        for p in &report.params {
            res.checked += p.checked;
            res.skipped_nonsmooth += p.skipped_nonsmooth;
            if res.worst.is_empty() || p.max_rel_err > res.max_rel_err {
                res.max_rel_err = p.max_rel_err;
                res.worst = format!("{} (seed {s})", p.name);
            }
        }
        res.pass &= report.pass;
    }
    Ok(res)
}

/// Every differentiable op kind, the three losses, both PatchUp mixes and
/// the end-to-end model under the full objective, each over `opts.seeds` random draws.
pub fn run_suite(opts: &SuiteOptions) -> crate::tensor::Result<SuiteReport> {
    let mut cases = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        cases.push(run_case(kind.name(), opts.seeds, opts, None, |rng| Ok(op_case(kind, rng)))?);
    }
    for (k, name) in LOSS_CASES.into_iter().enumerate() {
        cases.push(run_case(name, opts.seeds, opts, None, |rng| Ok(loss_cases(rng).swap_remove(k)))?);
    }
    let cfg = opts.model.clone();
    cases.push(run_case("model", opts.seeds, opts, Some(opts.model_coords), |rng| modely(model_case(&cfg, rng)))?);
    let pass = cases.iter().all(|c| c.pass);
    Ok(SuiteReport {
        threshold: opts.threshold,
        step: opts.step,
        cases,
        pass,
    })
}
