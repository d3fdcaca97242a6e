use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Conv2dGeom};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Relu,
    Sigmoid,
    Log,
    Abs,
    Clamp,
    Linear,
    Matmul,
    Reshape,
    Permute,
    Expand,
    IndexSelect,
    Slice,
    Concat,
    Sum,
    Mean,
    SumAxis,
    MaxAxis,
    Softmax,
    LayerNorm,
    Conv2d,
    MaxPool2d,
    Conv1d,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 27] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Clamp,
        OpKind::Linear,
        OpKind::Matmul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Expand,
        OpKind::IndexSelect,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MaxAxis,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::Conv1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Clamp => "clamp",
            OpKind::Linear => "linear",
            OpKind::Matmul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Expand => "expand",
            OpKind::IndexSelect => "index_select",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MaxAxis => "max_axis",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::Conv1d => "conv1d",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .into_iter()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Abs(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        map: Vec<usize>,
    },
    Expand {
        x: usize,
        map: Vec<usize>,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Conv2dGeom,
        batch: usize,
        filters: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        batch: usize,
        channels: usize,
        len: usize,
        filters: usize,
        kernel: usize,
        pad_left: usize,
        out_len: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::Abs(..) => OpKind::Abs,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Linear { .. } => OpKind::Linear,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Expand { .. } => OpKind::Expand,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Conv1d { .. } => OpKind::Conv1d,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in creation order and differentiates them in reverse.
///
/// A tape holds at most one set of gradients at a time: a second
/// [`Tape::backward`] fails with [`TensorError::BackwardTwice`] until
/// [`Tape::clear_grad`] is called.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    has_grads: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn bad_attr(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidAttr { op, detail }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            has_grads: false,
            fault: None,
        }
    }

    /// Test fixture: corrupts the backward rule of one op kind by scaling its
    /// upstream gradient by 1.5.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        let mut t = Self::new();
        t.fault = Some(kind);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::DetachedTape);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.value(v);
        self.nodes[v.idx].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.value(v);
        self.nodes[v.idx].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.kind().name(),
                what: "output",
            });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: "leaf",
                what: "input",
            });
        }
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- element-wise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        self.push(mk(ia, ib), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, mk: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&t| f(t)).collect())?;
        let rg = self.rg(&[ix]);
        self.push(mk(ix), value, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |t| t + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |t| t * c, |i| Op::MulScalar(i, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |t| if t > 0.0 { t } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        if self.nodes[ix].value.data().iter().any(|&t| t <= 0.0) {
            return Err(TensorError::NonFinite {
                op: "log",
                what: "input (non-positive argument)",
            });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(bad_attr("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(x, |t| t.clamp(lo, hi), |i| Op::Clamp { x: i, lo, hi })
    }

    // ---- linear algebra ------------------------------------------------

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(w)?);
        let ib = b.map(|b| self.index(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(mismatch(
                "linear",
                format!("input {xs:?} against weight {ws:?}"),
            ));
        }
        let (inp, out) = (ws[0], ws[1]);
        if let Some(ib) = ib {
            let bs = self.nodes[ib].value.shape();
            if bs != [out] {
                return Err(mismatch("linear", format!("bias {bs:?}, expected [{out}]")));
            }
        }
        let rows = self.nodes[ix].value.numel() / inp;
        let mut data = vec![0.0; rows * out];
        kernels::gemm(
            rows,
            inp,
            out,
            self.nodes[ix].value.data(),
            false,
            self.nodes[iw].value.data(),
            false,
            &mut data,
            0.0,
        );
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            for row in data.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out;
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        self.push(
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
                rows,
                inp,
                out,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    /// `[m,k]·[k,n]` or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        let (batch, m, k, n, shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut data = vec![0.0; batch * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for s in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[s * m * k..(s + 1) * m * k],
                false,
                &db[s * k * n..(s + 1) * k * n],
                false,
                &mut data[s * m * n..(s + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[ia, ib]);
        self.push(
            Op::Matmul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let value = v
            .reshape(shape)
            .map_err(|_| mismatch("reshape", format!("{:?} -> {shape:?}", v.shape())))?;
        let rg = self.rg(&[ix]);
        self.push(Op::Reshape(ix), value, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(bad_attr("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let map = kernels::permute_map(&shape, axes);
        let src = self.nodes[ix].value.data();
        let data = map.iter().map(|&o| src[o]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[ix]);
        self.push(Op::Permute { x: ix, map }, Tensor::new(out_shape, data)?, rg)
    }

    /// Repeats along axes where `x` has extent 1. Ranks must match.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let xs = self.nodes[ix].value.shape().to_vec();
        if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(mismatch("expand", format!("{xs:?} -> {shape:?}")));
        }
        let map = kernels::expand_map(&xs, shape);
        let src = self.nodes[ix].value.data();
        let data = map.iter().map(|&o| src[o]).collect();
        let rg = self.rg(&[ix]);
        self.push(Op::Expand { x: ix, map }, Tensor::new(shape.to_vec(), data)?, rg)
    }

    /// Gathers rows of the leading axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let xs = self.nodes[ix].value.shape().to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= xs[0]) {
            return Err(bad_attr("index_select", format!("indices {indices:?} for leading extent {}", xs[0])));
        }
        let inner: usize = xs[1..].iter().product();
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = xs.clone();
        shape[0] = indices.len();
        let rg = self.rg(&[ix]);
        self.push(
            Op::IndexSelect {
                x: ix,
                indices: indices.to_vec(),
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xs = self.nodes[ix].value.shape().to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(bad_attr("slice", format!("axis {axis} [{start}, {start}+{len}) of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let axis_len = xs[axis];
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(&[ix]);
        self.push(
            Op::Slice {
                x: ix,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(bad_attr("concat", "no inputs".into()));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.index(v)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(bad_attr("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut lens = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &l) in idx.iter().zip(&lens) {
                let src = self.nodes[i].value.data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(&idx);
        self.push(
            Op::Concat {
                xs: idx,
                outer,
                inner,
                lens,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let s: f64 = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(&[ix]);
        self.push(Op::Sum(ix), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[ix]);
        self.push(Op::Mean(ix), Tensor::scalar(s), rg)
    }

    fn axis_split(&self, ix: usize, axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let xs = self.nodes[ix].value.shape();
        if axis >= xs.len() {
            return Err(bad_attr(op, format!("axis {axis} for shape {xs:?}")));
        }
        let outer = xs[..axis].iter().product();
        let inner = xs[axis + 1..].iter().product();
        let mut shape: Vec<usize> = xs[..axis].iter().chain(&xs[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((outer, xs[axis], inner, shape))
    }

    /// Sums out `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let (outer, axis_len, inner, shape) = self.axis_split(ix, axis, "sum_axis")?;
        let src = self.nodes[ix].value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let row = &src[(o * axis_len + a) * inner..][..inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let rg = self.rg(&[ix]);
        self.push(
            Op::SumAxis {
                x: ix,
                outer,
                axis_len,
                inner,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    /// Maximum over `axis`, dropping it. Ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let (outer, axis_len, inner, shape) = self.axis_split(ix, axis, "max_axis")?;
        let src = self.nodes[ix].value.data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                for i in 0..inner {
                    let off = (o * axis_len + a) * inner + i;
                    let slot = o * inner + i;
                    if src[off] > data[slot] {
                        data[slot] = src[off];
                        argmax[slot] = off;
                    }
                }
            }
        }
        let rg = self.rg(&[ix]);
        self.push(Op::MaxAxis { x: ix, argmax }, Tensor::new(shape, data)?, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = &self.nodes[ix].value;
        let d = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for t in row.iter_mut() {
                *t = (*t - mx).exp();
                z += *t;
            }
            row.iter_mut().for_each(|t| *t /= z);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[ix]);
        self.push(Op::Softmax(ix), value, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let d = *xs.last().unwrap();
        for (name, i) in [("gamma", ig), ("beta", ib)] {
            let s = self.nodes[i].value.shape();
            if s != [d] {
                return Err(mismatch("layer_norm", format!("{name} {s:?}, expected [{d}]")));
            }
        }
        let src = self.nodes[ix].value.data();
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[ix, ig, ib]);
        self.push(
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            Tensor::new(xs, data)?,
            rg,
        )
    }

    // ---- convolution and pooling ---------------------------------------

    /// Cross-correlation over `[B, C, H, W]` with weight `[F, C, k, k]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(w)?);
        let ib = b.map(|b| self.index(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        if stride == 0 {
            return Err(bad_attr("conv2d", "stride must be positive".into()));
        }
        let (batch, channels, height, width, filters, kernel) = match (xs.as_slice(), ws.as_slice()) {
            ([b, c, h, w], [f, c2, k1, k2]) if c == c2 && k1 == k2 => (*b, *c, *h, *w, *f, *k1),
            _ => return Err(mismatch("conv2d", format!("input {xs:?} against weight {ws:?}"))),
        };
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [filters] {
                return Err(mismatch("conv2d", format!("bias {:?}, expected [{filters}]", self.nodes[ib].value.shape())));
            }
        }
        let (out_h, out_w) = match (
            kernels::window_out(height, kernel, stride, pad),
            kernels::window_out(width, kernel, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(mismatch(
                    "conv2d",
                    format!("kernel {kernel} larger than padded input {height}x{width} (pad {pad})"),
                ))
            }
        };
        let geom = Conv2dGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncol];
        let mut data = vec![0.0; batch * filters * ncol];
        let src = self.nodes[ix].value.data();
        let wd = self.nodes[iw].value.data();
        let img = channels * height * width;
        for s in 0..batch {
            kernels::im2col(&src[s * img..(s + 1) * img], &geom, &mut cols);
            let out = &mut data[s * filters * ncol..(s + 1) * filters * ncol];
            kernels::gemm(filters, rows, ncol, wd, false, &cols, false, out, 0.0);
            if let Some(ib) = ib {
                let bias = self.nodes[ib].value.data();
                for (f, chunk) in out.chunks_mut(ncol).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[f]);
                }
            }
        }
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
                batch,
                filters,
            },
            Tensor::new(vec![batch, filters, out_h, out_w], data)?,
            rg,
        )
    }

    /// Max pooling over `[B, C, H, W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let [b, c, h, w] = xs[..] else {
            return Err(mismatch("max_pool2d", format!("expected rank-4 input, got {xs:?}")));
        };
        if stride == 0 || kernel == 0 || 2 * pad > kernel {
            return Err(bad_attr("max_pool2d", format!("kernel {kernel} stride {stride} pad {pad}")));
        }
        let (oh, ow) = match (
            kernels::window_out(h, kernel, stride, pad),
            kernels::window_out(w, kernel, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(mismatch("max_pool2d", format!("window {kernel} larger than input {h}x{w}"))),
        };
        let src = self.nodes[ix].value.data();
        let mut data = vec![f64::NEG_INFINITY; b * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let slot = (plane * oh + i) * ow + j;
                    for ki in 0..kernel {
                        let r = (i * stride + ki) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let q = (j * stride + kj) as isize - pad as isize;
                            if q < 0 || q >= w as isize {
                                continue;
                            }
                            let off = base + r as usize * w + q as usize;
                            if src[off] > data[slot] {
                                data[slot] = src[off];
                                argmax[slot] = off;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[ix]);
        self.push(Op::MaxPool2d { x: ix, argmax }, Tensor::new(vec![b, c, oh, ow], data)?, rg)
    }

    /// Cross-correlation over `[B, C, L]` with weight `[F, C, k]`, stride 1,
    /// zero padding of `pad_left`/`pad_right`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(w)?);
        let ib = b.map(|b| self.index(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        let (batch, channels, len, filters, kernel) = match (xs.as_slice(), ws.as_slice()) {
            ([b, c, l], [f, c2, k]) if c == c2 => (*b, *c, *l, *f, *k),
            _ => return Err(mismatch("conv1d", format!("input {xs:?} against weight {ws:?}"))),
        };
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [filters] {
                return Err(mismatch("conv1d", format!("bias {:?}, expected [{filters}]", self.nodes[ib].value.shape())));
            }
        }
        let padded = len + pad_left + pad_right;
        if kernel == 0 || padded < kernel {
            return Err(mismatch("conv1d", format!("kernel {kernel} larger than padded length {padded}")));
        }
        let out_len = padded - kernel + 1;
        let rows = channels * kernel;
        let mut cols = vec![0.0; rows * out_len];
        let mut data = vec![0.0; batch * filters * out_len];
        let src = self.nodes[ix].value.data();
        let wd = self.nodes[iw].value.data();
        for s in 0..batch {
            kernels::im2col_1d(&src[s * channels * len..(s + 1) * channels * len], channels, len, kernel, pad_left, out_len, &mut cols);
            let out = &mut data[s * filters * out_len..(s + 1) * filters * out_len];
            kernels::gemm(filters, rows, out_len, wd, false, &cols, false, out, 0.0);
            if let Some(ib) = ib {
                let bias = self.nodes[ib].value.data();
                for (f, chunk) in out.chunks_mut(out_len).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[f]);
                }
            }
        }
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv1d {
                x: ix,
                w: iw,
                b: ib,
                batch,
                channels,
                len,
                filters,
                kernel,
                pad_left,
                out_len,
            },
            Tensor::new(vec![batch, filters, out_len], data)?,
            rg,
        )
    }

    // ---- differentiation -------------------------------------------------

    /// Reverse pass from a scalar `loss` over the whole tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, 0)
    }

    /// Reverse pass that stops once `stop` has its complete gradient.
    ///
    /// Nodes recorded before `stop` receive no gradient.
    pub fn backward_to(&mut self, loss: Var, stop: Var) -> Result<()> {
        let s = self.index(stop)?;
        self.backward_impl(loss, s)
    }

    pub fn clear_grad(&mut self) {
        self.grads.clear();
        self.has_grads = false;
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grad_data(v)?;
        Some(Tensor::new(self.nodes[v.idx].value.shape().to_vec(), data.to_vec()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    fn backward_impl(&mut self, loss: Var, stop: usize) -> Result<()> {
        let li = self.index(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        if self.has_grads {
            return Err(TensorError::BackwardTwice);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (stop..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                if self.fault == Some(node.op.kind()) {
                    let scaled: Vec<f64> = g.iter().map(|v| v * 1.5).collect();
                    self.propagate(i, &scaled, &mut grads);
                } else {
                    self.propagate(i, &g, &mut grads);
                }
            }
            grads[i] = Some(g);
        }
        grads[..stop].iter_mut().for_each(|g| *g = None);
        self.grads = grads;
        self.has_grads = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if let Some(d) = grad_slot(grads, nodes, j) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = grad_slot(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = grad_slot(grads, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(d) = grad_slot(grads, nodes, *a) {
                    for k in 0..g.len() {
                        d[k] += g[k] * vb[k];
                    }
                }
                if let Some(d) = grad_slot(grads, nodes, *b) {
                    for k in 0..g.len() {
                        d[k] += g[k] * va[k];
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        d[k] += g[k] / vx[k];
                    }
                }
            }
            Op::Abs(x) => {
                let vx = val(*x);
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        let s = if vx[k] > 0.0 {
                            1.0
                        } else if vx[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[k] += g[k] * s;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for k in 0..g.len() {
                        if vx[k] >= *lo && vx[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (vx, vw) = (val(*x), val(*w));
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    kernels::gemm(*rows, *out, *inp, g, false, vw, true, d, 1.0);
                }
                if let Some(d) = grad_slot(grads, nodes, *w) {
                    kernels::gemm(*inp, *rows, *out, vx, true, g, false, d, 1.0);
                }
                if let Some(b) = b {
                    if let Some(d) = grad_slot(grads, nodes, *b) {
                        for row in g.chunks(*out) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                if let Some(d) = grad_slot(grads, nodes, *a) {
                    for s in 0..*batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &vb[s * k * n..(s + 1) * k * n],
                            true,
                            &mut d[s * m * k..(s + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(d) = grad_slot(grads, nodes, *b) {
                    for s in 0..*batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[s * m * k..(s + 1) * m * k],
                            true,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &mut d[s * k * n..(s + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Permute { x, map } | Op::Expand { x, map } => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for (k, &o) in map.iter().enumerate() {
                        d[o] += g[k];
                    }
                }
            }
            Op::IndexSelect { x, indices } => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    let inner = g.len() / indices.len();
                    for (r, &src) in indices.iter().enumerate() {
                        d[src * inner..(src + 1) * inner]
                            .iter_mut()
                            .zip(&g[r * inner..(r + 1) * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        d[base..base + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Concat {
                xs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&j, &l) in xs.iter().zip(lens) {
                    if let Some(d) = grad_slot(grads, nodes, j) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..l * inner];
                            d[o * l * inner..(o + 1) * l * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += l;
                }
            }
            Op::Sum(x) => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..*axis_len {
                            d[(o * axis_len + a) * inner..][..*inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } | Op::MaxPool2d { x, argmax } => {
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for (k, &o) in argmax.iter().enumerate() {
                        d[o] += g[k];
                    }
                }
            }
            Op::Softmax(x) => {
                let y = out.data();
                let dim = *out.shape().last().unwrap();
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    for r in 0..y.len() / dim {
                        let (yr, gr) = (&y[r * dim..(r + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            d[r * dim + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let dim = gm.len();
                let rows = g.len() / dim;
                if let Some(d) = grad_slot(grads, nodes, *gamma) {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if let Some(d) = grad_slot(grads, nodes, *beta) {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j];
                        }
                    }
                }
                if let Some(d) = grad_slot(grads, nodes, *x) {
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..rows {
                        let h = &xhat[r * dim..(r + 1) * dim];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            dxhat[j] = g[r * dim + j] * gm[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * h[j];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += rstd[r] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                filters,
            } => {
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let vx = val(*x);
                let vw = val(*w);
                let mut cols = vec![0.0; rows * ncol];
                let want_w = nodes[*w].requires_grad;
                let want_x = nodes[*x].requires_grad;
                for s in 0..*batch {
                    let gs = &g[s * filters * ncol..(s + 1) * filters * ncol];
                    if want_w {
                        kernels::im2col(&vx[s * img..(s + 1) * img], geom, &mut cols);
                        let d = grad_slot(grads, nodes, *w).unwrap();
                        kernels::gemm(*filters, ncol, rows, gs, false, &cols, true, d, 1.0);
                    }
                    if want_x {
                        kernels::gemm(rows, *filters, ncol, vw, true, gs, false, &mut cols, 0.0);
                        let d = grad_slot(grads, nodes, *x).unwrap();
                        kernels::col2im(&cols, geom, &mut d[s * img..(s + 1) * img]);
                    }
                }
                if let Some(b) = b {
                    if let Some(d) = grad_slot(grads, nodes, *b) {
                        for (k, chunk) in g.chunks(ncol).enumerate() {
                            d[k % filters] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                channels,
                len,
                filters,
                kernel,
                pad_left,
                out_len,
            } => {
                let rows = channels * kernel;
                let sig = channels * len;
                let vx = val(*x);
                let vw = val(*w);
                let mut cols = vec![0.0; rows * out_len];
                let want_w = nodes[*w].requires_grad;
                let want_x = nodes[*x].requires_grad;
                for s in 0..*batch {
                    let gs = &g[s * filters * out_len..(s + 1) * filters * out_len];
                    if want_w {
                        kernels::im2col_1d(&vx[s * sig..(s + 1) * sig], *channels, *len, *kernel, *pad_left, *out_len, &mut cols);
                        let d = grad_slot(grads, nodes, *w).unwrap();
                        kernels::gemm(*filters, *out_len, rows, gs, false, &cols, true, d, 1.0);
                    }
                    if want_x {
                        kernels::gemm(rows, *filters, *out_len, vw, true, gs, false, &mut cols, 0.0);
                        let d = grad_slot(grads, nodes, *x).unwrap();
                        kernels::col2im_1d(&cols, *channels, *len, *kernel, *pad_left, *out_len, &mut d[s * sig..(s + 1) * sig]);
                    }
                }
                if let Some(b) = b {
                    if let Some(d) = grad_slot(grads, nodes, *b) {
                        for (k, chunk) in g.chunks(*out_len).enumerate() {
                            d[k % filters] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
