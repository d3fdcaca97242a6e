use bitvec::prelude::*;
use rand::Rng;

use super::{unit, MixError, Result};
use crate::tensor::Tensor;

/// Binary keep-mask: a set bit is an unaltered entry (`M = 1`).
///
/// Blocks live in the last two axes; leading axes index independent planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    shape: Vec<usize>,
    keep: BitVec<u64, Lsb0>,
}

fn plane(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => {
            let (h, w) = (shape[n - 2], shape[n - 1]);
            (shape.iter().product::<usize>() / (h * w).max(1), h, w)
        }
    }
}

/// 64 independent bits, each set with probability `q / 2^53`.
///
/// Reads the binary expansion of `q` from its lowest set bit: a 1 digit
/// ORs in a fresh uniform word, a 0 digit ANDs one in.
fn bernoulli_word<R: Rng>(q: u64, rng: &mut R) -> u64 {
    if q == 0 {
        return 0;
    }
    if q >= 1 << 53 {
        return u64::MAX;
    }
    let mut r = 0u64;
    for bit in q.trailing_zeros()..53 {
        let u: u64 = rng.random();
        r = if q >> bit & 1 == 1 { r | u } else { r & u };
    }
    r
}

fn bernoulli_bits<R: Rng>(n: usize, p: f64, rng: &mut R) -> BitVec<u64, Lsb0> {
    let q = (p * (1u64 << 53) as f64).round() as u64;
    let words: Vec<u64> = (0..n.div_ceil(64)).map(|_| bernoulli_word(q, rng)).collect();
    let mut bits = BitVec::from_vec(words);
    bits.truncate(n);
    bits
}

impl BlockMask {
    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        BlockMask {
            shape: shape.to_vec(),
            keep: BitVec::repeat(true, n),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        BlockMask {
            shape: shape.to_vec(),
            keep: BitVec::repeat(false, n),
        }
    }

    pub fn from_keep(shape: &[usize], keep: &[bool]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if keep.len() != n {
            return Err(MixError::Length(format!("{} entries for shape {shape:?}", keep.len())));
        }
        Ok(BlockMask {
            shape: shape.to_vec(),
            keep: keep.iter().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.count_ones()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    /// Fraction of unaltered entries.
    pub fn pu(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.kept() as f64 / self.keep.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&self.shape, |i| if self.keep[i] { 1.0 } else { 0.0 })
    }

    /// `1 − M`.
    pub fn complement_tensor(&self) -> Tensor {
        Tensor::from_fn(&self.shape, |i| if self.keep[i] { 0.0 } else { 1.0 })
    }

    /// Whether every altered entry lies in some fully altered `block × block`
    /// square contained in its plane.
    pub fn is_block_union(&self, block: usize) -> bool {
        let (planes, h, w) = plane(&self.shape);
        if block == 0 || block > h || block > w {
            return self.kept() == self.len();
        }
        let mut prefix = vec![0usize; (h + 1) * (w + 1)];
        let mut covered = vec![false; h * w];
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..h {
                for j in 0..w {
                    let altered = !self.keep[base + i * w + j] as usize;
                    prefix[(i + 1) * (w + 1) + j + 1] =
                        altered + prefix[i * (w + 1) + j + 1] + prefix[(i + 1) * (w + 1) + j] - prefix[i * (w + 1) + j];
                }
            }
            covered.iter_mut().for_each(|c| *c = false);
            for i in 0..=h - block {
                for j in 0..=w - block {
                    let (a, b) = (i + block, j + block);
                    let sum = prefix[a * (w + 1) + b] + prefix[i * (w + 1) + j] - prefix[i * (w + 1) + b] - prefix[a * (w + 1) + j];
                    if sum == block * block {
                        for r in i..a {
                            covered[r * w + j..r * w + b].iter_mut().for_each(|c| *c = true);
                        }
                    }
                }
            }
            for (k, &c) in covered.iter().enumerate() {
                if !self.keep[base + k] && !c {
                    return false;
                }
            }
        }
        true
    }
}

/// Samples a mask whose altered regions are unions of `block × block` squares.
///
/// Seeds are drawn with probability `gamma_adj` over the positions where a
/// block fits and each seed alters the block to its lower right;
/// `gamma_adj = gamma·H·W / (block²·(H − block + 1)·(W − block + 1))`
/// so that the expected altered fraction is close to `gamma` when blocks
/// rarely overlap. With `block = 1` this is i.i.d. Bernoulli(`gamma`).
pub fn sample_block_mask<R: Rng>(shape: &[usize], gamma: f64, block: usize, rng: &mut R) -> Result<BlockMask> {
    unit("gamma", gamma)?;
    if block == 0 || block.is_multiple_of(2) {
        return Err(MixError::BlockSize(block));
    }
    let (planes, h, w) = plane(shape);
    if block > h || block > w {
        return Err(MixError::BlockTooLarge {
            block,
            height: h,
            width: w,
        });
    }
    let n: usize = shape.iter().product();
    if block == 1 {
        let mut keep = bernoulli_bits(n, gamma, rng);
        keep = !keep;
        return Ok(BlockMask {
            shape: shape.to_vec(),
            keep,
        });
    }
    let (sh, sw) = (h - block + 1, w - block + 1);
    let gamma_adj = (gamma * (h * w) as f64 / ((block * block) as f64 * (sh * sw) as f64)).min(1.0);
    let seeds = bernoulli_bits(planes * sh * sw, gamma_adj, rng);
    let mut keep: BitVec<u64, Lsb0> = BitVec::repeat(true, n);
    for s in seeds.iter_ones() {
        let p = s / (sh * sw);
        let (i, j) = ((s % (sh * sw)) / sw, s % sw);
        let base = p * h * w;
        for r in i..i + block {
            keep[base + r * w + j..base + r * w + j + block].fill(false);
        }
    }
    Ok(BlockMask {
        shape: shape.to_vec(),
        keep,
    })
}
