//! Raw slice kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` with `a` logically `[m, k]` and `b` logically `[k, n]`.
///
/// `a_t` means `a` is stored as `[k, m]`; `b_t` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a sliding window, or `None` when the window does not fit.
pub fn window_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one `[C, H, W]` image into `[C·k·k, Ho·Wo]` columns.
pub(crate) fn im2col(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.height + ih as usize) * g.width..][..g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.height + ih as usize) * g.width..][..g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one `[C, L]` signal into `[C·k, Lo]` columns with asymmetric zero padding.
pub(crate) fn im2col_1d(
    x: &[f64],
    channels: usize,
    len: usize,
    kernel: usize,
    pad_left: usize,
    out_len: usize,
    cols: &mut [f64],
) {
    for c in 0..channels {
        for kk in 0..kernel {
            let dst = &mut cols[(c * kernel + kk) * out_len..][..out_len];
            for (o, v) in dst.iter_mut().enumerate() {
                let i = (o + kk) as isize - pad_left as isize;
                *v = if i < 0 || i >= len as isize {
                    0.0
                } else {
                    x[c * len + i as usize]
                };
            }
        }
    }
}

pub(crate) fn col2im_1d(
    cols: &[f64],
    channels: usize,
    len: usize,
    kernel: usize,
    pad_left: usize,
    out_len: usize,
    dx: &mut [f64],
) {
    for c in 0..channels {
        for kk in 0..kernel {
            let src = &cols[(c * kernel + kk) * out_len..][..out_len];
            for (o, v) in src.iter().enumerate() {
                let i = (o + kk) as isize - pad_left as isize;
                if i >= 0 && i < len as isize {
                    dx[c * len + i as usize] += v;
                }
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `permute(shape, axes)`, the flat input offset.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// For each output position of an expand to `out_shape`, the flat input offset.
pub(crate) fn expand_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let step: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_map_transposes() {
        // [2,3] -> [3,2]
        assert_eq!(permute_map(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn expand_map_repeats() {
        assert_eq!(expand_map(&[1, 2], &[3, 2]), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(expand_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_out(32, 7, 1, 3), Some(32));
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(2, 5, 1, 0), None);
    }
}
