// SPDX-License-Identifier: Apache-2.0

//! 1D convolution and pooling kernels over `[N, C, T]` tensors, with the
//! adjoint routines the tape uses for backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SeededRng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
    /// One element drawn uniformly per window.
    Random,
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    t.expect_rank(3, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

pub(crate) fn conv1d_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("conv1d stride must be positive".into()));
    }
    if len + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv1d: length {len} with padding {padding} is shorter than kernel {k}"
        )));
    }
    Ok((len + 2 * padding - k) / stride + 1)
}

/// Range of output positions `t` whose tap `j` lands inside the unpadded input.
#[inline]
fn valid_range(j: usize, len: usize, out_len: usize, stride: usize, padding: usize) -> (usize, usize) {
    // need 0 <= t*stride + j - padding < len
    let lo = if padding > j {
        (padding - j).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + padding > j {
        ((len + padding - j - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation with zero padding: `input [N,Cin,T]`, `kernel [Cout,Cin,k]`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, cin, len) = dims3(input, "conv1d input")?;
    let (cout, kcin, k) = dims3(kernel, "conv1d kernel")?;
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv1d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let out_len = conv1d_out_len(len, k, stride, padding)?;
    let x = input.data();
    let w = kernel.data();
    let mut out = vec![0.0; n * cout * out_len];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * out_len..(b * cout + o + 1) * out_len];
            for c in 0..cin {
                let src = &x[(b * cin + c) * len..(b * cin + c + 1) * len];
                for j in 0..k {
                    let wv = w[(o * cin + c) * k + j];
                    let (lo, hi) = valid_range(j, len, out_len, stride, padding);
                    if stride == 1 {
                        let off = lo + j - padding;
                        for (d, s) in dst[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                            *d += wv * s;
                        }
                    } else {
                        for t in lo..hi {
                            dst[t] += wv * src[t * stride + j - padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, out_len], out)
}

/// Gradients of `conv1d` w.r.t. its input and kernel given the output gradient.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let s = input.shape();
    let (n, cin, len) = (s[0], s[1], s[2]);
    let ks = kernel.shape();
    let (cout, k) = (ks[0], ks[2]);
    let out_len = grad_out.shape()[2];
    let x = input.data();
    let w = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..n {
        for o in 0..cout {
            let go = &g[(b * cout + o) * out_len..(b * cout + o + 1) * out_len];
            for c in 0..cin {
                let xoff = (b * cin + c) * len;
                for j in 0..k {
                    let widx = (o * cin + c) * k + j;
                    let wv = w[widx];
                    let (lo, hi) = valid_range(j, len, out_len, stride, padding);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let xi = xoff + t * stride + j - padding;
                        acc += go[t] * x[xi];
                        gx[xi] += go[t] * wv;
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("same shape"),
        Tensor::new(kernel.shape().to_vec(), gw).expect("same shape"),
    )
}

pub(crate) fn pool1d_out_len(len: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be positive".into()));
    }
    if len < window {
        return Err(Error::Shape(format!(
            "pool1d: length {len} shorter than window {window}"
        )));
    }
    Ok((len - window) / stride + 1)
}

/// Pooling over the last axis. `rng` must be supplied exactly for
/// [`PoolKind::Random`].
pub fn pool1d(
    input: &Tensor,
    kind: PoolKind,
    window: usize,
    stride: usize,
    rng: Option<&mut SeededRng>,
) -> Result<Tensor> {
    pool1d_indexed(input, kind, window, stride, rng).map(|(t, _)| t)
}

/// Pooling that also returns, for max/random, the flat input index chosen
/// for every output element.
pub(crate) fn pool1d_indexed(
    input: &Tensor,
    kind: PoolKind,
    window: usize,
    stride: usize,
    mut rng: Option<&mut SeededRng>,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let (n, c, len) = dims3(input, "pool1d input")?;
    if kind == PoolKind::Random && rng.is_none() {
        return Err(Error::Config("random pooling requires a seeded rng".into()));
    }
    let out_len = pool1d_out_len(len, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_len);
    let mut picks = match kind {
        PoolKind::Avg => None,
        _ => Some(Vec::with_capacity(n * c * out_len)),
    };
    for row in 0..n * c {
        let base = row * len;
        for t in 0..out_len {
            let start = base + t * stride;
            let win = &x[start..start + window];
            match kind {
                PoolKind::Avg => out.push(win.iter().sum::<f64>() / window as f64),
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, v) in win.iter().enumerate() {
                        if *v > win[best] {
                            best = i;
                        }
                    }
                    out.push(win[best]);
                    picks.as_mut().unwrap().push(start + best);
                }
                PoolKind::Random => {
                    let r = rng.as_deref_mut().unwrap();
                    let i = r.gen_range(0..window);
                    out.push(win[i]);
                    picks.as_mut().unwrap().push(start + i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, out_len], out)?, picks))
}

pub(crate) fn pool1d_backward(
    input_shape: &[usize],
    grad_out: &Tensor,
    window: usize,
    stride: usize,
    picks: Option<&[usize]>,
) -> Tensor {
    let len = input_shape[2];
    let out_len = grad_out.shape()[2];
    let mut gx = vec![0.0; input_shape.iter().product()];
    let g = grad_out.data();
    match picks {
        Some(p) => {
            for (gi, &xi) in g.iter().zip(p) {
                gx[xi] += gi;
            }
        }
        None => {
            let scale = 1.0 / window as f64;
            for row in 0..input_shape[0] * input_shape[1] {
                for t in 0..out_len {
                    let gv = g[row * out_len + t] * scale;
                    let start = row * len + t * stride;
                    for v in &mut gx[start..start + window] {
                        *v += gv;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("same shape")
}
