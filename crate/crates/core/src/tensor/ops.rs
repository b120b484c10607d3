//! Pure kernels over [`Tensor`]. Each counting kernel adds its operation
//! count to a thread-local tally so that an instrumented forward pass can be
//! compared with the analytic counts in [`crate::flops`].
//!
//! Counting convention: a multiply-accumulate is 2 operations, softmax is
//! 5 per element, layernorm 7 per element. Element-wise adds, activations
//! and data movement are not counted.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerParams, Tensor};
use crate::error::{shape_err, Error, Result};

pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
pub const LAYERNORM_FLOPS_PER_ELEMENT: u64 = 7;

/// `sqrt(2/pi)` for the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

thread_local! {
    static FLOP_TALLY: Cell<u64> = const { Cell::new(0) };
}

fn tally(n: u64) {
    FLOP_TALLY.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the number of operations executed by
/// counting kernels on this thread while it ran.
pub fn measure_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = FLOP_TALLY.with(|c| c.get());
    let out = f();
    let after = FLOP_TALLY.with(|c| c.get());
    (out, after - before)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_scalar(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad_scalar(x),
            Activation::Identity => 1.0,
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => shape_err(op, other, &[0, 0]),
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    tally(2 * (m * k * n) as u64);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x * s)
}

/// Adds `bias` (length = last axis) to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = a.as_rows();
    if bias.numel() != c {
        return shape_err("add_row", a.shape(), bias.shape());
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `x·W + b` over the last axis of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, c) = x.as_rows();
    let y = matmul(&x.reshape(&[rows, c])?, weight)?;
    let y = match bias {
        Some(b) => add_row(&y, b)?,
        None => y,
    };
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = weight.shape()[1];
    y.reshape(&shape)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Usage(format!("softmax axis {axis} invalid for shape {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[at(j)] /= s;
            }
        }
    }
    tally(SOFTMAX_FLOPS_PER_ELEMENT * d.len() as u64);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Per-row statistics kept by layernorm for the backward pass.
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layernorm_with_stats(
    x: &Tensor,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let (rows, c) = x.as_rows();
    if gain.len() != c || bias.len() != c {
        return shape_err("layernorm", x.shape(), &[gain.len()]);
    }
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    let mut xhat = vec![0.0; d.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &d[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain[j] + bias[j];
        }
    }
    tally(LAYERNORM_FLOPS_PER_ELEMENT * d.len() as u64);
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormStats { xhat, rstd }))
}

pub fn layernorm_affine(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_with_stats(x, gain.data(), bias.data(), eps).map(|(y, _)| y)
}

/// Layer normalisation over the last axis with `gain`/`bias` from `params`.
pub fn layernorm(x: &Tensor, params: &LayerParams, eps: f64) -> Result<Tensor> {
    params.expect_kind(LayerKind::LayerNorm)?;
    layernorm_affine(x, params.tensor("gain")?, params.tensor("bias")?, eps)
}

pub fn activation(x: &Tensor, act: Activation) -> Tensor {
    map(x, |v| act.apply(v))
}

/// Two-layer perceptron: `fc2(act(fc1(x)))`.
pub fn mlp_forward(x: &Tensor, params: &LayerParams, act: Activation) -> Result<Tensor> {
    params.expect_kind(LayerKind::Mlp)?;
    let h = linear(x, params.tensor("fc1.weight")?, Some(params.tensor("fc1.bias")?))?;
    let h = activation(&h, act);
    linear(&h, params.tensor("fc2.weight")?, Some(params.tensor("fc2.bias")?))
}

/// Copies rows of a `[N, C]` view; `None` yields a zero row.
pub fn gather_rows(x: &Tensor, index: &[Option<usize>]) -> Result<Tensor> {
    let (n, c) = x.as_rows();
    let d = x.data();
    let mut out = vec![0.0; index.len() * c];
    for (o, src) in index.iter().enumerate() {
        if let Some(i) = *src {
            if i >= n {
                return Err(Error::Usage(format!("gather index {i} out of range for {n} rows")));
            }
            out[o * c..(o + 1) * c].copy_from_slice(&d[i * c..(i + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![index.len(), c], out))
}

/// A weighted mix of rows: `out[g] = sum_(i, w) w * x[i]` over `groups[g]`.
pub fn mix_rows(x: &Tensor, groups: &[Vec<(usize, f64)>]) -> Result<Tensor> {
    let (n, c) = x.as_rows();
    let d = x.data();
    let mut out = vec![0.0; groups.len() * c];
    for (g, terms) in groups.iter().enumerate() {
        let row = &mut out[g * c..(g + 1) * c];
        for &(i, w) in terms {
            if i >= n {
                return Err(Error::Usage(format!("mix index {i} out of range for {n} rows")));
            }
            for (o, &v) in row.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += w * v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![groups.len(), c], out))
}

/// Offsets of the 3×3 taps, row-major: tap `t` reads `(dy, dx) = (t/3-1, t%3-1)`.
pub(crate) fn tap_offset(t: usize) -> (isize, isize) {
    (t as isize / 3 - 1, t as isize % 3 - 1)
}

/// 3×3 depthwise convolution with zero borders over `batch` independent
/// `h × w` images stored as `[batch·h·w, C]` rows; `weight` is `[9, C]`.
pub fn depthwise_conv3x3(x: &Tensor, weight: &Tensor, batch: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.as_rows();
    if n != batch * h * w || weight.shape() != [9, c] {
        return shape_err("depthwise_conv3x3", x.shape(), weight.shape());
    }
    let (d, k) = (x.data(), weight.data());
    let mut out = vec![0.0; n * c];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let o = (b * h + i) * w + j;
                for t in 0..9 {
                    let (dy, dx) = tap_offset(t);
                    let (y, xx) = (i as isize + dy, j as isize + dx);
                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let src = (b * h + y as usize) * w + xx as usize;
                    for ch in 0..c {
                        out[o * c + ch] += k[t * c + ch] * d[src * c + ch];
                    }
                }
            }
        }
    }
    tally(2 * 9 * (n * c) as u64);
    Ok(Tensor::from_parts(vec![n, c], out))
}
