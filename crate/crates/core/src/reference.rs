//! Straight-line dense backbone used as an oracle for the sparse one at
//! keeping ratio 1. Every window is processed, all index arithmetic is
//! written out directly, and only the pure tensor kernels are shared.

use crate::attention::{LN_EPS, MASK_VALUE};
use crate::backbone::{block_prefix, BackboneConfig, StageConfig};
use crate::attention::BlockKind;
use crate::error::{Error, Result};
use crate::tensor::{ops, Activation, FeatureMap, ParamSet, Tensor};

struct Map {
    h: usize,
    w: usize,
    c: usize,
    /// `[h·w, c]`
    t: Tensor,
}

fn p<'a>(ps: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    ps.get(name)
}

fn layernorm(x: &Tensor, ps: &ParamSet, prefix: &str) -> Result<Tensor> {
    ops::layernorm_affine(x, p(ps, &format!("{prefix}.gain"))?, p(ps, &format!("{prefix}.bias"))?, LN_EPS)
}

fn mlp(x: &Tensor, ps: &ParamSet, prefix: &str) -> Result<Tensor> {
    let h = ops::linear(x, p(ps, &format!("{prefix}.fc1.weight"))?, Some(p(ps, &format!("{prefix}.fc1.bias"))?))?;
    let h = ops::activation(&h, Activation::Gelu);
    ops::linear(&h, p(ps, &format!("{prefix}.fc2.weight"))?, Some(p(ps, &format!("{prefix}.fc2.bias"))?))
}

fn columns(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, c) = x.as_rows();
    let mut out = Vec::with_capacity(n * len);
    for r in 0..n {
        out.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
    }
    Tensor::new(vec![n, len], out).expect("positive dims")
}

/// Multi-head attention over all rows of `x`, with an optional additive
/// per-head bias `bias(head, i, j)`.
fn attention(x: &Tensor, ps: &ParamSet, prefix: &str, heads: usize, bias: &dyn Fn(usize, usize, usize) -> f64) -> Result<Tensor> {
    let w = |n: &str| p(ps, &format!("{prefix}.{n}"));
    let (n, c) = x.as_rows();
    let d = c / heads;
    let q = ops::linear(x, w("q.weight")?, Some(w("q.bias")?))?;
    let k = ops::linear(x, w("k.weight")?, None)?;
    let v = ops::linear(x, w("v.weight")?, Some(w("v.bias")?))?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        let qh = columns(&q, h * d, d);
        let kh = columns(&k, h * d, d);
        let vh = columns(&v, h * d, d);
        let s = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
        let mut sb = s.into_data();
        for i in 0..n {
            for j in 0..n {
                sb[i * n + j] += bias(h, i, j);
            }
        }
        let probs = ops::softmax(&Tensor::new(vec![n, n], sb)?, 1)?;
        let o = ops::matmul(&probs, &vh)?;
        for i in 0..n {
            out[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&o.data()[i * d..(i + 1) * d]);
        }
    }
    ops::linear(&Tensor::new(vec![n, c], out)?, w("proj.weight")?, Some(w("proj.bias")?))
}

fn global_stage(x: &Map, s: &StageConfig, ps: &ParamSet, stage: usize) -> Result<Tensor> {
    let m = s.window;
    let (rows, cols) = (x.h.div_ceil(m), x.w.div_ceil(m));
    let weight = 1.0 / (m * m) as f64;
    let mut zbar = vec![0.0; rows * cols * x.c];
    for wy in 0..rows {
        for wx in 0..cols {
            let dst = (wy * cols + wx) * x.c;
            for dy in 0..m {
                for dx in 0..m {
                    let (y, xx) = (wy * m + dy, wx * m + dx);
                    if y < x.h && xx < x.w {
                        for ch in 0..x.c {
                            zbar[dst + ch] += weight * x.t.data()[(y * x.w + xx) * x.c + ch];
                        }
                    }
                }
            }
        }
    }
    let mut zbar = Tensor::new(vec![rows * cols, x.c], zbar)?;
    for b in 0..s.global_blocks() {
        let pre = block_prefix(stage, b);
        let a = attention(&layernorm(&zbar, ps, &format!("{pre}.norm1"))?, ps, &format!("{pre}.attn"), s.heads, &|_, _, _| 0.0)?;
        zbar = ops::add(&zbar, &a)?;
        let f = mlp(&layernorm(&zbar, ps, &format!("{pre}.norm2"))?, ps, &format!("{pre}.mlp"))?;
        zbar = ops::add(&zbar, &f)?;
    }
    let mut out = x.t.data().to_vec();
    for y in 0..x.h {
        for xx in 0..x.w {
            let win = (y / m) * cols + xx / m;
            for ch in 0..x.c {
                out[(y * x.w + xx) * x.c + ch] += zbar.data()[win * x.c + ch];
            }
        }
    }
    Tensor::new(vec![x.h * x.w, x.c], out)
}

/// Dense shifted-window block: norm everything, pad, roll, attend in every
/// window, unroll, crop, residual; then a dense MLP.
fn local_dense(x: &Map, s: &StageConfig, ps: &ParamSet, pre: &str, shift: usize) -> Result<Tensor> {
    let m = s.window;
    let (hp, wp) = (x.h.div_ceil(m) * m, x.w.div_ceil(m) * m);
    let normed = layernorm(&x.t, ps, &format!("{pre}.norm1"))?;
    let table = p(ps, &format!("{pre}.attn.rel_bias"))?;
    let mut attn_out = vec![0.0; x.h * x.w * x.c];
    for wy in 0..hp / m {
        for wx in 0..wp / m {
            // Shifted-frame position of each slot and the original token it holds.
            let mut rows = Vec::with_capacity(m * m * x.c);
            let mut origin = Vec::with_capacity(m * m);
            let mut wrapped = Vec::with_capacity(m * m);
            for dy in 0..m {
                for dx in 0..m {
                    let (sy, sx) = (wy * m + dy, wx * m + dx);
                    let (oy, ox) = ((sy + shift) % hp, (sx + shift) % wp);
                    wrapped.push((shift > 0 && sy + shift >= hp, shift > 0 && sx + shift >= wp));
                    if oy < x.h && ox < x.w {
                        rows.extend_from_slice(&normed.data()[(oy * x.w + ox) * x.c..(oy * x.w + ox + 1) * x.c]);
                        origin.push(Some(oy * x.w + ox));
                    } else {
                        rows.extend(std::iter::repeat(0.0).take(x.c));
                        origin.push(None);
                    }
                }
            }
            let bias = |h: usize, i: usize, j: usize| {
                let (iy, ix) = ((i / m) as isize, (i % m) as isize);
                let (jy, jx) = ((j / m) as isize, (j % m) as isize);
                let side = 2 * m as isize - 1;
                let idx = (iy - jy + m as isize - 1) * side + (ix - jx + m as isize - 1);
                let masked = if wrapped[i] != wrapped[j] { MASK_VALUE } else { 0.0 };
                table.data()[idx as usize * s.heads + h] + masked
            };
            let a = attention(&Tensor::new(vec![m * m, x.c], rows)?, ps, &format!("{pre}.attn"), s.heads, &bias)?;
            for (slot, o) in origin.iter().enumerate() {
                if let Some(t) = *o {
                    attn_out[t * x.c..(t + 1) * x.c].copy_from_slice(&a.data()[slot * x.c..(slot + 1) * x.c]);
                }
            }
        }
    }
    let x1 = ops::add(&x.t, &Tensor::new(vec![x.h * x.w, x.c], attn_out)?)?;
    let f = mlp(&layernorm(&x1, ps, &format!("{pre}.norm2"))?, ps, &format!("{pre}.mlp"))?;
    ops::add(&x1, &f)
}

fn merge(x: &Map, weight: &Tensor) -> Result<Map> {
    let (h2, w2) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut cat = vec![0.0; h2 * w2 * 4 * x.c];
    for i in 0..h2 {
        for j in 0..w2 {
            for (q, (dy, dx)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                let (y, xx) = (2 * i + dy, 2 * j + dx);
                if y < x.h && xx < x.w {
                    let dst = (i * w2 + j) * 4 * x.c + q * x.c;
                    cat[dst..dst + x.c].copy_from_slice(&x.t.data()[(y * x.w + xx) * x.c..(y * x.w + xx + 1) * x.c]);
                }
            }
        }
    }
    let t = ops::matmul(&Tensor::new(vec![h2 * w2, 4 * x.c], cat)?, weight)?;
    Ok(Map { h: h2, w: w2, c: 2 * x.c, t })
}

/// Dense stage maps for `image`; stage ratios are ignored.
pub fn dense_backbone(image: &Tensor, cfg: &BackboneConfig, ps: &ParamSet) -> Result<Vec<FeatureMap>> {
    cfg.validate()?;
    if cfg.stages.iter().any(|s| s.kind != BlockKind::Attention) {
        return Err(Error::Config("the dense reference covers attention blocks only".into()));
    }
    let [ih, iw, ich] = *image.shape() else {
        return Err(Error::Usage("image must be H×W×C".into()));
    };
    let pz = cfg.patch_size;
    let (gh, gw) = (ih.div_ceil(pz), iw.div_ceil(pz));
    let mut cols = vec![0.0; gh * gw * pz * pz * ich];
    for y in 0..ih {
        for x in 0..iw {
            let (tok, py, px) = ((y / pz) * gw + x / pz, y % pz, x % pz);
            let dst = tok * pz * pz * ich + (py * pz + px) * ich;
            cols[dst..dst + ich].copy_from_slice(&image.data()[(y * iw + x) * ich..(y * iw + x + 1) * ich]);
        }
    }
    let t = ops::linear(
        &Tensor::new(vec![gh * gw, pz * pz * ich], cols)?,
        p(ps, "patch_embed.weight")?,
        Some(p(ps, "patch_embed.bias")?),
    )?;
    let mut x = Map { h: gh, w: gw, c: cfg.stages[0].dim, t };
    let mut out = Vec::with_capacity(cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        if i > 0 {
            x = merge(&x, p(ps, &format!("merges.{}.weight", i - 1))?)?;
        }
        x.t = global_stage(&x, s, ps, i)?;
        for j in 0..s.local_blocks() {
            let shift = if j % 2 == 1 { s.window / 2 } else { 0 };
            x.t = local_dense(&x, s, ps, &block_prefix(i, s.global_blocks() + j), shift)?;
        }
        out.push(x.t.reshape(&[x.h, x.w, x.c])?);
    }
    Ok(out)
}
