//! Global attention over aggregated window tokens, shifted-window local
//! attention on a sparse subset of windows, and the sparse feed-forward
//! step that shares the same kept windows.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::sparsify::{fuse_local_var, SparseSelection};
use crate::tensor::{Activation, Bound, FeatureMap, LayerKind, LayerParams, ParamSet, RowPick, Tape, Tensor, Var};
use crate::windowing::{AggregatedMap, WindowGrid};

pub const MASK_VALUE: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Attention,
    Convolution,
}

/// Attention projections plus the head layout. `window` is set for local
/// attention and sizes the relative-position bias table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub layer: LayerParams,
    pub heads: usize,
    pub window: Option<usize>,
    pub scale: f64,
}

impl AttentionParams {
    pub fn new(layer: LayerParams, heads: usize, window: Option<usize>) -> Result<Self> {
        layer.expect_kind(LayerKind::AttentionProjection)?;
        layer.validate()?;
        let dim = layer.tensor("q.weight")?.shape()[0];
        check_heads(dim, heads)?;
        if let Some(m) = window {
            let side = 2 * m - 1;
            let table = layer.tensor("rel_bias")?;
            if table.shape() != [side * side, heads] {
                return shape_err("rel_bias", table.shape(), &[side * side, heads]);
            }
        }
        Ok(Self {
            layer,
            heads,
            window,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, window: Option<usize>, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Self::new(LayerParams::attention(dim, heads, window, rng), heads, window)
    }

    pub fn dim(&self) -> usize {
        self.layer.tensor("q.weight").expect("validated").shape()[0]
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Row-major table index of the offset between slots `i` and `j`.
pub fn relative_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let side = 2 * window - 1;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            out.push(dy as usize * side + dx as usize);
        }
    }
    out
}

/// Additive masks for shifted windows: tokens that came from different
/// regions of the unshifted map may not attend to each other.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    pub window: usize,
    /// One `[M², M²]` mask per window; `None` where every token shares a region.
    pub masks: Vec<Option<Tensor>>,
}

impl ShiftMask {
    pub fn new(grid: &WindowGrid, shift: usize) -> Self {
        let labels = Self::labels(grid, shift);
        let t = grid.slots();
        let masks = labels
            .chunks(t)
            .map(|lab| {
                if lab.iter().all(|&l| l == lab[0]) {
                    return None;
                }
                let data = (0..t * t)
                    .map(|ij| if lab[ij / t] == lab[ij % t] { 0.0 } else { MASK_VALUE })
                    .collect();
                Some(Tensor::new(vec![t, t], data).expect("positive dims"))
            })
            .collect();
        Self { window: grid.window, masks }
    }

    /// Region label of every slot, window-major, in the shifted frame.
    pub fn labels(grid: &WindowGrid, shift: usize) -> Vec<usize> {
        let m = grid.window;
        let band = |v: usize, extent: usize| {
            if v + m < extent {
                0
            } else if v + shift < extent {
                1
            } else {
                2
            }
        };
        let mut out = Vec::with_capacity(grid.num_windows() * grid.slots());
        for win in 0..grid.num_windows() {
            let (r0, c0) = grid.window_origin(win);
            for r in 0..m {
                for c in 0..m {
                    out.push(3 * band(r0 + r, grid.h_pad) + band(c0 + c, grid.w_pad));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// The masks of the kept windows, in kept order.
    pub fn subset(&self, kept: &[usize]) -> Self {
        Self {
            window: self.window,
            masks: kept.iter().map(|&w| self.masks[w].clone()).collect(),
        }
    }
}

/// Attention parameters bound to a tape.
#[derive(Clone)]
pub struct AttentionVars<'t> {
    q_w: Var<'t>,
    q_b: Var<'t>,
    k_w: Var<'t>,
    v_w: Var<'t>,
    v_b: Var<'t>,
    p_w: Var<'t>,
    p_b: Var<'t>,
    rel: Option<(Var<'t>, Rc<[Option<usize>]>)>,
    heads: usize,
    scale: f64,
}

impl<'t> AttentionVars<'t> {
    pub fn bind(b: &Bound<'t>, prefix: &str, heads: usize, window: Option<usize>) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        let q_w = v("q.weight")?;
        let dim = q_w.value().shape()[0];
        check_heads(dim, heads)?;
        let rel = match window {
            Some(m) => {
                let idx: Vec<Option<usize>> = relative_index(m).into_iter().map(Some).collect();
                Some((v("rel_bias")?, idx.into()))
            }
            None => None,
        };
        Ok(Self {
            q_w,
            q_b: v("q.bias")?,
            k_w: v("k.weight")?,
            v_w: v("v.weight")?,
            v_b: v("v.bias")?,
            p_w: v("proj.weight")?,
            p_b: v("proj.bias")?,
            rel,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    fn from_params(tape: &'t Tape, p: &AttentionParams) -> Result<Self> {
        let mut ps = ParamSet::new();
        ps.insert_layer("attn", &p.layer)?;
        Self::bind(&ps.bind(tape), "attn", p.heads, p.window)
    }
}

/// Multi-head self-attention within each of `groups` consecutive blocks of
/// rows of `x` (`[groups·T, C]`). `masks`, when given, has one entry per group.
pub fn msa_var<'t>(x: Var<'t>, a: &AttentionVars<'t>, groups: usize, masks: Option<&ShiftMask>) -> Result<Var<'t>> {
    let (n, c) = x.value().as_rows();
    if groups == 0 || n % groups != 0 {
        return shape_err("msa", &[n, c], &[groups]);
    }
    let t = n / groups;
    if let Some(m) = masks {
        if m.len() != groups || m.masks.iter().flatten().any(|mk| mk.shape() != [t, t]) {
            return shape_err("shift mask", &[m.len(), m.window * m.window], &[groups, t]);
        }
    }
    let d = c / a.heads;
    let q = x.linear(a.q_w, Some(a.q_b))?;
    let k = x.linear(a.k_w, None)?;
    let v = x.linear(a.v_w, Some(a.v_b))?;
    let mut head_bias = Vec::with_capacity(a.heads);
    let mut qs = Vec::with_capacity(a.heads);
    let mut ks = Vec::with_capacity(a.heads);
    let mut vs = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        qs.push(q.cols(h * d, d)?);
        ks.push(k.cols(h * d, d)?);
        vs.push(v.cols(h * d, d)?);
        if let Some((table, idx)) = &a.rel {
            if idx.len() != t * t {
                return shape_err("rel_bias", &[idx.len()], &[t * t]);
            }
            head_bias.push(table.cols(h, 1)?.gather_rows(idx.clone())?.reshape(&[t, t])?);
        }
    }
    let mut outputs = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut heads = Vec::with_capacity(a.heads);
        for h in 0..a.heads {
            let qh = qs[h].rows(g * t, t)?;
            let kh = ks[h].rows(g * t, t)?;
            let vh = vs[h].rows(g * t, t)?;
            let mut s = qh.matmul(kh.transpose()?)?.scale(a.scale);
            if let Some(b) = head_bias.get(h) {
                s = s.add(*b)?;
            }
            if let Some(Some(mk)) = masks.map(|m| &m.masks[g]) {
                s = s.add_const(mk)?;
            }
            heads.push(s.softmax()?.matmul(vh)?);
        }
        outputs.push(Var::concat_cols(&heads)?);
    }
    Var::concat_rows(&outputs)?.linear(a.p_w, Some(a.p_b))
}

/// Per-window attention on gathered windows `[K, M², C]`.
pub fn w_msa(windows: &Tensor, params: &AttentionParams, mask: Option<&ShiftMask>) -> Result<Tensor> {
    let [k, t, c] = windows.shape() else {
        return shape_err("w_msa", windows.shape(), &[0, 0, 0]);
    };
    if let Some(m) = params.window {
        if m * m != *t {
            return shape_err("w_msa", windows.shape(), &[*k, m * m, *c]);
        }
    }
    let tape = Tape::inference();
    let a = AttentionVars::from_params(&tape, params)?;
    let x = tape.leaf(windows.reshape(&[k * t, *c])?);
    msa_var(x, &a, *k, mask)?.value().reshape(windows.shape())
}

#[derive(Clone)]
pub struct ConvVars<'t> {
    depthwise: Var<'t>,
    pointwise: Var<'t>,
    bias: Var<'t>,
}

impl<'t> ConvVars<'t> {
    pub fn bind(b: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            depthwise: b.var(&format!("{prefix}.depthwise.weight"))?,
            pointwise: b.var(&format!("{prefix}.pointwise.weight"))?,
            bias: b.var(&format!("{prefix}.pointwise.bias"))?,
        })
    }
}

/// 3×3 depthwise then 1×1 pointwise over `batch` maps of `h × w` rows each.
pub fn conv_var<'t>(x: Var<'t>, c: &ConvVars<'t>, batch: usize, h: usize, w: usize) -> Result<Var<'t>> {
    x.depthwise_conv3x3(c.depthwise, batch, h, w)?.linear(c.pointwise, Some(c.bias))
}

pub fn conv_local_layer(z: &FeatureMap, params: &LayerParams) -> Result<FeatureMap> {
    params.expect_kind(LayerKind::DepthwiseConv)?;
    let [h, w, c] = z.shape() else {
        return shape_err("conv_local_layer", z.shape(), &[0, 0, 0]);
    };
    let mut ps = ParamSet::new();
    ps.insert_layer("conv", params)?;
    let tape = Tape::inference();
    let cv = ConvVars::bind(&ps.bind(&tape), "conv")?;
    let x = tape.leaf(z.reshape(&[h * w, *c])?);
    conv_var(x, &cv, 1, *h, *w)?.value().reshape(z.shape())
}

/// Shape of a block, independent of its parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub heads: usize,
    pub window: usize,
    pub act: Activation,
}

#[derive(Clone)]
pub enum Mixer<'t> {
    Attention(AttentionVars<'t>),
    Conv(ConvVars<'t>),
}

#[derive(Clone)]
pub struct BlockVars<'t> {
    norm1: (Var<'t>, Var<'t>),
    mixer: Mixer<'t>,
    norm2: (Var<'t>, Var<'t>),
    fc1: (Var<'t>, Var<'t>),
    fc2: (Var<'t>, Var<'t>),
    act: Activation,
}

impl<'t> BlockVars<'t> {
    /// Binds `{prefix}.norm1`, `{prefix}.attn` or `{prefix}.conv`,
    /// `{prefix}.norm2` and `{prefix}.mlp`.
    pub fn bind(b: &Bound<'t>, prefix: &str, spec: &BlockSpec, local: bool) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        let mixer = match spec.kind {
            BlockKind::Attention => Mixer::Attention(AttentionVars::bind(
                b,
                &format!("{prefix}.attn"),
                spec.heads,
                local.then_some(spec.window),
            )?),
            BlockKind::Convolution => Mixer::Conv(ConvVars::bind(b, &format!("{prefix}.conv"))?),
        };
        Ok(Self {
            norm1: (v("norm1.gain")?, v("norm1.bias")?),
            mixer,
            norm2: (v("norm2.gain")?, v("norm2.bias")?),
            fc1: (v("mlp.fc1.weight")?, v("mlp.fc1.bias")?),
            fc2: (v("mlp.fc2.weight")?, v("mlp.fc2.bias")?),
            act: spec.act,
        })
    }

    fn mlp(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(self.fc1.0, Some(self.fc1.1))?
            .activation(self.act)
            .linear(self.fc2.0, Some(self.fc2.1))
    }
}

/// Inserts fresh parameters for one block under `prefix`.
pub fn init_block<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    spec: &BlockSpec,
    local: bool,
    rng: &mut R,
) -> Result<()> {
    ps.insert_layer(&format!("{prefix}.norm1"), &LayerParams::layernorm(dim))?;
    match spec.kind {
        BlockKind::Attention => {
            let attn = AttentionParams::init(dim, spec.heads, local.then_some(spec.window), rng)?;
            ps.insert_layer(&format!("{prefix}.attn"), &attn.layer)?;
        }
        BlockKind::Convolution => {
            ps.insert_layer(&format!("{prefix}.conv"), &LayerParams::depthwise_conv(dim, rng))?;
        }
    }
    ps.insert_layer(&format!("{prefix}.norm2"), &LayerParams::layernorm(dim))?;
    ps.insert_layer(&format!("{prefix}.mlp"), &LayerParams::mlp(dim, hidden, rng))
}

/// Pre-norm block over the `rows × cols` aggregated tokens: one joint
/// attention (or convolution over the window grid), then the MLP.
pub fn global_block_var<'t>(x: Var<'t>, b: &BlockVars<'t>, rows: usize, cols: usize) -> Result<Var<'t>> {
    let h = x.layernorm(b.norm1.0, b.norm1.1, LN_EPS)?;
    let mixed = match &b.mixer {
        Mixer::Attention(a) => msa_var(h, a, 1, None)?,
        Mixer::Conv(c) => conv_var(h, c, 1, rows, cols)?,
    };
    let x = x.add(mixed)?;
    let h = x.layernorm(b.norm2.0, b.norm2.1, LN_EPS)?;
    x.add(b.mlp(h)?)
}

pub fn global_block(zbar: &AggregatedMap, params: &ParamSet, prefix: &str, spec: &BlockSpec) -> Result<AggregatedMap> {
    let [r, c, ch] = zbar.shape() else {
        return shape_err("global_block", zbar.shape(), &[0, 0, 0]);
    };
    let tape = Tape::inference();
    let b = BlockVars::bind(&params.bind(&tape), prefix, spec, false)?;
    let x = tape.leaf(zbar.reshape(&[r * c, *ch])?);
    global_block_var(x, &b, *r, *c)?.value().reshape(zbar.shape())
}

/// One sparse sub-step on `[H·W, C]` tokens: kept windows (in the frame
/// shifted by `shift`) become `x + f(norm(x))`, all other tokens are copied.
fn sparse_substep<'t>(
    x: Var<'t>,
    grid: &WindowGrid,
    sel: &SparseSelection,
    shift: usize,
    norm: (Var<'t>, Var<'t>),
    f: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let t = grid.slots();
    let sources = grid.slot_sources(shift);
    let kept_sources: Vec<Option<usize>> = sel
        .kept
        .iter()
        .flat_map(|&w| sources[w * t..(w + 1) * t].iter().copied())
        .collect();
    let pad_zero: Vec<RowPick> = kept_sources
        .iter()
        .enumerate()
        .map(|(i, s)| if s.is_some() { RowPick::First(i) } else { RowPick::Zero })
        .collect();
    let gathered = x.gather_rows(kept_sources.into())?;
    let normed = gathered.layernorm(norm.0, norm.1, LN_EPS)?;
    let normed = Var::pick_rows(normed, normed, pad_zero.into())?;
    let updated = gathered.add(f(normed)?)?;
    let windows = x.gather_rows(sources.into())?;
    let fused = fuse_local_var(windows, updated, sel)?;
    let back: Vec<Option<usize>> = grid.token_slots(shift).into_iter().map(Some).collect();
    fused.gather_rows(back.into())
}

/// Sparse local block on unpadded tokens `[H·W, C]`. Attention blocks use
/// shift `shift` with `mask`; the FFN runs on the same kept windows in the
/// unshifted frame.
pub fn local_block_var<'t>(
    x: Var<'t>,
    grid: &WindowGrid,
    sel: &SparseSelection,
    b: &BlockVars<'t>,
    shift: usize,
    mask: Option<&ShiftMask>,
) -> Result<Var<'t>> {
    if sel.total != grid.num_windows() {
        return shape_err("local_block selection", &[sel.total], &[grid.num_windows()]);
    }
    if x.value().as_rows().0 != grid.h * grid.w {
        return shape_err("local_block", x.value().shape(), &[grid.h * grid.w]);
    }
    let k = sel.kept_count();
    let m = grid.window;
    let x = match &b.mixer {
        Mixer::Attention(a) => {
            let masks = mask.map(|mk| mk.subset(&sel.kept));
            sparse_substep(x, grid, sel, shift, b.norm1, |h| msa_var(h, a, k, masks.as_ref()))?
        }
        Mixer::Conv(c) => sparse_substep(x, grid, sel, 0, b.norm1, |h| conv_var(h, c, k, m, m))?,
    };
    sparse_substep(x, grid, sel, 0, b.norm2, |h| b.mlp(h))
}

/// Local block on a map; shifted attention blocks roll by `⌊M/2⌋`.
pub fn local_block(
    z: &FeatureMap,
    sel: &SparseSelection,
    params: &ParamSet,
    prefix: &str,
    spec: &BlockSpec,
    shifted: bool,
) -> Result<FeatureMap> {
    let [h, w, c] = z.shape() else {
        return shape_err("local_block", z.shape(), &[0, 0, 0]);
    };
    let grid = WindowGrid::new(*h, *w, spec.window)?;
    let shift = block_shift(spec, shifted);
    let mask = (shift > 0).then(|| ShiftMask::new(&grid, shift));
    let tape = Tape::inference();
    let b = BlockVars::bind(&params.bind(&tape), prefix, spec, true)?;
    let x = tape.leaf(z.reshape(&[h * w, *c])?);
    local_block_var(x, &grid, sel, &b, shift, mask.as_ref())?.value().reshape(z.shape())
}

/// Shift used by a local block: `⌊M/2⌋` for shifted attention blocks, 0 otherwise.
pub fn block_shift(spec: &BlockSpec, shifted: bool) -> usize {
    if shifted && spec.kind == BlockKind::Attention {
        spec.window / 2
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops};
    use crate::windowing::{crop, cyclic_shift, cyclic_unshift, pad_to_windows, window_partition, window_reverse, WindowConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec(kind: BlockKind, heads: usize, window: usize) -> BlockSpec {
        BlockSpec { kind, heads, window, act: Activation::Gelu }
    }

    fn randomize_rel_bias(p: &mut AttentionParams, seed: u64) {
        let shape = p.layer.tensor("rel_bias").unwrap().shape().to_vec();
        p.layer.set("rel_bias", Tensor::uniform(&shape, -0.5, 0.5, &mut rng(seed))).unwrap();
    }

    /// Explicit loops: scores, masked softmax, weighted sum, per head.
    fn brute_attention(x: &[f64], t: usize, c: usize, p: &AttentionParams, mask: Option<&Tensor>) -> Vec<f64> {
        let w = |n: &str| p.layer.tensor(n).unwrap().data().to_vec();
        let (qw, qb, kw, vw, vb, pw, pb) = (w("q.weight"), w("q.bias"), w("k.weight"), w("v.weight"), w("v.bias"), w("proj.weight"), w("proj.bias"));
        let proj = |wt: &[f64], b: Option<&[f64]>| {
            let mut out = vec![0.0; t * c];
            for i in 0..t {
                for j in 0..c {
                    let mut acc = b.map_or(0.0, |b| b[j]);
                    for l in 0..c {
                        acc += x[i * c + l] * wt[l * c + j];
                    }
                    out[i * c + j] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj(&qw, Some(&qb)), proj(&kw, None), proj(&vw, Some(&vb)));
        let d = c / p.heads;
        let rel = p.window.map(|m| (relative_index(m), p.layer.tensor("rel_bias").unwrap().clone()));
        let mut heads_out = vec![0.0; t * c];
        for h in 0..p.heads {
            for i in 0..t {
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let mut s = 0.0;
                        for e in 0..d {
                            s += q[i * c + h * d + e] * k[j * c + h * d + e];
                        }
                        s *= p.scale;
                        if let Some((idx, table)) = &rel {
                            s += table.get(&[idx[i * t + j], h]);
                        }
                        if let Some(mk) = mask {
                            s += mk.get(&[i, j]);
                        }
                        s
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter_mut().map(|s| {
                    *s = (*s - mx).exp();
                    *s
                }).sum();
                for e in 0..d {
                    heads_out[i * c + h * d + e] = (0..t).map(|j| scores[j] / z * v[j * c + h * d + e]).sum();
                }
            }
        }
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..c {
                out[i * c + j] = pb[j] + (0..c).map(|l| heads_out[i * c + l] * pw[l * c + j]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn relative_index_is_symmetric_around_center() {
        let idx = relative_index(2);
        assert_eq!(idx.len(), 16);
        for i in 0..4 {
            assert_eq!(idx[i * 4 + i], 4);
        }
        assert_eq!(idx[3], 0);
        assert_eq!(idx[12], 8);
    }

    #[test]
    fn w_msa_matches_brute_force() {
        let (m, c) = (3, 4);
        let mut p = AttentionParams::init(c, 2, Some(m), &mut rng(1)).unwrap();
        randomize_rel_bias(&mut p, 2);
        let x = Tensor::uniform(&[2, m * m, c], -1.0, 1.0, &mut rng(3));
        let grid = WindowGrid::new(3, 6, m).unwrap();
        let mask = ShiftMask::new(&grid, 1);
        assert!(mask.masks.iter().any(Option::is_some));
        for mk in [None, Some(&mask)] {
            let y = w_msa(&x, &p, mk).unwrap();
            for win in 0..2 {
                let rows = &x.data()[win * 36..(win + 1) * 36];
                let expect = brute_attention(rows, 9, c, &p, mk.and_then(|m| m.masks[win].as_ref()));
                for (a, b) in y.data()[win * 36..(win + 1) * 36].iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn w_msa_degenerate_and_equivariance() {
        let c = 4;
        let p1 = AttentionParams::init(c, 2, Some(1), &mut rng(4)).unwrap();
        let x = Tensor::uniform(&[3, 1, c], -1.0, 1.0, &mut rng(5));
        let y = w_msa(&x, &p1, None).unwrap();
        let x2 = x.reshape(&[3, c]).unwrap();
        let l = &p1.layer;
        let v = ops::linear(&x2, l.tensor("v.weight").unwrap(), Some(l.tensor("v.bias").unwrap())).unwrap();
        let out = ops::linear(&v, l.tensor("proj.weight").unwrap(), Some(l.tensor("proj.bias").unwrap())).unwrap();
        assert!(y.reshape(&[3, c]).unwrap().max_abs_diff(&out) < 1e-12);

        let p = AttentionParams::init(c, 2, Some(2), &mut rng(6)).unwrap();
        let x = Tensor::uniform(&[3, 4, c], -1.0, 1.0, &mut rng(7));
        let y = w_msa(&x, &p, None).unwrap();
        let perm = [2, 0, 1];
        let xp: Vec<f64> = perm.iter().flat_map(|&w| x.data()[w * 16..(w + 1) * 16].to_vec()).collect();
        let yp = w_msa(&Tensor::new(vec![3, 4, c], xp).unwrap(), &p, None).unwrap();
        for (i, &w) in perm.iter().enumerate() {
            assert_eq!(&yp.data()[i * 16..(i + 1) * 16], &y.data()[w * 16..(w + 1) * 16]);
        }

        let mut x3 = x.data().to_vec();
        x3[0] += 1.0;
        let y3 = w_msa(&Tensor::new(vec![3, 4, c], x3).unwrap(), &p, None).unwrap();
        assert_eq!(&y3.data()[16..], &y.data()[16..]);
    }

    #[test]
    fn w_msa_rejects_bad_mask() {
        let p = AttentionParams::init(4, 2, Some(2), &mut rng(8)).unwrap();
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng(9));
        let grid = WindowGrid::new(2, 2, 2).unwrap();
        let mask = ShiftMask::new(&grid, 1);
        assert!(w_msa(&x, &p, Some(&mask)).is_err());
        assert!(AttentionParams::init(5, 2, None, &mut rng(0)).is_err());
    }

    fn global_params(kind: BlockKind, dim: usize, heads: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_block(&mut ps, "g", dim, 2 * dim, &spec(kind, heads, 2), false, &mut rng(10)).unwrap();
        ps
    }

    #[test]
    fn global_attention_examples() {
        let dim = 4;
        let mut ps = global_params(BlockKind::Attention, dim, 2);
        for n in ["g.attn.q.weight", "g.attn.q.bias", "g.attn.k.weight"] {
            let shape = ps.get(n).unwrap().shape().to_vec();
            ps.insert(n, Tensor::zeros(&shape));
        }
        let tape = Tape::inference();
        let b = ps.bind(&tape);
        let a = AttentionVars::bind(&b, "g.attn", 2, None).unwrap();
        let x = Tensor::uniform(&[5, dim], -1.0, 1.0, &mut rng(11));
        let y = msa_var(tape.leaf(x.clone()), &a, 1, None).unwrap();
        let v = ops::linear(&x, ps.get("g.attn.v.weight").unwrap(), Some(ps.get("g.attn.v.bias").unwrap())).unwrap();
        let mean: Vec<f64> = (0..dim).map(|j| (0..5).map(|i| v.get(&[i, j])).sum::<f64>() / 5.0).collect();
        let mean = Tensor::new(vec![5, dim], mean.repeat(5)).unwrap();
        let expect = ops::linear(&mean, ps.get("g.attn.proj.weight").unwrap(), Some(ps.get("g.attn.proj.bias").unwrap())).unwrap();
        assert!(y.value().max_abs_diff(&expect) < 1e-12);

        let one = Tensor::uniform(&[1, dim], -1.0, 1.0, &mut rng(12));
        let ps = global_params(BlockKind::Attention, dim, 2);
        let tape = Tape::inference();
        let a = AttentionVars::bind(&ps.bind(&tape), "g.attn", 2, None).unwrap();
        let y = msa_var(tape.leaf(one.clone()), &a, 1, None).unwrap();
        let v = ops::linear(&one, ps.get("g.attn.v.weight").unwrap(), Some(ps.get("g.attn.v.bias").unwrap())).unwrap();
        let expect = ops::linear(&v, ps.get("g.attn.proj.weight").unwrap(), Some(ps.get("g.attn.proj.bias").unwrap())).unwrap();
        assert!(y.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn global_block_matches_dense_oracle() {
        let dim = 4;
        let ps = global_params(BlockKind::Attention, dim, 2);
        let zbar = Tensor::uniform(&[2, 2, dim], -1.0, 1.0, &mut rng(13));
        let y = global_block(&zbar, &ps, "g", &spec(BlockKind::Attention, 2, 2)).unwrap();
        let layer = |p: &str, kind| {
            let mut l = LayerParams::new(kind);
            for (n, t) in ps.iter().filter_map(|(n, t)| n.strip_prefix(p).map(|s| (s, t))) {
                l = l.with(n, t.clone());
            }
            l
        };
        let x = zbar.reshape(&[4, dim]).unwrap();
        let attn = AttentionParams::new(layer("g.attn.", LayerKind::AttentionProjection), 2, None).unwrap();
        let h = ops::layernorm(&x, &layer("g.norm1.", LayerKind::LayerNorm), LN_EPS).unwrap();
        let a = brute_attention(h.data(), 4, dim, &attn, None);
        let x1 = ops::add(&x, &Tensor::new(vec![4, dim], a).unwrap()).unwrap();
        let h2 = ops::layernorm(&x1, &layer("g.norm2.", LayerKind::LayerNorm), LN_EPS).unwrap();
        let out = ops::add(&x1, &ops::mlp_forward(&h2, &layer("g.mlp.", LayerKind::Mlp), Activation::Gelu).unwrap()).unwrap();
        assert!(y.reshape(&[4, dim]).unwrap().max_abs_diff(&out) < 1e-10);
    }

    #[test]
    fn conv_examples() {
        let c = 3;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let mut dw = vec![0.0; 9 * c];
        dw[4 * c..5 * c].fill(1.0);
        let p = LayerParams::new(LayerKind::DepthwiseConv)
            .with("depthwise.weight", Tensor::new(vec![9, c], dw).unwrap())
            .with("pointwise.weight", Tensor::new(vec![c, c], eye).unwrap())
            .with("pointwise.bias", Tensor::zeros(&[c]));
        let z = Tensor::uniform(&[3, 4, c], -1.0, 1.0, &mut rng(14));
        assert!(conv_local_layer(&z, &p).unwrap().bitwise_eq(&z));

        let zero = LayerParams::new(LayerKind::DepthwiseConv)
            .with("depthwise.weight", Tensor::zeros(&[9, c]))
            .with("pointwise.weight", Tensor::zeros(&[c, c]))
            .with("pointwise.bias", Tensor::zeros(&[c]));
        assert!(conv_local_layer(&z, &zero).unwrap().data().iter().all(|v| *v == 0.0));

        let r = LayerParams::depthwise_conv(c, &mut rng(15));
        let y = conv_local_layer(&z, &r).unwrap();
        let (dw, pw, pb) = (r.tensor("depthwise.weight").unwrap(), r.tensor("pointwise.weight").unwrap(), r.tensor("pointwise.bias").unwrap());
        for i in 0..3 {
            for j in 0..4 {
                let mut mid = vec![0.0; c];
                for (ch, m) in mid.iter_mut().enumerate() {
                    for di in -1i32..=1 {
                        for dj in -1i32..=1 {
                            let (yy, xx) = (i as i32 + di, j as i32 + dj);
                            if (0..3).contains(&yy) && (0..4).contains(&xx) {
                                let tap = ((di + 1) * 3 + dj + 1) as usize;
                                *m += dw.get(&[tap, ch]) * z.get(&[yy as usize, xx as usize, ch]);
                            }
                        }
                    }
                }
                for o in 0..c {
                    let v = pb.data()[o] + (0..c).map(|k| mid[k] * pw.get(&[k, o])).sum::<f64>();
                    assert!((y.get(&[i, j, o]) - v).abs() < 1e-12);
                }
            }
        }
    }

    fn local_params(kind: BlockKind, dim: usize, heads: usize, m: usize, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init_block(&mut ps, "l", dim, 2 * dim, &spec(kind, heads, m), true, &mut rng(seed)).unwrap();
        if kind == BlockKind::Attention {
            let shape = ps.get("l.attn.rel_bias").unwrap().shape().to_vec();
            ps.insert("l.attn.rel_bias", Tensor::uniform(&shape, -0.5, 0.5, &mut rng(seed + 1)));
        }
        ps
    }

    fn sub_layer(ps: &ParamSet, prefix: &str, kind: LayerKind) -> LayerParams {
        let mut l = LayerParams::new(kind);
        for (n, t) in ps.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t))) {
            l = l.with(n, t.clone());
        }
        l
    }

    /// Dense block: norm the whole map, pad, roll, partition, attend, reverse,
    /// unroll, crop, residual; then a dense FFN.
    fn dense_block(z: &Tensor, ps: &ParamSet, heads: usize, m: usize, shift: usize) -> Tensor {
        let [h, w, c] = *z.shape() else { unreachable!() };
        let attn = AttentionParams::new(sub_layer(ps, "l.attn.", LayerKind::AttentionProjection), heads, Some(m)).unwrap();
        let n1 = sub_layer(ps, "l.norm1.", LayerKind::LayerNorm);
        let normed = ops::layernorm(&z.reshape(&[h * w, c]).unwrap(), &n1, LN_EPS).unwrap().reshape(&[h, w, c]).unwrap();
        let cfg = WindowConfig::new(m).unwrap();
        let (padded, grid) = pad_to_windows(&normed, &cfg).unwrap();
        let shifted = cyclic_shift(&padded, shift).unwrap();
        let wins = window_partition(&shifted, &grid).unwrap();
        let mask = (shift > 0).then(|| ShiftMask::new(&grid, shift));
        let mut out = Vec::new();
        for win in 0..grid.num_windows() {
            let rows = &wins.data()[win * m * m * c..(win + 1) * m * m * c];
            let mk = mask.as_ref().and_then(|mk| mk.masks[win].as_ref());
            out.extend(brute_attention(rows, m * m, c, &attn, mk));
        }
        let att = Tensor::new(wins.shape().to_vec(), out).unwrap();
        let back = cyclic_unshift(&window_reverse(&att, &grid).unwrap(), shift).unwrap();
        let x1 = ops::add(z, &crop(&back, h, w).unwrap()).unwrap().reshape(&[h * w, c]).unwrap();
        let n2 = sub_layer(ps, "l.norm2.", LayerKind::LayerNorm);
        let ffn = ops::mlp_forward(&ops::layernorm(&x1, &n2, LN_EPS).unwrap(), &sub_layer(ps, "l.mlp.", LayerKind::Mlp), Activation::Gelu).unwrap();
        ops::add(&x1, &ffn).unwrap().reshape(&[h, w, c]).unwrap()
    }

    #[test]
    fn keep_all_matches_dense_block() {
        let (m, dim, heads) = (3, 4, 2);
        let ps = local_params(BlockKind::Attention, dim, heads, m, 20);
        for (h, w) in [(6, 6), (5, 7)] {
            let z = Tensor::uniform(&[h, w, dim], -1.0, 1.0, &mut rng(21));
            let grid = WindowGrid::new(h, w, m).unwrap();
            for shifted in [false, true] {
                let y = local_block(&z, &SparseSelection::full(grid.num_windows()), &ps, "l", &spec(BlockKind::Attention, heads, m), shifted).unwrap();
                let expect = dense_block(&z, &ps, heads, m, if shifted { 1 } else { 0 });
                assert!(y.max_abs_diff(&expect) < 1e-10, "{h}x{w} shifted={shifted}");
            }
        }
    }

    #[test]
    fn non_kept_windows_are_untouched() {
        let (m, dim) = (2, 4);
        let z = Tensor::uniform(&[4, 6, dim], -1.0, 1.0, &mut rng(22));
        let grid = WindowGrid::new(4, 6, m).unwrap();
        let sel = SparseSelection::from_kept(6, vec![0, 4], 0.33).unwrap();
        for kind in [BlockKind::Attention, BlockKind::Convolution] {
            let ps = local_params(kind, dim, 2, m, 23);
            let y = local_block(&z, &sel, &ps, "l", &spec(kind, 2, m), false).unwrap();
            for r in 0..4 {
                for c in 0..6 {
                    let same = (0..dim).all(|ch| y.get(&[r, c, ch]).to_bits() == z.get(&[r, c, ch]).to_bits());
                    assert_eq!(same, !sel.is_kept(grid.window_at(r, c)), "token ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn shifted_block_keeps_constant_map_constant() {
        let (m, dim) = (2, 4);
        let mut ps = local_params(BlockKind::Attention, dim, 2, m, 24);
        ps.insert("l.attn.rel_bias", Tensor::zeros(&[9, 2]));
        let z = Tensor::full(&[4, 4, dim], 0.7);
        let y = local_block(&z, &SparseSelection::full(4), &ps, "l", &spec(BlockKind::Attention, 2, m), true).unwrap();
        let first = y.data()[..dim].to_vec();
        for t in 0..16 {
            for ch in 0..dim {
                assert!((y.data()[t * dim + ch] - first[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_mask_labels() {
        let grid = WindowGrid::new(4, 4, 2).unwrap();
        let mask = ShiftMask::new(&grid, 1);
        assert!(mask.masks[0].is_none());
        assert!(mask.masks[1].is_some() && mask.masks[2].is_some());
        let last = mask.masks[3].as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { MASK_VALUE };
                assert_eq!(last.get(&[i, j]), expect);
            }
        }
        assert_eq!(mask.subset(&[3, 0]).masks[1], None);
    }

    #[test]
    fn blocks_match_finite_differences() {
        let (m, dim) = (2, 4);
        let grid = WindowGrid::new(3, 4, m).unwrap();
        let sel = SparseSelection::from_kept(4, vec![1, 2], 0.5).unwrap();
        let x = Tensor::uniform(&[12, dim], -1.0, 1.0, &mut rng(30));
        let wsum = Tensor::uniform(&[12, dim], -1.0, 1.0, &mut rng(31));
        for kind in [BlockKind::Attention, BlockKind::Convolution] {
            let ps = local_params(kind, dim, 2, m, 32);
            let sp = spec(kind, 2, m);
            let mask = ShiftMask::new(&grid, 1);
            let shift = block_shift(&sp, true);
            let f = scalar_fn(|_, v| {
                let b = BlockVars::bind(&ps.bind(v.tape()), "l", &sp, true).unwrap();
                local_block_var(v, &grid, &sel, &b, shift, Some(&mask)).unwrap().dot_const(&wsum).unwrap()
            });
            let err = finite_diff_check(&f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind:?} local {err}");

            let gp = global_params(kind, dim, 2);
            let w6 = Tensor::uniform(&[6, dim], -1.0, 1.0, &mut rng(33));
            let g = scalar_fn(|_, v| {
                let b = BlockVars::bind(&gp.bind(v.tape()), "g", &sp, false).unwrap();
                global_block_var(v, &b, 2, 3).unwrap().dot_const(&w6).unwrap()
            });
            let x6 = Tensor::uniform(&[6, dim], -1.0, 1.0, &mut rng(34));
            let err = finite_diff_check(&g, &x6, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind:?} global {err}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (m, dim) = (2, 4);
        let grid = WindowGrid::new(4, 4, m).unwrap();
        let sel = SparseSelection::from_kept(4, vec![0, 3], 0.5).unwrap();
        let ps = local_params(BlockKind::Attention, dim, 2, m, 40);
        let x = Tensor::uniform(&[16, dim], -1.0, 1.0, &mut rng(41));
        let wsum = Tensor::uniform(&[16, dim], -1.0, 1.0, &mut rng(42));
        let sp = spec(BlockKind::Attention, 2, m);
        let mask = ShiftMask::new(&grid, 1);
        for name in ["l.attn.rel_bias", "l.attn.q.weight", "l.mlp.fc1.weight", "l.norm1.gain"] {
            let f = scalar_fn(|tape, p| {
                let b = ps.bind(tape).replace(name, p);
                let bv = BlockVars::bind(&b, "l", &sp, true).unwrap();
                local_block_var(tape.leaf(x.clone()), &grid, &sel, &bv, 1, Some(&mask)).unwrap().dot_const(&wsum).unwrap()
            });
            let err = finite_diff_check(&f, ps.get(name).unwrap(), 1e-5).unwrap();
            assert!(err < 1e-4, "{name} {err}");
        }
    }

    fn scalar_fn<F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>(f: F) -> F {
        f
    }
}
