//! The four-stage backbone: patch embedding, then stages of global blocks
//! on aggregated tokens followed by sparse local blocks, with 2×2 patch
//! merging between stages.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    block_shift, global_block_var, init_block, local_block_var, BlockKind, BlockSpec, BlockVars, ShiftMask,
};
use crate::error::{shape_err, Error, Result};
use crate::sparsify::{
    fuse_global_var, gumbel_relax_var, schedule_ratios, score_logits_var, select_topk, RatioSchedule,
    ResidualTransform, ScoreVector, SparseSelection,
};
use crate::tensor::{Activation, Bound, FeatureMap, ParamSet, Tape, Tensor, Var};
use crate::windowing::{WindowConfig, WindowGrid};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub ratio: f64,
    #[serde(default)]
    pub kind: BlockKind,
}

impl StageConfig {
    /// Leading blocks are global, the rest local.
    pub fn global_blocks(&self) -> usize {
        self.depth.div_ceil(2)
    }

    pub fn local_blocks(&self) -> usize {
        self.depth - self.global_blocks()
    }

    /// `'G'`/`'L'` per block.
    pub fn pattern(&self) -> Vec<char> {
        (0..self.depth).map(|i| if i < self.global_blocks() { 'G' } else { 'L' }).collect()
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            kind: self.kind,
            heads: self.heads,
            window: self.window,
            act: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub version: u32,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub transform: ResidualTransform,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_temperature() -> f64 {
    1.0
}

impl BackboneConfig {
    /// Patch 4, dims 32/64/128/256, heads 2/2/4/4, depth 2, window 7.
    pub fn toy() -> Self {
        let stages = [(32, 2), (64, 2), (128, 4), (256, 4)]
            .into_iter()
            .map(|(dim, heads)| StageConfig {
                depth: 2,
                dim,
                heads,
                window: 7,
                ratio: 1.0,
                kind: BlockKind::Attention,
            })
            .collect();
        Self {
            version: CONFIG_VERSION,
            patch_size: 4,
            in_channels: 3,
            mlp_ratio: 4,
            stages,
            mode: Mode::Infer,
            transform: ResidualTransform::Identity,
            temperature: 1.0,
        }
    }

    pub fn with_schedule(mut self, schedule: &RatioSchedule) -> Result<Self> {
        if schedule.0.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} ratios for {} stages",
                schedule.0.len(),
                self.stages.len()
            )));
        }
        for (s, &r) in self.stages.iter_mut().zip(&schedule.0) {
            s.ratio = r;
        }
        Ok(self)
    }

    pub fn with_keep_ratio(self, k: f64) -> Result<Self> {
        self.with_schedule(&schedule_ratios(k)?)
    }

    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        for s in &mut self.stages {
            s.kind = kind;
        }
        self
    }

    pub fn schedule(&self) -> RatioSchedule {
        RatioSchedule(self.stages.iter().map(|s| s.ratio).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch size, channels and mlp ratio must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        RatioSchedule::new(self.schedule().0)?;
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.window == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::Config(format!("stage {i}: invalid depth/window/heads")));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return Err(Error::Config(format!(
                    "stage {i} dim {} must double stage {} dim {}",
                    s.dim,
                    i - 1,
                    self.stages[i - 1].dim
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Token grid `(h, w)` of each stage for an image of `h × w` pixels.
    pub fn stage_grids(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut g = (h.div_ceil(self.patch_size), w.div_ceil(self.patch_size));
        let mut out = vec![g];
        for _ in 1..self.stages.len() {
            g = (g.0.div_ceil(2), g.1.div_ceil(2));
            out.push(g);
        }
        out
    }
}

pub fn stage_prefix(i: usize) -> String {
    format!("stages.{i}")
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let p = cfg.patch_size;
    let fan_in = p * p * cfg.in_channels;
    let c0 = cfg.stages[0].dim;
    ps.insert("patch_embed.weight", Tensor::randn(&[fan_in, c0], (fan_in as f64).powf(-0.5), &mut rng));
    ps.insert("patch_embed.bias", Tensor::randn(&[c0], 0.02, &mut rng));
    for (i, s) in cfg.stages.iter().enumerate() {
        let n = s.window * s.window * s.dim;
        ps.insert(
            format!("{}.score.weight", stage_prefix(i)),
            Tensor::randn(&[n, 1], (n as f64).powf(-0.5), &mut rng),
        );
        for b in 0..s.depth {
            let local = b >= s.global_blocks();
            init_block(&mut ps, &block_prefix(i, b), s.dim, cfg.mlp_ratio * s.dim, &s.spec(), local, &mut rng)?;
        }
        if i + 1 < cfg.stages.len() {
            let fan = 4 * s.dim;
            ps.insert(
                format!("merges.{i}.weight"),
                Tensor::randn(&[fan, 2 * s.dim], (fan as f64).powf(-0.5), &mut rng),
            );
        }
    }
    Ok(ps)
}

fn unfold_patches(image: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let [h, w, ch] = image.shape() else {
        return shape_err("patch_embed", image.shape(), &[0, 0, 3]);
    };
    let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
    let d = image.data();
    let mut out = vec![0.0; gh * gw * p * p * ch];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * p * p * ch;
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    if y < *h && x < *w {
                        let src = (y * w + x) * ch;
                        let dst = base + (py * p + px) * ch;
                        out[dst..dst + ch].copy_from_slice(&d[src..src + ch]);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, p * p * ch], out)?, gh, gw))
}

/// Flattens each `p × p` patch (row-major pixels, channels innermost) and
/// projects it; the image is zero-padded to whole patches.
pub fn patch_embed_var<'t>(
    tape: &'t Tape,
    image: &Tensor,
    patch: usize,
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<(Var<'t>, usize, usize)> {
    let (cols, gh, gw) = unfold_patches(image, patch)?;
    let y = tape.leaf(cols).linear(weight, Some(bias))?;
    Ok((y, gh, gw))
}

pub fn patch_embed(image: &Tensor, patch: usize, params: &ParamSet) -> Result<FeatureMap> {
    let tape = Tape::inference();
    let b = params.bind(&tape);
    let (y, gh, gw) = patch_embed_var(&tape, image, patch, b.var("patch_embed.weight")?, b.var("patch_embed.bias")?)?;
    let c = y.value().as_rows().1;
    y.value().reshape(&[gh, gw, c])
}

/// Row sources of the four 2×2 neighbours, Swin order: `(0,0)`, `(1,0)`,
/// `(0,1)`, `(1,1)`. Odd maps are zero-padded at the bottom and right.
fn merge_sources(h: usize, w: usize) -> [Vec<Option<usize>>; 4] {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(dy, dx)| {
        (0..h2 * w2)
            .map(|o| {
                let (y, x) = (2 * (o / w2) + dy, 2 * (o % w2) + dx);
                (y < h && x < w).then_some(y * w + x)
            })
            .collect()
    })
}

pub fn patch_merge_var<'t>(x: Var<'t>, h: usize, w: usize, weight: Var<'t>) -> Result<(Var<'t>, usize, usize)> {
    let parts = merge_sources(h, w)
        .into_iter()
        .map(|idx| x.gather_rows(idx.into()))
        .collect::<Result<Vec<_>>>()?;
    let y = Var::concat_cols(&parts)?.matmul(weight)?;
    Ok((y, h.div_ceil(2), w.div_ceil(2)))
}

/// `(H, W, C)` to `(⌈H/2⌉, ⌈W/2⌉, 2C)`: concatenate 2×2 neighbours, then a
/// bias-free `4C → 2C` projection.
pub fn patch_merge(z: &FeatureMap, weight: &Tensor) -> Result<FeatureMap> {
    let [h, w, c] = z.shape() else {
        return shape_err("patch_merge", z.shape(), &[0, 0, 0]);
    };
    if weight.shape() != [4 * c, 2 * c] {
        return shape_err("patch_merge", weight.shape(), &[4 * c, 2 * c]);
    }
    let tape = Tape::inference();
    let x = tape.leaf(z.reshape(&[h * w, *c])?);
    let (y, h2, w2) = patch_merge_var(x, *h, *w, tape.leaf(weight.clone()))?;
    y.value().reshape(&[h2, w2, 2 * c])
}

/// Uniform `(0, 1)` samples for the Gumbel relaxation of each stage.
#[derive(Clone, Debug)]
pub struct GumbelNoise {
    seed: u64,
}

impl GumbelNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stage(&self, stage: usize, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(stage as u64));
        rng.set_stream(1);
        (0..n).map(|_| rng.gen_range(f64::EPSILON..1.0)).collect()
    }
}

/// Stage result on the tape.
pub struct StageVars<'t> {
    pub tokens: Var<'t>,
    /// Tokens after global fusion, before the first local block.
    pub pre_local: Var<'t>,
    pub scores: Var<'t>,
    pub selection: SparseSelection,
    pub grid: WindowGrid,
}

/// One stage on `[H·W, C]` tokens: score the input windows, run the global
/// blocks on aggregated tokens and fuse, then the local blocks on the kept
/// windows. `noise` switches on training mode.
pub fn stage_var<'t>(
    x: Var<'t>,
    grid: &WindowGrid,
    cfg: &StageConfig,
    bound: &Bound<'t>,
    stage: usize,
    transform: ResidualTransform,
    noise: Option<(&[f64], f64)>,
) -> Result<StageVars<'t>> {
    let wcfg = WindowConfig::new(cfg.window)?;
    if grid.window != cfg.window {
        return Err(Error::Config("grid window differs from stage window".into()));
    }
    let weight = bound.var(&format!("{}.score.weight", stage_prefix(stage)))?;
    let logits = score_logits_var(x, &wcfg, grid, weight, transform)?;
    let scores = match noise {
        Some((u, t)) => gumbel_relax_var(logits, t, u)?,
        None => logits.softmax()?,
    };
    let sel = select_topk(&ScoreVector(scores.value().data().to_vec()), cfg.ratio)?;
    let spec = cfg.spec();

    let mut zbar = x.mix_rows(Rc::new(grid.aggregate_groups(&wcfg)?))?;
    for b in 0..cfg.global_blocks() {
        let bv = BlockVars::bind(bound, &block_prefix(stage, b), &spec, false)?;
        zbar = global_block_var(zbar, &bv, grid.rows, grid.cols)?;
    }
    let z_global = zbar.mix_rows(Rc::new(grid.broadcast_token_groups(&wcfg)?))?;
    let pre_local = fuse_global_var(x, z_global, scores, grid, noise.is_some())?;
    let mut x = pre_local;

    for j in 0..cfg.local_blocks() {
        let bv = BlockVars::bind(bound, &block_prefix(stage, cfg.global_blocks() + j), &spec, true)?;
        let shift = block_shift(&spec, j % 2 == 1);
        let mask = (shift > 0).then(|| ShiftMask::new(grid, shift));
        x = local_block_var(x, grid, &sel, &bv, shift, mask.as_ref())?;
    }
    Ok(StageVars {
        tokens: x,
        pre_local,
        scores,
        selection: sel,
        grid: *grid,
    })
}

/// The whole backbone on a tape; one entry per stage.
pub fn backbone_var<'t>(
    tape: &'t Tape,
    image: &Tensor,
    cfg: &BackboneConfig,
    bound: &Bound<'t>,
    noise: Option<&GumbelNoise>,
) -> Result<Vec<StageVars<'t>>> {
    cfg.validate()?;
    if image.rank() != 3 || image.shape()[2] != cfg.in_channels {
        return shape_err("backbone image", image.shape(), &[0, 0, cfg.in_channels]);
    }
    let (mut x, mut h, mut w) = patch_embed_var(
        tape,
        image,
        cfg.patch_size,
        bound.var("patch_embed.weight")?,
        bound.var("patch_embed.bias")?,
    )?;
    let mut out = Vec::with_capacity(cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        if i > 0 {
            (x, h, w) = patch_merge_var(x, h, w, bound.var(&format!("merges.{}.weight", i - 1))?)?;
        }
        let grid = WindowGrid::new(h, w, s.window)?;
        let u = noise.map(|n| n.stage(i, grid.num_windows()));
        let st = stage_var(x, &grid, s, bound, i, cfg.transform, u.as_deref().map(|u| (u, cfg.temperature)))?;
        x = st.tokens;
        out.push(st);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub map: FeatureMap,
    pub pre_local: FeatureMap,
    pub scores: ScoreVector,
    pub selection: SparseSelection,
    pub grid: WindowGrid,
}

fn collect(stages: Vec<StageVars<'_>>) -> Result<Vec<StageOutput>> {
    stages
        .into_iter()
        .map(|s| {
            let c = s.tokens.value().as_rows().1;
            Ok(StageOutput {
                map: s.tokens.value().reshape(&[s.grid.h, s.grid.w, c])?,
                pre_local: s.pre_local.value().reshape(&[s.grid.h, s.grid.w, c])?,
                scores: ScoreVector(s.scores.value().data().to_vec()),
                selection: s.selection,
                grid: s.grid,
            })
        })
        .collect()
}

/// Stage-wise outputs. `noise` is required in training mode.
pub fn run_backbone(
    image: &Tensor,
    cfg: &BackboneConfig,
    params: &ParamSet,
    noise: Option<&GumbelNoise>,
) -> Result<Vec<StageOutput>> {
    let noise = match (cfg.mode, noise) {
        (Mode::Infer, _) => None,
        (Mode::Train, Some(n)) => Some(n),
        (Mode::Train, None) => return Err(Error::Usage("training mode needs gumbel noise".into())),
    };
    let tape = Tape::inference();
    let bound = params.bind(&tape);
    collect(backbone_var(&tape, image, cfg, &bound, noise)?)
}

/// A single stage on a map, for stage-level checks.
pub fn run_stage(
    z: &FeatureMap,
    cfg: &StageConfig,
    params: &ParamSet,
    stage: usize,
    transform: ResidualTransform,
    noise: Option<(&[f64], f64)>,
) -> Result<StageOutput> {
    let [h, w, c] = z.shape() else {
        return shape_err("run_stage", z.shape(), &[0, 0, 0]);
    };
    let grid = WindowGrid::new(*h, *w, cfg.window)?;
    let tape = Tape::inference();
    let bound = params.bind(&tape);
    let x = tape.leaf(z.reshape(&[h * w, *c])?);
    let st = stage_var(x, &grid, cfg, &bound, stage, transform, noise)?;
    Ok(collect(vec![st])?.remove(0))
}
