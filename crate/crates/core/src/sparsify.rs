//! Window scoring and selection: the residual ScoreNet, hard top-K selection
//! with its one-hot matrix, the keeping-ratio schedule, the Gumbel-Softmax
//! relaxation used in training, and the global/local fusion updates.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, FeatureMap, LayerKind, LayerParams, RowPick, Tape, Tensor, Var};
use crate::windowing::{WindowConfig, WindowGrid};

/// What the ScoreNet sees for each token, relative to its window mean `ẑ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualTransform {
    /// `z - ẑ`
    #[default]
    Identity,
    /// `|z - ẑ|`
    Absolute,
    /// `(z - ẑ)²`
    Squared,
    /// `z`
    Raw,
    /// `ẑ`
    Aggregated,
}

impl std::str::FromStr for ResidualTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "absolute" | "abs" => Self::Absolute,
            "squared" => Self::Squared,
            "raw" => Self::Raw,
            "aggregated" => Self::Aggregated,
            other => return Err(Error::Config(format!("unknown residual transform `{other}`"))),
        })
    }
}

/// A bias-free linear map from a flattened `M·M·C` window to one logit.
/// A bias would shift every logit equally and cancel in the softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetParams {
    pub linear: LayerParams,
    pub transform: ResidualTransform,
}

impl ScoreNetParams {
    pub fn new(weight: Tensor, transform: ResidualTransform) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[1] != 1 {
            return shape_err("ScoreNetParams", weight.shape(), &[0, 1]);
        }
        Ok(Self {
            linear: LayerParams::new(LayerKind::Linear).with("weight", weight),
            transform,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.linear.tensor("weight").expect("constructed with a weight")
    }
}

/// Nonnegative window scores summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The decision mask `A` and the kept window indices it encodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSelection {
    pub total: usize,
    pub mask: Vec<bool>,
    pub kept: Vec<usize>,
    pub ratio: f64,
}

impl SparseSelection {
    pub fn full(total: usize) -> Self {
        Self {
            total,
            mask: vec![true; total],
            kept: (0..total).collect(),
            ratio: 1.0,
        }
    }

    pub fn from_kept(total: usize, mut kept: Vec<usize>, ratio: f64) -> Result<Self> {
        kept.sort_unstable();
        let before = kept.len();
        kept.dedup();
        if kept.len() != before || kept.iter().any(|&i| i >= total) {
            return Err(Error::Validation(format!("kept indices {kept:?} invalid for {total} windows")));
        }
        let mut mask = vec![false; total];
        for &i in &kept {
            mask[i] = true;
        }
        Ok(Self { total, mask, kept, ratio })
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn is_kept(&self, window: usize) -> bool {
        self.mask[window]
    }

    /// Row of `window` inside the gathered `K`-window tensor.
    pub fn position(&self, window: usize) -> Option<usize> {
        self.kept.binary_search(&window).ok()
    }

    /// The one-hot `K × N` matrix `S` with `S·Z` gathering kept windows.
    pub fn one_hot(&self) -> Tensor {
        let k = self.kept.len().max(1);
        let mut data = vec![0.0; k * self.total];
        for (row, &w) in self.kept.iter().enumerate() {
            data[row * self.total + w] = 1.0;
        }
        Tensor::new(vec![k, self.total], data).expect("positive dims")
    }

    pub fn validate(&self) -> Result<()> {
        let ones = self.mask.iter().filter(|m| **m).count();
        let increasing = self.kept.windows(2).all(|p| p[0] < p[1]);
        let consistent = self.kept.iter().all(|&i| i < self.total && self.mask[i]);
        if self.mask.len() != self.total || ones != self.kept.len() || !increasing || !consistent {
            return Err(Error::Validation("selection mask and kept indices disagree".into()));
        }
        Ok(())
    }
}

/// Per-stage keeping ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule(pub Vec<f64>);

impl RatioSchedule {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        for &r in &ratios {
            check_ratio(r)?;
        }
        Ok(Self(ratios))
    }

    pub fn stage(&self, i: usize) -> f64 {
        self.0[i]
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("keeping ratio {r} outside (0, 1]")));
    }
    Ok(())
}

/// `[k, k², k³, k⁴]`.
pub fn schedule_ratios(k: f64) -> Result<RatioSchedule> {
    check_ratio(k)?;
    RatioSchedule::new((1..=4).map(|p| k.powi(p)).collect())
}

/// `K = max(1, round(ratio·N))`.
pub fn kept_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total.max(1))
}

/// Ordering applied among equal scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    LowerIndex,
    /// Fault-injection variant: prefer the higher index.
    HigherIndex,
}

pub fn select_topk(s: &ScoreVector, ratio: f64) -> Result<SparseSelection> {
    select_topk_with(s, ratio, TieBreak::LowerIndex)
}

pub fn select_topk_with(s: &ScoreVector, ratio: f64, tie: TieBreak) -> Result<SparseSelection> {
    check_ratio(ratio)?;
    if s.is_empty() {
        return Err(Error::Validation("no windows to select from".into()));
    }
    let k = kept_count(ratio, s.len());
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| {
        s.0[b].total_cmp(&s.0[a]).then(match tie {
            TieBreak::LowerIndex => a.cmp(&b),
            TieBreak::HigherIndex => b.cmp(&a),
        })
    });
    order.truncate(k);
    SparseSelection::from_kept(s.len(), order, ratio)
}

/// `-ln(-ln u)` for `u` in `(0, 1)`.
pub fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

fn gumbel_offsets(noise: &[f64], n: usize) -> Result<Tensor> {
    if noise.len() != n {
        return shape_err("gumbel noise", &[n], &[noise.len()]);
    }
    if noise.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::Validation("gumbel noise must lie in (0, 1)".into()));
    }
    Tensor::new(vec![1, n], noise.iter().map(|&u| gumbel(u)).collect())
}

/// `softmax((logits + g) / T)` on a `[1, N]` logit row.
pub fn gumbel_relax_var<'t>(logits: Var<'t>, temperature: f64, noise: &[f64]) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = logits.value().numel();
    let g = gumbel_offsets(noise, n)?;
    logits.reshape(&[1, n])?.add_const(&g)?.scale(1.0 / temperature).softmax()
}

pub fn gumbel_relax(logits: &Tensor, temperature: f64, noise: &[f64]) -> Result<ScoreVector> {
    let tape = Tape::inference();
    let y = gumbel_relax_var(tape.leaf(logits.clone()), temperature, noise)?;
    Ok(ScoreVector(y.value().data().to_vec()))
}

/// Per-window ScoreNet logits, `[1, N]`, from unpadded tokens `[H·W, C]`.
pub fn score_logits_var<'t>(
    x: Var<'t>,
    cfg: &WindowConfig,
    grid: &WindowGrid,
    weight: Var<'t>,
    transform: ResidualTransform,
) -> Result<Var<'t>> {
    let c = x.value().as_rows().1;
    let windows = x.gather_rows(grid.slot_sources(0).into())?;
    let zbar = x.mix_rows(Rc::new(grid.aggregate_groups(cfg)?))?;
    let zhat = zbar.mix_rows(Rc::new(grid.broadcast_slot_groups(cfg)?))?;
    let feature = match transform {
        ResidualTransform::Identity => windows.sub(zhat)?,
        ResidualTransform::Absolute => windows.sub(zhat)?.abs(),
        ResidualTransform::Squared => windows.sub(zhat)?.square(),
        ResidualTransform::Raw => windows,
        ResidualTransform::Aggregated => zhat,
    };
    let n = grid.num_windows();
    let flat = feature.reshape(&[n, grid.slots() * c])?;
    flat.matmul(weight)?.reshape(&[1, n])
}

/// ScoreNet on a padded map: residual transform, flatten per window, linear
/// to one logit, softmax over windows.
pub fn score_windows(
    z: &FeatureMap,
    cfg: &WindowConfig,
    grid: &WindowGrid,
    params: &ScoreNetParams,
) -> Result<ScoreVector> {
    let [h, w, c] = z.shape() else {
        return shape_err("score_windows", z.shape(), &[0, 0, 0]);
    };
    if (*h, *w) != (grid.h_pad, grid.w_pad) {
        return Err(Error::Usage("score_windows expects a map padded to its grid".into()));
    }
    let padded_grid = WindowGrid::new(*h, *w, grid.window)?;
    let tape = Tape::inference();
    let x = tape.leaf(z.reshape(&[h * w, *c])?);
    let wv = tape.leaf(params.weight().clone());
    let s = score_logits_var(x, cfg, &padded_grid, wv, params.transform)?.softmax()?;
    Ok(ScoreVector(s.value().data().to_vec()))
}

/// `z + z_global` in inference, `z + (1 - s_w)·z_global` in training, on
/// `[H·W, C]` tokens.
pub fn fuse_global_var<'t>(
    z: Var<'t>,
    z_global: Var<'t>,
    scores: Var<'t>,
    grid: &WindowGrid,
    training: bool,
) -> Result<Var<'t>> {
    if !training {
        return z.add(z_global);
    }
    let n = grid.num_windows();
    let per_window = scores.reshape(&[n, 1])?;
    let idx: Vec<Option<usize>> = (0..grid.h)
        .flat_map(|y| (0..grid.w).map(move |x| Some(grid.window_at(y, x))))
        .collect();
    let keep = per_window.gather_rows(idx.into())?.rsub_scalar(1.0);
    z.add(z_global.mul_rows(keep)?)
}

pub fn fuse_global(
    z: &FeatureMap,
    z_global: &FeatureMap,
    s: &ScoreVector,
    grid: &WindowGrid,
    training: bool,
) -> Result<FeatureMap> {
    if z.shape() != z_global.shape() {
        return shape_err("fuse_global", z.shape(), z_global.shape());
    }
    let [h, w, c] = z.shape() else {
        return shape_err("fuse_global", z.shape(), &[0, 0, 0]);
    };
    if (*h, *w) != (grid.h, grid.w) || s.len() != grid.num_windows() {
        return shape_err("fuse_global", z.shape(), &[grid.h, grid.w, s.len()]);
    }
    let tape = Tape::inference();
    let zv = tape.leaf(z.reshape(&[h * w, *c])?);
    let gv = tape.leaf(z_global.reshape(&[h * w, *c])?);
    let sv = tape.leaf(Tensor::new(vec![1, s.len()], s.0.clone())?);
    let y = fuse_global_var(zv, gv, sv, grid, training)?;
    y.value().reshape(z.shape())
}

/// Row picks for `Ẑ = Aᵀ·Ẑ_s + (1 - Aᵀ)·Z` with `rows` rows per window.
pub fn fuse_local_picks(sel: &SparseSelection, rows: usize) -> Vec<RowPick> {
    (0..sel.total)
        .flat_map(|w| {
            let pos = sel.position(w);
            (0..rows).map(move |r| match pos {
                Some(p) => RowPick::Second(p * rows + r),
                None => RowPick::First(w * rows + r),
            })
        })
        .collect()
}

/// Kept windows take the rows of `updated`, the rest keep `windows` exactly.
/// `windows` is `[N·R, C]`, `updated` is `[K·R, C]`.
pub fn fuse_local_var<'t>(windows: Var<'t>, updated: Var<'t>, sel: &SparseSelection) -> Result<Var<'t>> {
    let (n_rows, _) = windows.value().as_rows();
    if sel.total == 0 || n_rows % sel.total != 0 {
        return shape_err("fuse_local", &[n_rows], &[sel.total]);
    }
    let rows = n_rows / sel.total;
    let (k_rows, _) = updated.value().as_rows();
    if k_rows != sel.kept_count() * rows {
        return shape_err("fuse_local", &[k_rows], &[sel.kept_count() * rows]);
    }
    Var::pick_rows(windows, updated, fuse_local_picks(sel, rows).into())
}

/// Window tensors with the window index on the leading axis.
pub fn fuse_local(windows: &Tensor, updated: &Tensor, sel: &SparseSelection) -> Result<Tensor> {
    sel.validate()?;
    if windows.shape()[0] != sel.total || updated.shape()[0] != sel.kept_count() || windows.shape()[1..] != updated.shape()[1..] {
        return shape_err("fuse_local", windows.shape(), updated.shape());
    }
    let per = windows.numel() / sel.total;
    let tape = Tape::inference();
    let z = tape.leaf(windows.reshape(&[sel.total, per])?);
    let u = tape.leaf(updated.reshape(&[sel.kept_count(), per])?);
    fuse_local_var(z, u, sel)?.value().reshape(windows.shape())
}

/// Binary PGM (P5) of one stage's window scores, brightest = highest.
pub fn score_map_pgm(s: &ScoreVector, grid: &WindowGrid) -> Result<Vec<u8>> {
    if s.len() != grid.num_windows() {
        return shape_err("score_map_pgm", &[s.len()], &[grid.num_windows()]);
    }
    let max = s.0.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    out.extend(s.0.iter().map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 }));
    Ok(out)
}

/// Softmax over plain logits, as a score vector.
pub fn scores_from_logits(logits: &Tensor) -> Result<ScoreVector> {
    Ok(ScoreVector(ops::softmax(logits, logits.rank() - 1)?.into_data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::pad_to_windows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector(v.to_vec())
    }

    #[test]
    fn topk_examples() {
        let s = sv(&[0.1, 0.2, 0.3, 0.4]);
        let all = select_topk(&s, 1.0).unwrap();
        assert!(all.mask.iter().all(|m| *m));
        assert_eq!(all, SparseSelection::full(4));
        assert_eq!(select_topk(&sv(&[0.4, 0.3, 0.2, 0.1]), 0.5).unwrap().kept, vec![0, 1]);
        assert_eq!(select_topk(&sv(&[0.3, 0.3, 0.3, 0.1]), 0.5).unwrap().kept, vec![0, 1]);
        assert_eq!(
            select_topk_with(&sv(&[0.3, 0.3, 0.3, 0.1]), 0.5, TieBreak::HigherIndex).unwrap().kept,
            vec![1, 2]
        );
        assert_eq!(select_topk(&sv(&[0.5, 0.5]), 0.01).unwrap().kept_count(), 1);
        assert!(select_topk(&s, 0.0).is_err());
        assert!(select_topk(&s, 1.5).is_err());
    }

    #[test]
    fn one_hot_is_orthonormal() {
        let sel = SparseSelection::from_kept(6, vec![4, 1, 2], 0.5).unwrap();
        sel.validate().unwrap();
        let s = sel.one_hot();
        let sst = ops::matmul(&s, &ops::transpose(&s).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(sst.get(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(SparseSelection::from_kept(3, vec![0, 0], 1.0).is_err());
        assert!(SparseSelection::from_kept(3, vec![3], 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_ratios(1.0).unwrap().0, vec![1.0; 4]);
        let s = schedule_ratios(0.7).unwrap().0;
        for (a, b) in s.iter().zip([0.7, 0.49, 0.343, 0.2401]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(schedule_ratios(0.5).unwrap().0, vec![0.5, 0.25, 0.125, 0.0625]);
        assert!(schedule_ratios(0.0).is_err());
    }

    #[test]
    fn gumbel_examples() {
        let logits = Tensor::new(vec![4], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let noise = [0.3, 0.6, 0.9, 0.1];
        let hot = gumbel_relax(&logits, 1e6, &noise).unwrap();
        assert!(hot.0.iter().all(|v| (v - 0.25).abs() < 1e-5));

        let half = [0.5; 4];
        let t = 2.0;
        let relaxed = gumbel_relax(&logits, t, &half).unwrap();
        let plain = scores_from_logits(&ops::scale(&logits, 1.0 / t)).unwrap();
        for (a, b) in relaxed.0.iter().zip(&plain.0) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gumbel_relax(&logits, 0.0, &noise).is_err());
        assert!(gumbel_relax(&logits, 1.0, &[0.0, 0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn transform_names_parse() {
        assert_eq!("abs".parse::<ResidualTransform>().unwrap(), ResidualTransform::Absolute);
        assert!("cube".parse::<ResidualTransform>().is_err());
    }

    fn scorenet(m: usize, c: usize, t: ResidualTransform, seed: u64) -> ScoreNetParams {
        let w = Tensor::uniform(&[m * m * c, 1], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        ScoreNetParams::new(w, t).unwrap()
    }

    #[test]
    fn constant_map_scores_uniformly() {
        let cfg = WindowConfig::new(2).unwrap();
        let (z, g) = pad_to_windows(&Tensor::full(&[4, 6, 3], 1.7), &cfg).unwrap();
        for t in [ResidualTransform::Identity, ResidualTransform::Absolute, ResidualTransform::Squared] {
            let s = score_windows(&z, &cfg, &g, &scorenet(2, 3, t, 1)).unwrap();
            assert!(s.0.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        }
    }

    #[test]
    fn noisy_window_scores_highest() {
        let cfg = WindowConfig::new(2).unwrap();
        let mut data = vec![0.5; 4 * 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            data[y * 4 + x] = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let (z, g) = pad_to_windows(&Tensor::new(vec![4, 4, 1], data).unwrap(), &cfg).unwrap();
        let ones = ScoreNetParams::new(Tensor::full(&[4, 1], 1.0), ResidualTransform::Absolute).unwrap();
        let s = score_windows(&z, &cfg, &g, &ones).unwrap();
        let best = (0..4).max_by(|&a, &b| s.0[a].total_cmp(&s.0[b])).unwrap();
        assert_eq!(best, 3);
    }

    #[test]
    fn variants_normalize() {
        let cfg = WindowConfig::new(2).unwrap();
        let z = Tensor::uniform(&[4, 4, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let (z, g) = pad_to_windows(&z, &cfg).unwrap();
        let a = score_windows(&z, &cfg, &g, &scorenet(2, 2, ResidualTransform::Absolute, 2)).unwrap();
        let b = score_windows(&z, &cfg, &g, &scorenet(2, 2, ResidualTransform::Squared, 2)).unwrap();
        assert_ne!(a, b);
        assert!((a.sum() - 1.0).abs() < 1e-12 && (b.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_global_examples() {
        let g = WindowGrid::new(2, 4, 2).unwrap();
        let z = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let zero = Tensor::zeros(&[2, 4, 3]);
        let s = sv(&[0.5, 0.5]);
        for training in [false, true] {
            assert!(fuse_global(&z, &zero, &s, &g, training).unwrap().bitwise_eq(&z));
        }
        let zg = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let out = fuse_global(&z, &zg, &s, &g, true).unwrap();
        let expect = ops::add(&z, &ops::scale(&zg, 0.5)).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
        assert!(fuse_global(&z, &zg, &s, &g, false).unwrap().max_abs_diff(&ops::add(&z, &zg).unwrap()) < 1e-15);
    }

    #[test]
    fn fuse_local_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
        let upd = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
        assert!(fuse_local(&z, &upd, &SparseSelection::full(4)).unwrap().bitwise_eq(&upd));

        let sel = SparseSelection::from_kept(4, vec![1, 3], 0.5).unwrap();
        let upd2 = Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let out = fuse_local(&z, &upd2, &sel).unwrap();
        for w in 0..4 {
            let got = &out.data()[w * 6..(w + 1) * 6];
            match sel.position(w) {
                Some(p) => assert_eq!(got, &upd2.data()[p * 6..(p + 1) * 6]),
                None => assert_eq!(got, &z.data()[w * 6..(w + 1) * 6]),
            }
        }
        assert!(fuse_local(&z, &upd, &sel).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let g = WindowGrid::new(4, 6, 2).unwrap();
        let pgm = score_map_pgm(&sv(&[0.1, 0.2, 0.4, 0.1, 0.1, 0.1]), &g).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[64, 128, 255, 64, 64, 64]);
    }
}
