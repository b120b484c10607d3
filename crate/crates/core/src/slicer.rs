//! Slicing of large images: equal training grids, overlapped inference
//! slices at two scales, slice/global coordinate maps, the area filter that
//! assigns boxes to a scale, synthetic scenes, and the end-to-end merge.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{run_backbone, BackboneConfig};
use crate::cnms::{cnms_multi_with, iou, nms_multi, BoxSet, CnmsConfig, DetBox, TieBreak};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Upper bound of the medium size bin, `288²` pixels.
pub const DEFAULT_AREA_THRESHOLD: f64 = 288.0 * 288.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub width: u32,
    pub height: u32,
}

impl Extent {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// A rectangle of the image in global pixels; `scale` resizes it before the
/// detector sees it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub id: u32,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub scale: f64,
}

impl SliceSpec {
    pub fn x2(&self) -> u32 {
        self.x + self.width
    }

    pub fn y2(&self) -> u32 {
        self.y + self.height
    }

    pub fn intersects(&self, b: &DetBox) -> bool {
        b.x1 < self.x2() as f64 && b.x2 > self.x as f64 && b.y1 < self.y2() as f64 && b.y2 > self.y as f64
    }

    pub fn contains(&self, b: &DetBox) -> bool {
        b.x1 >= self.x as f64 && b.y1 >= self.y as f64 && b.x2 <= self.x2() as f64 && b.y2 <= self.y2() as f64
    }

    /// Detector input size in pixels.
    pub fn input_size(&self) -> (usize, usize) {
        let s = |v: u32| ((v as f64 * self.scale).round() as usize).max(1);
        (s(self.width), s(self.height))
    }

    pub fn to_local(&self, b: &DetBox) -> DetBox {
        let (ox, oy, s) = (self.x as f64, self.y as f64, self.scale);
        DetBox {
            x1: (b.x1 - ox) * s,
            y1: (b.y1 - oy) * s,
            x2: (b.x2 - ox) * s,
            y2: (b.y2 - oy) * s,
            slice: self.id,
            ..*b
        }
    }

    pub fn to_global(&self, b: &DetBox) -> DetBox {
        let (ox, oy, s) = (self.x as f64, self.y as f64, self.scale);
        DetBox {
            x1: b.x1 / s + ox,
            y1: b.y1 / s + oy,
            x2: b.x2 / s + ox,
            y2: b.y2 / s + oy,
            slice: self.id,
            ..*b
        }
    }

    /// Clips a slice-local box to the slice; `None` if nothing remains.
    pub fn clip_local(&self, b: &DetBox) -> Option<DetBox> {
        let (w, h) = (self.width as f64 * self.scale, self.height as f64 * self.scale);
        let c = DetBox {
            x1: b.x1.clamp(0.0, w),
            y1: b.y1.clamp(0.0, h),
            x2: b.x2.clamp(0.0, w),
            y2: b.y2.clamp(0.0, h),
            ..*b
        };
        (c.x1 < c.x2 && c.y1 < c.y2).then_some(c)
    }
}

/// `n × n` tiles covering the extent exactly, row-major.
pub fn grid_slices(extent: Extent, n: u32) -> Result<Vec<SliceSpec>> {
    if n == 0 || extent.width < n || extent.height < n {
        return Err(Error::Config(format!(
            "cannot split {}x{} into a {n}x{n} grid",
            extent.width, extent.height
        )));
    }
    let edge = |len: u32, i: u32| (len as u64 * i as u64 / n as u64) as u32;
    let mut out = Vec::with_capacity((n * n) as usize);
    for gy in 0..n {
        for gx in 0..n {
            let (x, y) = (edge(extent.width, gx), edge(extent.height, gy));
            out.push(SliceSpec {
                id: gy * n + gx,
                x,
                y,
                width: edge(extent.width, gx + 1) - x,
                height: edge(extent.height, gy + 1) - y,
                scale: 1.0,
            });
        }
    }
    Ok(out)
}

/// Drops slices that meet no ground-truth box.
pub fn filter_empty(slices: &[SliceSpec], scene: &SceneSpec) -> Vec<SliceSpec> {
    slices
        .iter()
        .filter(|s| scene.boxes.iter().any(|b| s.intersects(b)))
        .copied()
        .collect()
}

/// Origins `0, stride, 2·stride, …` with the last one clamped to the edge.
pub fn axis_origins(len: u32, size: u32, overlap: u32) -> Vec<u32> {
    if size >= len {
        return vec![0];
    }
    let stride = size - overlap;
    let last = len - size;
    let mut out: Vec<u32> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out.dedup();
    out
}

/// Square `size` slices with `overlap` pixels shared between neighbours.
pub fn overlap_slices(extent: Extent, size: u32, overlap: u32) -> Result<Vec<SliceSpec>> {
    if size == 0 || overlap >= size {
        return Err(Error::Config(format!("overlap {overlap} must be below slice size {size}")));
    }
    let xs = axis_origins(extent.width, size, overlap);
    let ys = axis_origins(extent.height, size, overlap);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(SliceSpec {
                id: out.len() as u32,
                x,
                y,
                width: size.min(extent.width),
                height: size.min(extent.height),
                scale: 1.0,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRole {
    /// Keep boxes with area ≤ threshold.
    Fine,
    /// Keep boxes with area > threshold.
    Coarse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFilter {
    pub threshold: f64,
    pub role: FilterRole,
}

impl ScaleFilter {
    pub fn new(threshold: f64, role: FilterRole) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Config(format!("area threshold {threshold} must be positive")));
        }
        Ok(Self { threshold, role })
    }

    pub fn keeps(&self, b: &DetBox) -> bool {
        match self.role {
            FilterRole::Fine => b.area() <= self.threshold,
            FilterRole::Coarse => b.area() > self.threshold,
        }
    }
}

pub fn scale_filter(boxes: &[DetBox], f: &ScaleFilter) -> BoxSet {
    boxes.iter().filter(|b| f.keeps(b)).copied().collect()
}

/// Inference slicing at two scales: fine slices at full resolution, and
/// coarse slices `coarse_factor` times larger seen at `1/coarse_factor` scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleConfig {
    pub fine_size: u32,
    pub overlap: u32,
    pub coarse_factor: u32,
    pub area_threshold: f64,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        Self {
            fine_size: 1024,
            overlap: 200,
            coarse_factor: 4,
            area_threshold: DEFAULT_AREA_THRESHOLD,
        }
    }
}

impl TwoScaleConfig {
    pub fn plan(&self, extent: Extent) -> Result<Vec<(SliceSpec, ScaleFilter)>> {
        if self.coarse_factor == 0 {
            return Err(Error::Config("coarse factor must be positive".into()));
        }
        let fine = ScaleFilter::new(self.area_threshold, FilterRole::Fine)?;
        let coarse = ScaleFilter::new(self.area_threshold, FilterRole::Coarse)?;
        let f = self.coarse_factor;
        let mut out: Vec<(SliceSpec, ScaleFilter)> = overlap_slices(extent, self.fine_size, self.overlap)?
            .into_iter()
            .map(|s| (s, fine))
            .collect();
        for s in overlap_slices(extent, self.fine_size * f, self.overlap * f)? {
            out.push((SliceSpec { scale: 1.0 / f as f64, ..s }, coarse));
        }
        for (i, (s, _)) in out.iter_mut().enumerate() {
            s.id = i as u32;
        }
        Ok(out)
    }
}

/// Synthetic ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub extent: Extent,
    pub boxes: Vec<DetBox>,
}

/// Side lengths of the three size bins: below 96, 96 to 288, above 288.
pub const SIZE_BINS: [(u32, u32); 3] = [(8, 95), (96, 288), (289, 800)];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            b.validate()?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.extent.width as f64 || b.y2 > self.extent.height as f64 {
                return Err(Error::Validation(format!("box {b:?} outside the scene")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Up to `count` integer-coordinate boxes, size bin drawn uniformly and
    /// side lengths capped at `max_side`. With `disjoint`, boxes that would
    /// overlap an earlier one are skipped.
    pub fn random(seed: u64, extent: Extent, count: usize, max_side: u32, disjoint: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes: Vec<DetBox> = Vec::new();
        let cap = max_side.min(extent.width).min(extent.height).max(2);
        let mut attempts = 0;
        while boxes.len() < count && attempts < 50 * count.max(1) {
            attempts += 1;
            let (lo, hi) = SIZE_BINS[rng.gen_range(0..SIZE_BINS.len())];
            let (lo, hi) = (lo.min(cap - 1), hi.min(cap));
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let x = rng.gen_range(0..=extent.width - w);
            let y = rng.gen_range(0..=extent.height - h);
            let b = DetBox {
                x1: x as f64,
                y1: y as f64,
                x2: (x + w) as f64,
                y2: (y + h) as f64,
                score: 1.0,
                class: 0,
                slice: 0,
            };
            if disjoint && boxes.iter().any(|o| o.intersection(&b) > 0.0) {
                continue;
            }
            boxes.push(b);
        }
        Self { extent, boxes }
    }

    pub fn max_object_side(&self) -> f64 {
        self.boxes.iter().map(|b| b.width().max(b.height())).fold(0.0, f64::max)
    }
}

/// Produces slice-local boxes for one slice.
pub trait Detector: Sync {
    fn detect(&self, slice: &SliceSpec) -> Result<BoxSet>;
}

/// Confidence of the oracle detector for a whole object.
pub const ORACLE_COMPLETE_SCORE: f64 = 0.6;
/// Confidence of the oracle detector for an object cut by the slice border.
pub const ORACLE_TRUNCATED_SCORE: f64 = 0.9;

/// Reports every ground-truth box visible in the slice, cut to the slice.
/// Cut boxes get the higher confidence, which is the case where score-only
/// merging keeps fragments.
pub struct OracleDetector<'a> {
    pub scene: &'a SceneSpec,
}

impl Detector for OracleDetector<'_> {
    fn detect(&self, slice: &SliceSpec) -> Result<BoxSet> {
        let mut out = Vec::new();
        for gt in self.scene.boxes.iter().filter(|b| slice.intersects(b)) {
            let score = if slice.contains(gt) { ORACLE_COMPLETE_SCORE } else { ORACLE_TRUNCATED_SCORE };
            let local = slice.to_local(&DetBox { score, ..*gt });
            if let Some(b) = slice.clip_local(&local) {
                out.push(b);
            }
        }
        Ok(out)
    }
}

/// Renders the slice at its input resolution: objects bright, background
/// dim with a fixed texture.
pub fn render_slice(scene: &SceneSpec, slice: &SliceSpec) -> Tensor {
    let (w, h) = slice.input_size();
    let mut data = vec![0.0; w * h * 3];
    for py in 0..h {
        for px in 0..w {
            let gx = slice.x as f64 + (px as f64 + 0.5) / slice.scale;
            let gy = slice.y as f64 + (py as f64 + 0.5) / slice.scale;
            let inside = scene.boxes.iter().any(|b| gx >= b.x1 && gx < b.x2 && gy >= b.y1 && gy < b.y2);
            let texture = (((gx as u64).wrapping_mul(73_856_093) ^ (gy as u64).wrapping_mul(19_349_663)) % 17) as f64 / 170.0;
            let v = if inside { 0.9 } else { 0.1 + texture };
            let o = (py * w + px) * 3;
            data[o..o + 3].copy_from_slice(&[v, v * 0.8, v * 0.6]);
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("positive dims")
}

/// Backbone plus a toy head: stage-1 tokens whose feature deviates from the
/// slice mean by more than one standard deviation are grouped into
/// 4-connected components, one box each.
pub struct BackboneDetector<'a> {
    pub scene: &'a SceneSpec,
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl Detector for BackboneDetector<'_> {
    fn detect(&self, slice: &SliceSpec) -> Result<BoxSet> {
        let image = render_slice(self.scene, slice);
        let stages = run_backbone(&image, &self.config, &self.params, None)?;
        let map = &stages[0].map;
        let [h, w, c] = *map.shape() else { unreachable!("stage maps are rank 3") };
        let mut energy = vec![0.0; h * w];
        let mean: Vec<f64> = (0..c).map(|ch| (0..h * w).map(|t| map.data()[t * c + ch]).sum::<f64>() / (h * w) as f64).collect();
        for (t, e) in energy.iter_mut().enumerate() {
            *e = (0..c).map(|ch| (map.data()[t * c + ch] - mean[ch]).powi(2)).sum::<f64>().sqrt();
        }
        let mu = energy.iter().sum::<f64>() / energy.len() as f64;
        let sd = (energy.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / energy.len() as f64).sqrt();
        let on: Vec<bool> = energy.iter().map(|&e| sd > 0.0 && e > mu + sd).collect();
        let cell = self.config.patch_size as f64;
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        for start in 0..h * w {
            if !on[start] || seen[start] {
                continue;
            }
            let (mut y1, mut x1, mut y2, mut x2, mut sum, mut n) = (h, w, 0, 0, 0.0, 0usize);
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(t) = stack.pop() {
                let (y, x) = (t / w, t % w);
                (y1, x1, y2, x2) = (y1.min(y), x1.min(x), y2.max(y), x2.max(x));
                sum += energy[t];
                n += 1;
                let mut visit = |nt: usize| {
                    if on[nt] && !seen[nt] {
                        seen[nt] = true;
                        stack.push(nt);
                    }
                };
                if y > 0 {
                    visit(t - w);
                }
                if y + 1 < h {
                    visit(t + w);
                }
                if x > 0 {
                    visit(t - 1);
                }
                if x + 1 < w {
                    visit(t + 1);
                }
            }
            let score = (sum / n as f64 / (mu + 2.0 * sd)).clamp(0.0, 1.0);
            let b = DetBox {
                x1: x1 as f64 * cell,
                y1: y1 as f64 * cell,
                x2: (x2 + 1) as f64 * cell,
                y2: (y2 + 1) as f64 * cell,
                score,
                class: 0,
                slice: slice.id,
            };
            out.extend(slice.clip_local(&b));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Nms,
    #[default]
    Cnms,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub slicing: TwoScaleConfig,
    pub cnms: CnmsConfig,
    pub merge: MergeKind,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            slicing: TwoScaleConfig::default(),
            cnms: CnmsConfig::default(),
            merge: MergeKind::Cnms,
        }
    }
}

/// Slice, detect each slice in parallel, clip and map to global
/// coordinates, apply the scale filter of the slice's role, then merge.
pub fn run_pipeline(scene: &SceneSpec, detector: &dyn Detector, cfg: &PipelineConfig) -> Result<BoxSet> {
    run_pipeline_with(scene, detector, cfg, TieBreak::Standard)
}

pub fn run_pipeline_with(scene: &SceneSpec, detector: &dyn Detector, cfg: &PipelineConfig, tie: TieBreak) -> Result<BoxSet> {
    scene.validate()?;
    cfg.cnms.validate()?;
    let plan = cfg.slicing.plan(scene.extent)?;
    let sets = plan
        .par_iter()
        .map(|(slice, filter)| {
            let local = detector.detect(slice)?;
            let global: BoxSet = local
                .iter()
                .filter_map(|b| slice.clip_local(b))
                .map(|b| slice.to_global(&b))
                .collect();
            Ok(scale_filter(&global, filter))
        })
        .collect::<Result<Vec<BoxSet>>>()?;
    Ok(match cfg.merge {
        MergeKind::Cnms => cnms_multi_with(&sets, &cfg.cnms, tie),
        MergeKind::Nms => nms_multi(&sets, &cfg.cnms),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Greedy one-to-one matching by descending score at IoU ≥ `threshold`,
/// same class only.
pub fn evaluate(pred: &[DetBox], gt: &[DetBox], threshold: f64) -> Metrics {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].score.total_cmp(&pred[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for i in order {
        let best = (0..gt.len())
            .filter(|&g| !used[g] && gt[g].class == pred[i].class)
            .map(|g| (g, iou(&pred[i], &gt[g])))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    Metrics {
        true_positives: tp,
        false_positives: pred.len() - tp,
        false_negatives: gt.len() - tp,
        recall: ratio(tp, gt.len()),
        precision: ratio(tp, pred.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> DetBox {
        DetBox::new(x1, y1, x2, y2, 1.0, 0, 0).unwrap()
    }

    #[test]
    fn grid_examples() {
        let s = grid_slices(Extent::new(100, 100), 2).unwrap();
        let o: Vec<(u32, u32)> = s.iter().map(|s| (s.x, s.y)).collect();
        assert_eq!(o, vec![(0, 0), (50, 0), (0, 50), (50, 50)]);
        assert!(s.iter().all(|s| s.width == 50 && s.height == 50));
        let one = grid_slices(Extent::new(37, 21), 1).unwrap();
        assert_eq!((one[0].width, one[0].height), (37, 21));
        let s = grid_slices(Extent::new(1000, 600), 4).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|s| s.width == 250 && s.height == 150));
        assert!(grid_slices(Extent::new(3, 3), 4).is_err());
    }

    #[test]
    fn filter_empty_examples() {
        let tiles = grid_slices(Extent::new(100, 100), 2).unwrap();
        let empty = SceneSpec { extent: Extent::new(100, 100), boxes: vec![] };
        assert!(filter_empty(&tiles, &empty).is_empty());
        let one = SceneSpec { extent: Extent::new(100, 100), boxes: vec![gt(60.0, 10.0, 70.0, 20.0)] };
        assert_eq!(filter_empty(&tiles, &one).iter().map(|s| s.id).collect::<Vec<_>>(), vec![1]);
        let two = SceneSpec { extent: Extent::new(100, 100), boxes: vec![gt(40.0, 10.0, 60.0, 20.0)] };
        assert_eq!(filter_empty(&tiles, &two).iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn overlap_examples() {
        let xs: Vec<u32> = overlap_slices(Extent::new(2048, 1024), 1024, 200).unwrap().iter().map(|s| s.x).collect();
        assert_eq!(xs, vec![0, 824, 1024]);
        assert_eq!(axis_origins(3072, 1024, 0), vec![0, 1024, 2048]);
        assert_eq!(axis_origins(1024, 1024, 200), vec![0]);
        let s = overlap_slices(Extent::new(500, 300), 1024, 200).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].width, s[0].height), (500, 300));
        assert!(overlap_slices(Extent::new(500, 300), 100, 100).is_err());
    }

    #[test]
    fn coordinate_maps() {
        let b = DetBox::new(3.0, 4.0, 10.0, 12.0, 0.5, 2, 0).unwrap();
        let id = SliceSpec { id: 0, x: 0, y: 0, width: 100, height: 100, scale: 1.0 };
        assert_eq!(id.to_global(&b), b);
        let off = SliceSpec { id: 4, x: 50, y: 50, width: 100, height: 100, scale: 1.0 };
        let g = off.to_global(&b);
        assert_eq!((g.x1, g.y1, g.x2, g.y2, g.slice), (53.0, 54.0, 60.0, 62.0, 4));
        let scaled = SliceSpec { scale: 0.25, ..off };
        let back = scaled.to_global(&scaled.to_local(&b));
        for (a, e) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_filter_examples() {
        let f = ScaleFilter::new(100.0, FilterRole::Fine).unwrap();
        let c = ScaleFilter::new(100.0, FilterRole::Coarse).unwrap();
        let small = gt(0.0, 0.0, 5.0, 5.0);
        let big = gt(0.0, 0.0, 20.0, 20.0);
        assert!(f.keeps(&small) && !c.keeps(&small));
        assert!(!f.keeps(&big) && c.keeps(&big));
        let edge = gt(0.0, 0.0, 10.0, 10.0);
        assert!(f.keeps(&edge) && !c.keeps(&edge));
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            slicing: TwoScaleConfig { fine_size: 128, overlap: 40, coarse_factor: 4, area_threshold: 64.0 * 64.0 },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_examples() {
        let cfg = small_cfg();
        let empty = SceneSpec { extent: Extent::new(400, 300), boxes: vec![] };
        assert!(run_pipeline(&empty, &OracleDetector { scene: &empty }, &cfg).unwrap().is_empty());

        let scene = SceneSpec { extent: Extent::new(400, 300), boxes: vec![gt(100.0, 30.0, 120.0, 50.0)] };
        let out = run_pipeline(&scene, &OracleDetector { scene: &scene }, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x1, out[0].y1, out[0].x2, out[0].y2), (100.0, 30.0, 120.0, 50.0));
    }

    #[test]
    fn straddling_large_object_cnms_keeps_the_whole_box() {
        // Fine slices at x = 0 and 88; the object straddles both.
        let mut cfg = small_cfg();
        cfg.slicing.area_threshold = 1e9;
        cfg.slicing.coarse_factor = 8;
        let scene = SceneSpec { extent: Extent::new(216, 128), boxes: vec![gt(60.0, 20.0, 120.0, 100.0)] };
        let det = OracleDetector { scene: &scene };
        let c = run_pipeline(&scene, &det, &cfg).unwrap();
        assert_eq!(evaluate(&c, &scene.boxes, 0.99).recall, 1.0);
        cfg.merge = MergeKind::Nms;
        let n = run_pipeline(&scene, &det, &cfg).unwrap();
        assert_eq!(evaluate(&n, &scene.boxes, 0.99).recall, 0.0);
    }

    #[test]
    fn random_scenes_are_valid_and_deterministic() {
        let a = SceneSpec::random(5, Extent::new(1200, 900), 12, 400, true);
        a.validate().unwrap();
        assert_eq!(a, SceneSpec::random(5, Extent::new(1200, 900), 12, 400, true));
        for (i, x) in a.boxes.iter().enumerate() {
            for y in &a.boxes[i + 1..] {
                assert_eq!(x.intersection(y), 0.0);
            }
        }
        assert_eq!(SceneSpec::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn metrics_examples() {
        let g = vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)];
        let m = evaluate(&g[..1], &g, 0.5);
        assert_eq!((m.recall, m.precision), (0.5, 1.0));
        let m = evaluate(&[], &[], 0.5);
        assert_eq!((m.recall, m.precision), (1.0, 1.0));
    }

    #[test]
    fn backbone_detector_runs() {
        let scene = SceneSpec { extent: Extent::new(64, 64), boxes: vec![gt(8.0, 8.0, 40.0, 40.0)] };
        let mut config = BackboneConfig::toy();
        for (s, d) in config.stages.iter_mut().zip([8, 16, 32, 64]) {
            s.dim = d;
            s.window = 4;
        }
        let params = crate::backbone::init_params(&config, 1).unwrap();
        let det = BackboneDetector { scene: &scene, config, params };
        let slice = SliceSpec { id: 0, x: 0, y: 0, width: 64, height: 64, scale: 1.0 };
        let boxes = det.detect(&slice).unwrap();
        assert!(boxes.iter().all(|b| b.validate().is_ok() && b.x2 <= 64.0 && b.y2 <= 64.0));
        assert_eq!(render_slice(&scene, &slice).shape(), &[64, 64, 3]);
    }
}
