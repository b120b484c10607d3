//! Closed-form operation counts of the backbone with a foreground and
//! background split. Counting follows the instrumented kernels exactly:
//! a multiply-accumulate is 2 FLOPs, softmax 5 and layernorm 7 per element,
//! a 3×3 depthwise convolution 2·9 per output element; element-wise adds,
//! activations, masks and gathers are free.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::BlockKind;
use crate::backbone::{BackboneConfig, StageConfig};
use crate::cnms::DetBox;
use crate::error::{Error, Result};
use crate::sparsify::{kept_count, schedule_ratios, RatioSchedule, SparseSelection};
use crate::tensor::ops::{LAYERNORM_FLOPS_PER_ELEMENT as LN, SOFTMAX_FLOPS_PER_ELEMENT as SM};
use crate::windowing::WindowGrid;

const DW: u64 = 2 * 9;

fn u(v: usize) -> u64 {
    v as u64
}

/// Token mixer plus MLP of one window (`T = M²` slots) in a local block.
pub fn local_block_per_window(stage: &StageConfig, mlp_ratio: usize) -> u64 {
    let (t, c) = (u(stage.window * stage.window), u(stage.dim));
    let hidden = c * u(mlp_ratio);
    let mixer = match stage.kind {
        BlockKind::Attention => 2 * (4 * t * c * c + 2 * t * t * c) + SM * u(stage.heads) * t * t,
        BlockKind::Convolution => DW * t * c + 2 * t * c * c,
    };
    2 * LN * t * c + mixer + 2 * 2 * t * c * hidden
}

/// One global block over `n` aggregated tokens laid out `rows × cols`.
pub fn global_block_flops(stage: &StageConfig, mlp_ratio: usize, n: usize) -> u64 {
    let (n, c) = (u(n), u(stage.dim));
    let hidden = c * u(mlp_ratio);
    let mixer = match stage.kind {
        BlockKind::Attention => 2 * 4 * n * c * c + 2 * 2 * n * n * c + SM * u(stage.heads) * n * n,
        BlockKind::Convolution => DW * n * c + 2 * n * c * c,
    };
    2 * LN * n * c + mixer + 2 * 2 * n * c * hidden
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    Global,
    Local,
}

/// One block of a stage: local blocks scale with the kept windows of `sel`,
/// global blocks with the window count of `grid`.
pub fn count_block(stage: &StageConfig, mlp_ratio: usize, sel: &SparseSelection, grid: &WindowGrid, role: BlockRole) -> u64 {
    match role {
        BlockRole::Local => u(sel.kept_count()) * local_block_per_window(stage, mlp_ratio),
        BlockRole::Global => global_block_flops(stage, mlp_ratio, grid.num_windows()),
    }
}

/// Counts of one stage. `entry` is the patch embedding (stage 0) or the
/// patch merge preceding the stage; `shared` holds every cost that is not
/// tied to one window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub entry: u64,
    pub score: u64,
    pub global: u64,
    pub local: u64,
    pub windows: usize,
    pub kept: usize,
    /// Per-window part of `score + local`, indexed by window.
    pub per_window: Vec<u64>,
}

impl StageCounts {
    pub fn total(&self) -> u64 {
        self.entry + self.score + self.global + self.local
    }

    pub fn shared(&self) -> u64 {
        self.total() - self.per_window.iter().sum::<u64>()
    }
}

/// Analytic counts of the whole backbone for an `h × w` image; one
/// selection per stage.
pub fn count_backbone(cfg: &BackboneConfig, h: usize, w: usize, selections: &[SparseSelection]) -> Result<Vec<StageCounts>> {
    cfg.validate()?;
    if selections.len() != cfg.stages.len() {
        return Err(Error::Config(format!("{} selections for {} stages", selections.len(), cfg.stages.len())));
    }
    let grids = cfg.stage_grids(h, w);
    let mut out = Vec::with_capacity(cfg.stages.len());
    for (i, (s, sel)) in cfg.stages.iter().zip(selections).enumerate() {
        let grid = WindowGrid::new(grids[i].0, grids[i].1, s.window)?;
        let n = grid.num_windows();
        if sel.total != n {
            return Err(Error::Config(format!("stage {i}: selection over {} windows, grid has {n}", sel.total)));
        }
        let c = u(s.dim);
        let entry = if i == 0 {
            let p = u(cfg.patch_size);
            2 * u(grids[0].0 * grids[0].1) * p * p * u(cfg.in_channels) * c
        } else {
            let (ph, pw) = grids[i - 1];
            let prev = u(cfg.stages[i - 1].dim);
            2 * u(ph.div_ceil(2) * pw.div_ceil(2)) * 4 * prev * c
        };
        let t = u(s.window * s.window);
        let score_window = 2 * t * c;
        let score = u(n) * score_window + SM * u(n);
        let global = u(s.global_blocks()) * global_block_flops(s, cfg.mlp_ratio, n);
        let per_local = u(s.local_blocks()) * local_block_per_window(s, cfg.mlp_ratio);
        let local = u(sel.kept_count()) * per_local;
        let per_window = (0..n)
            .map(|wi| score_window + if sel.is_kept(wi) { per_local } else { 0 })
            .collect();
        out.push(StageCounts {
            entry,
            score,
            global,
            local,
            windows: n,
            kept: sel.kept_count(),
            per_window,
        });
    }
    Ok(out)
}

/// Per-stage window foreground flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForegroundMask {
    pub stages: Vec<Vec<bool>>,
}

impl ForegroundMask {
    /// A window is foreground when its pixel footprint overlaps any box.
    pub fn from_boxes(cfg: &BackboneConfig, h: usize, w: usize, boxes: &[DetBox]) -> Result<Self> {
        let grids = cfg.stage_grids(h, w);
        let mut stages = Vec::with_capacity(grids.len());
        for (i, (s, &(gh, gw))) in cfg.stages.iter().zip(&grids).enumerate() {
            let grid = WindowGrid::new(gh, gw, s.window)?;
            let side = (cfg.patch_size << i) * s.window;
            let mut flags = Vec::with_capacity(grid.num_windows());
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let (x0, y0) = ((c * side) as f64, (r * side) as f64);
                    let (x1, y1) = (x0 + side as f64, y0 + side as f64);
                    flags.push(boxes.iter().any(|b| b.x1 < x1 && b.x2 > x0 && b.y1 < y1 && b.y2 > y0));
                }
            }
            stages.push(flags);
        }
        Ok(Self { stages })
    }

    pub fn uniform(counts: &[StageCounts], value: bool) -> Self {
        Self { stages: counts.iter().map(|c| vec![value; c.windows]).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplit {
    pub counts: StageCounts,
    pub foreground_windows: usize,
    pub foreground: u64,
    pub background: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schedule: Vec<f64>,
    pub stages: Vec<StageSplit>,
    pub foreground: u64,
    pub background: u64,
    pub all: u64,
}

/// Rounds to 4 significant digits, in units of 10⁹.
pub fn gflops(n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    format!("{:.3e}", n as f64 / 1e9).parse().expect("formatted float")
}

impl FlopsReport {
    pub fn gflops_fore(&self) -> f64 {
        gflops(self.foreground)
    }

    pub fn gflops_back(&self) -> f64 {
        gflops(self.background)
    }

    pub fn gflops_all(&self) -> f64 {
        gflops(self.all)
    }
}

/// Per-window costs go to the window's bucket; shared costs are split by
/// the stage's foreground window fraction, rounding toward background.
pub fn attribute_fg_bg(counts: &[StageCounts], mask: &ForegroundMask, schedule: &[f64]) -> Result<FlopsReport> {
    if mask.stages.len() != counts.len() {
        return Err(Error::Config(format!("mask has {} stages, counts {}", mask.stages.len(), counts.len())));
    }
    let mut stages = Vec::with_capacity(counts.len());
    for (i, (c, m)) in counts.iter().zip(&mask.stages).enumerate() {
        if m.len() != c.windows {
            return Err(Error::Config(format!("stage {i}: mask over {} windows, grid has {}", m.len(), c.windows)));
        }
        let nfg = m.iter().filter(|&&f| f).count();
        let shared = c.shared();
        let shared_fg = (shared as u128 * nfg as u128 / c.windows as u128) as u64;
        let own_fg: u64 = c.per_window.iter().zip(m).filter(|(_, &f)| f).map(|(v, _)| v).sum();
        let foreground = shared_fg + own_fg;
        stages.push(StageSplit {
            counts: c.clone(),
            foreground_windows: nfg,
            foreground,
            background: c.total() - foreground,
        });
    }
    let foreground = stages.iter().map(|s| s.foreground).sum();
    let background = stages.iter().map(|s| s.background).sum();
    Ok(FlopsReport {
        schedule: schedule.to_vec(),
        stages,
        foreground,
        background,
        all: foreground + background,
    })
}

/// Keeps foreground windows first (lower index among equals), the
/// selection a ScoreNet ranking objects highest would make.
pub fn foreground_first(flags: &[bool], ratio: f64) -> Result<SparseSelection> {
    let k = kept_count(ratio, flags.len());
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by_key(|&i| (!flags[i], i));
    order.truncate(k);
    SparseSelection::from_kept(flags.len(), order, ratio)
}

/// Analytic report for an `h × w` image with foreground-first selections.
pub fn report(cfg: &BackboneConfig, h: usize, w: usize, mask: &ForegroundMask) -> Result<FlopsReport> {
    let sels = mask
        .stages
        .iter()
        .zip(&cfg.stages)
        .map(|(m, s)| foreground_first(m, s.ratio))
        .collect::<Result<Vec<_>>>()?;
    let counts = count_backbone(cfg, h, w, &sels)?;
    attribute_fg_bg(&counts, mask, &cfg.schedule().0)
}

/// Which schedules a sweep produces for each ratio `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SweepVariants {
    /// `[k, k², k³, k⁴]`.
    pub geometric: bool,
    /// `[k, 1, 1, 1]` and `[1, 1, 1, k]`.
    pub stagewise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub variant: String,
    pub report: FlopsReport,
}

pub fn sweep_ratios(
    cfg: &BackboneConfig,
    h: usize,
    w: usize,
    boxes: &[DetBox],
    ratios: &[f64],
    variants: SweepVariants,
) -> Result<Vec<SweepRow>> {
    let mask = ForegroundMask::from_boxes(cfg, h, w, boxes)?;
    let mut rows = Vec::new();
    for &k in ratios {
        let mut schedules: Vec<(&str, RatioSchedule)> = Vec::new();
        if variants.geometric {
            schedules.push(("geometric", schedule_ratios(k)?));
        }
        if variants.stagewise {
            schedules.push(("stage1", RatioSchedule::new(vec![k, 1.0, 1.0, 1.0])?));
            schedules.push(("stage4", RatioSchedule::new(vec![1.0, 1.0, 1.0, k])?));
        }
        for (name, sched) in schedules {
            let c = cfg.clone().with_schedule(&sched)?;
            rows.push(SweepRow { ratio: k, variant: name.into(), report: report(&c, h, w, &mask)? });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["Ratio", "Variant", "Schedule", "GFLOPs-Fore", "GFLOPs-Back", "GFLOPs-All", "FLOPs-All"])?;
    for r in rows {
        let sched = r.report.schedule.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
        wr.write_record([
            format!("{}", r.ratio),
            r.variant.clone(),
            sched,
            format!("{}", r.report.gflops_fore()),
            format!("{}", r.report.gflops_back()),
            format!("{}", r.report.gflops_all()),
            format!("{}", r.report.all),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sweep_json<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    serde_json::to_writer_pretty(w, rows)?;
    Ok(())
}
