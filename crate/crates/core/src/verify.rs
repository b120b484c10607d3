//! Self-check suite: oracle equivalences, dense equivalence, gradients and
//! geometry, each reported per module. A [`Fault`] swaps in a deliberately
//! wrong tie-break so the suite can be seen to fail.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::BlockKind;
use crate::backbone::{init_params, patch_embed_var, run_backbone, run_stage, stage_var, BackboneConfig, GumbelNoise, Mode};
use crate::cnms::{cnms_multi_with, iou, nms_multi, BoxSet, CnmsConfig, DetBox, TieBreak};
use crate::error::{Error, Result};
use crate::flops::{count_backbone, sweep_ratios, StageCounts, SweepVariants};
use crate::reference::dense_backbone;
use crate::slicer::{evaluate, overlap_slices, run_pipeline, Extent, OracleDetector, PipelineConfig, SceneSpec, TwoScaleConfig};
use crate::sparsify::{kept_count, select_topk_with, ResidualTransform, ScoreVector, TieBreak as TopkTie};
use crate::tensor::{central_difference, max_relative_error, measure_flops, ParamSet, Tape, Tensor, Var};
use crate::windowing::{aggregate, inverse_aggregate, pad_to_windows, WindowConfig, WindowGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Area ties in the cross-slice sweep go to the later box.
    CnmsTiebreak,
    /// Score ties in top-K selection go to the higher window index.
    TopkTiebreak,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnms-tiebreak" => Ok(Self::CnmsTiebreak),
            "topk-tiebreak" => Ok(Self::TopkTiebreak),
            _ => Err(Error::Usage(format!("unknown fault {s:?}; expected cnms-tiebreak or topk-tiebreak"))),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CnmsTiebreak => "cnms-tiebreak",
            Self::TopkTiebreak => "topk-tiebreak",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}::{} {}", self.module, self.name, self.detail)
    }
}

type Outcome = Result<(bool, String)>;

pub fn run_suite(fault: Option<Fault>) -> Vec<Check> {
    let checks: Vec<(&'static str, &'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("tensor", "kernel_gradients", Box::new(kernel_gradients)),
        ("windowing", "aggregation_identities", Box::new(aggregation_identities)),
        ("sparsify", "topk_oracle", Box::new(move || topk_oracle(fault))),
        ("sparsify", "uniform_scores", Box::new(uniform_scores)),
        ("sparsify", "touch_set", Box::new(touch_set)),
        ("backbone", "dense_equivalence", Box::new(dense_equivalence)),
        ("backbone", "stage_gradients", Box::new(stage_gradients)),
        ("cnms", "oracle_equivalence", Box::new(move || cnms_oracle_check(fault))),
        ("cnms", "area_priority", Box::new(area_priority_scenario)),
        ("slicer", "overlap_origins", Box::new(overlap_origins)),
        ("slicer", "oracle_coverage", Box::new(oracle_coverage)),
        ("flops", "instrumented_counts", Box::new(instrumented_counts)),
        ("flops", "ratio_trend", Box::new(ratio_trend)),
    ];
    checks
        .into_iter()
        .map(|(module, name, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            Check { module, name, passed, detail }
        })
        .collect()
}

fn hr<F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>(f: F) -> F {
    f
}

fn kernel_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[1, 4], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[1, 4], -0.5, 0.5, &mut rng);
    let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let f = hr(|tape, v| {
        let h = v.matmul(tape.leaf(w.clone())).unwrap();
        let n = h.layernorm(tape.leaf(g.reshape(&[4]).unwrap()), tape.leaf(b.reshape(&[4]).unwrap()), 1e-5).unwrap();
        n.softmax().unwrap().dot_const(&probe).unwrap()
    });
    let err = crate::tensor::finite_diff_check(&f, &x, 1e-5)?;
    Ok((err < 1e-4, format!("max rel err {err:.2e}")))
}

fn aggregation_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.gen_range(1..=4);
        let (h, w, c) = (rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=3));
        let cfg = WindowConfig::new(m)?;
        let (p, grid) = pad_to_windows(&Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut rng), &cfg)?;
        let zbar = Tensor::uniform(&[grid.rows, grid.cols, c], -1.0, 1.0, &mut rng);
        worst = worst.max(aggregate(&inverse_aggregate(&zbar, &cfg, &grid)?, &cfg, &grid)?.max_abs_diff(&zbar));
        let proj = inverse_aggregate(&aggregate(&p, &cfg, &grid)?, &cfg, &grid)?;
        let again = inverse_aggregate(&aggregate(&proj, &cfg, &grid)?, &cfg, &grid)?;
        worst = worst.max(again.max_abs_diff(&proj));
    }
    Ok((worst < 1e-12, format!("max deviation {worst:.2e}")))
}

/// Window `i` is kept iff fewer than `K` windows outrank it, where equal
/// scores are ranked by lower index.
pub fn topk_rank_oracle(s: &[f64], ratio: f64) -> Vec<usize> {
    let k = kept_count(ratio, s.len());
    (0..s.len())
        .filter(|&i| {
            let above = (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
            above < k
        })
        .collect()
}

fn topk_oracle(fault: Option<Fault>) -> Outcome {
    let tie = if fault == Some(Fault::TopkTiebreak) { TopkTie::HigherIndex } else { TopkTie::LowerIndex };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let trials = 300;
    for _ in 0..trials {
        let n = rng.gen_range(1..=40);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 8.0).collect();
        let ratio = rng.gen_range(1..=10) as f64 / 10.0;
        let sel = select_topk_with(&ScoreVector(s.clone()), ratio, tie)?;
        if sel.kept != topk_rank_oracle(&s, ratio) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/{trials} mismatches")))
}

fn tiny_config(window: usize, dims: [usize; 4], heads: usize) -> BackboneConfig {
    let mut cfg = BackboneConfig::toy();
    for (s, d) in cfg.stages.iter_mut().zip(dims) {
        s.dim = d;
        s.heads = heads;
        s.window = window;
    }
    cfg.mlp_ratio = 2;
    cfg
}

fn uniform_scores() -> Outcome {
    let cfg = tiny_config(3, [6, 12, 24, 48], 2);
    let ps = init_params(&cfg, 4)?;
    let mut worst: f64 = 0.0;
    for t in [ResidualTransform::Identity, ResidualTransform::Absolute, ResidualTransform::Squared] {
        for v in [-0.7, 0.0, 1.3] {
            let z = Tensor::full(&[9, 12, 6], v);
            let out = run_stage(&z, &cfg.stages[0], &ps, 0, t, None)?;
            let u = 1.0 / out.scores.len() as f64;
            worst = worst.max(out.scores.0.iter().map(|s| (s - u).abs()).fold(0.0, f64::max));
            worst = worst.max((out.scores.sum() - 1.0).abs());
        }
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

/// Windows (by index) in which two maps differ anywhere.
pub fn changed_windows(a: &Tensor, b: &Tensor, grid: &WindowGrid) -> Vec<usize> {
    let c = a.shape()[2];
    let mut out: Vec<usize> = (0..grid.h * grid.w)
        .filter(|&t| (0..c).any(|ch| a.data()[t * c + ch].to_bits() != b.data()[t * c + ch].to_bits()))
        .map(|t| grid.window_at(t / grid.w, t % grid.w))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn touch_set() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = String::from("all within kept windows");
    for trial in 0..20 {
        let ratio = rng.gen_range(1..=10) as f64 / 10.0;
        let cfg = tiny_config(3, [6, 12, 24, 48], 2).with_keep_ratio(ratio)?;
        let ps = init_params(&cfg, trial)?;
        let z = Tensor::uniform(&[rng.gen_range(4..14), rng.gen_range(4..14), 6], -1.0, 1.0, &mut rng);
        let out = run_stage(&z, &cfg.stages[0], &ps, 0, ResidualTransform::Identity, None)?;
        let changed = changed_windows(&out.map, &out.pre_local, &out.grid);
        if changed.len() > out.selection.kept_count() || changed.iter().any(|&w| !out.selection.is_kept(w)) {
            worst = format!("trial {trial}: changed {changed:?}, kept {:?}", out.selection.kept);
            return Ok((false, worst));
        }
    }
    Ok((true, worst))
}

fn dense_equivalence() -> Outcome {
    let cfg = BackboneConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let ps = randomized_rel_bias(init_params(&cfg, 100 + i)?, &mut rng);
        let img = Tensor::uniform(&[56, 56, 3], 0.0, 1.0, &mut rng);
        let sparse = run_backbone(&img, &cfg, &ps, None)?;
        let dense = dense_backbone(&img, &cfg, &ps)?;
        for (s, d) in sparse.iter().zip(&dense) {
            worst = worst.max(s.map.max_abs_diff(d));
        }
    }
    Ok((worst < 1e-8, format!("max abs deviation {worst:.2e}")))
}

/// Relative-position tables start at zero; randomize them so the bias
/// indexing is exercised.
pub fn randomized_rel_bias<R: Rng + ?Sized>(mut ps: ParamSet, rng: &mut R) -> ParamSet {
    for name in ps.names() {
        if name.ends_with("rel_bias") {
            let shape = ps.get(&name).expect("listed").shape().to_vec();
            ps.insert(name, Tensor::uniform(&shape, -0.5, 0.5, rng));
        }
    }
    ps
}

/// Maximum relative error between tape gradients and central differences
/// for every parameter used by stage 0, in training mode with fixed noise.
pub fn stage_gradient_error(cfg: &BackboneConfig, ps: &ParamSet, image: &Tensor, seed: u64) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Train;
    cfg.validate()?;
    let noise = GumbelNoise::new(seed);
    let (gh, gw) = cfg.stage_grids(image.shape()[0], image.shape()[1])[0];
    let grid = WindowGrid::new(gh, gw, cfg.stages[0].window)?;
    let u = noise.stage(0, grid.num_windows());
    let probe = Tensor::uniform(&[gh * gw, cfg.stages[0].dim], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let mut worst: f64 = 0.0;
    for name in ps.names().into_iter().filter(|n| n.starts_with("patch_embed") || n.starts_with("stages.0.")) {
        let f = hr(|tape, w| {
            let bound = ps.bind(tape).replace(&name, w);
            let (x, _, _) = patch_embed_var(
                tape,
                image,
                cfg.patch_size,
                bound.var("patch_embed.weight").expect("bound"),
                bound.var("patch_embed.bias").expect("bound"),
            )
            .expect("valid image");
            let st = stage_var(x, &grid, &cfg.stages[0], &bound, 0, cfg.transform, Some((&u, cfg.temperature)))
                .expect("valid stage");
            st.tokens.dot_const(&probe).expect("matching probe")
        });
        let tape = Tape::new();
        let w = tape.leaf(ps.get(&name)?.clone());
        let analytic = tape.backward(f(&tape, w))?.wrt(w);
        let eval = |p: &Tensor| {
            let tape = Tape::inference();
            f(&tape, tape.leaf(p.clone())).value().data()[0]
        };
        let numeric = central_difference(&eval, ps.get(&name)?, 1e-5);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn stage_gradients() -> Outcome {
    let cfg = tiny_config(4, [8, 16, 32, 64], 2).with_keep_ratio(0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps = randomized_rel_bias(init_params(&cfg, 7)?, &mut rng);
    let img = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut rng);
    let err = stage_gradient_error(&cfg, &ps, &img, 8)?;
    Ok((err < 1e-4, format!("max rel err {err:.2e}")))
}

/// Exhaustive reference: literal per-slice greedy NMS, then repeatedly
/// remove the largest remaining box (higher score, then earlier position
/// on equal area) and everything it covers.
pub fn cnms_oracle(sets: &[BoxSet], cfg: &CnmsConfig) -> BoxSet {
    let mut union = Vec::new();
    for set in sets {
        let mut rest: Vec<DetBox> = set.clone();
        while !rest.is_empty() {
            let mut best = 0;
            for i in 1..rest.len() {
                if rest[i].score > rest[best].score {
                    best = i;
                }
            }
            let keep = rest.remove(best);
            rest.retain(|b| b.class != keep.class || iou(b, &keep) < cfg.tau_local);
            union.push(keep);
        }
    }
    let mut out = Vec::new();
    let mut rest = union;
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            let (a, b) = (&rest[i], &rest[best]);
            if a.area() > b.area() || (a.area() == b.area() && a.score > b.score) {
                best = i;
            }
        }
        let keep = rest.remove(best);
        rest.retain(|b| b.class != keep.class || iou(b, &keep) < cfg.tau);
        out.push(keep);
    }
    out
}

/// Integer-coordinate boxes with quantized scores, so area and score ties
/// occur often.
pub fn random_slice_sets<R: Rng + ?Sized>(rng: &mut R) -> Vec<BoxSet> {
    let slices = rng.gen_range(2..=5);
    (0..slices)
        .map(|s| {
            let n = rng.gen_range(0..=20);
            (0..n)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64);
                    let (w, h) = (rng.gen_range(1..12) as f64, rng.gen_range(1..12) as f64);
                    let score = rng.gen_range(1..=10) as f64 / 10.0;
                    DetBox::new(x, y, x + w, y + h, score, rng.gen_range(0..2), s).expect("valid box")
                })
                .collect()
        })
        .collect()
}

fn cnms_oracle_check(fault: Option<Fault>) -> Outcome {
    let tie = if fault == Some(Fault::CnmsTiebreak) { TieBreak::Reversed } else { TieBreak::Standard };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 500;
    let mut mismatches = 0;
    for i in 0..trials {
        let tau = [0.3, 0.5, 0.7][i % 3];
        let cfg = CnmsConfig::new(tau, tau)?;
        let sets = random_slice_sets(&mut rng);
        if cnms_multi_with(&sets, &cfg, tie) != cnms_oracle(&sets, &cfg) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/{trials} mismatches")))
}

fn area_priority_scenario() -> Outcome {
    let cfg = CnmsConfig::default();
    let large = DetBox::new(0.0, 0.0, 100.0, 100.0, 0.6, 0, 0)?;
    let small = DetBox::new(0.0, 0.0, 80.0, 80.0, 0.9, 0, 1)?;
    let sets = vec![vec![large], vec![small]];
    let c = cnms_multi_with(&sets, &cfg, TieBreak::Standard);
    let n = nms_multi(&sets, &cfg);
    let ok = iou(&large, &small) >= cfg.tau && c == vec![large] && n == vec![small];
    Ok((ok, format!("cnms keeps {} box(es), nms keeps score {:?}", c.len(), n.first().map(|b| b.score))))
}

fn overlap_origins() -> Outcome {
    let xs: Vec<u32> = overlap_slices(Extent::new(2048, 1024), 1024, 200)?.iter().map(|s| s.x).collect();
    Ok((xs == [0, 824, 1024], format!("x origins {xs:?}")))
}

/// Pipeline settings whose fine overlap covers the largest object.
pub fn covering_config(scene: &SceneSpec, fine_size: u32) -> PipelineConfig {
    let overlap = scene.max_object_side().ceil() as u32;
    PipelineConfig {
        slicing: TwoScaleConfig { fine_size: fine_size.max(overlap + 1), overlap, ..TwoScaleConfig::default() },
        ..PipelineConfig::default()
    }
}

fn oracle_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 30;
    for t in 0..trials {
        let extent = Extent::new(rng.gen_range(300..2500), rng.gen_range(300..2500));
        let scene = SceneSpec::random(rng.gen(), extent, rng.gen_range(0..25), rng.gen_range(20..400), true);
        let cfg = covering_config(&scene, rng.gen_range(256..1024));
        let out = run_pipeline(&scene, &OracleDetector { scene: &scene }, &cfg)?;
        let m = evaluate(&out, &scene.boxes, 0.5);
        if m.recall < 1.0 {
            return Ok((false, format!("scene {t}: recall {}", m.recall)));
        }
    }
    Ok((true, format!("recall 1.0 on {trials} scenes")))
}

fn instrumented_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (kind, k) in [(BlockKind::Attention, 0.6), (BlockKind::Convolution, 0.8)] {
        let mut cfg = tiny_config(3, [8, 16, 32, 64], 2).with_kind(kind).with_keep_ratio(k)?;
        for s in &mut cfg.stages {
            s.depth = 3;
        }
        let ps = init_params(&cfg, 12)?;
        let img = Tensor::uniform(&[44, 52, 3], 0.0, 1.0, &mut rng);
        let (out, measured) = measure_flops(|| run_backbone(&img, &cfg, &ps, None));
        let sels: Vec<_> = out?.into_iter().map(|s| s.selection).collect();
        let analytic: u64 = count_backbone(&cfg, 44, 52, &sels)?.iter().map(StageCounts::total).sum();
        if analytic != measured {
            return Ok((false, format!("{kind:?}: analytic {analytic} vs measured {measured}")));
        }
    }
    Ok((true, "analytic == instrumented".into()))
}

fn ratio_trend() -> Outcome {
    let cfg = BackboneConfig::toy();
    let ks = [0.1, 0.3, 0.5, 0.7, 1.0];
    let rows = sweep_ratios(&cfg, 800, 1280, &[], &ks, SweepVariants { geometric: true, stagewise: false })?;
    let all: Vec<u64> = rows.iter().map(|r| r.report.all).collect();
    let ratio = all[3] as f64 / all[4] as f64;
    let ok = all.windows(2).all(|w| w[0] < w[1]) && ratio <= 0.75;
    Ok((ok, format!("all(0.7)/all(1.0) = {ratio:.4}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_names_round_trip() {
        for f in [Fault::CnmsTiebreak, Fault::TopkTiebreak] {
            assert_eq!(f.to_string().parse::<Fault>().unwrap(), f);
        }
        assert!("nope".parse::<Fault>().is_err());
    }

    #[test]
    fn oracles_agree_on_simple_cases() {
        assert_eq!(topk_rank_oracle(&[0.5, 0.5, 0.1, 0.5], 0.5), vec![0, 1]);
        let a = DetBox::new(0.0, 0.0, 10.0, 10.0, 0.5, 0, 0).unwrap();
        let b = DetBox::new(1.0, 0.0, 11.0, 10.0, 0.7, 0, 1).unwrap();
        assert_eq!(cnms_oracle(&[vec![a], vec![b]], &CnmsConfig::default()), vec![b]);
    }

    #[test]
    fn faults_are_detected() {
        assert!(!topk_oracle(Some(Fault::TopkTiebreak)).unwrap().0);
        assert!(!cnms_oracle_check(Some(Fault::CnmsTiebreak)).unwrap().0);
        assert!(topk_oracle(None).unwrap().0);
        assert!(cnms_oracle_check(None).unwrap().0);
    }
}
