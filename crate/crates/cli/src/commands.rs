//! Subcommand bodies. Each writes its artifacts under an output directory
//! and returns a short summary for stdout.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use sparseformer::backbone::{init_params, run_backbone, GumbelNoise, Mode};
use sparseformer::cnms::{write_jsonl, DetBox};
use sparseformer::flops::{sweep_ratios, write_sweep_csv, write_sweep_json, SweepVariants};
use sparseformer::reference::dense_backbone;
use sparseformer::slicer::{evaluate, run_pipeline, BackboneDetector, Detector, MergeKind, Metrics, OracleDetector, SceneSpec};
use sparseformer::sparsify::score_map_pgm;
use sparseformer::tensor::Tensor;
use sparseformer::verify::{run_suite, Check, Fault};

use crate::config::RunConfig;

#[derive(Serialize)]
struct FileEntry {
    file: String,
    sha256: String,
}

impl FileEntry {
    fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<Self> {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(Self { file: name.into(), sha256: format!("{:x}", Sha256::digest(bytes)) })
    }
}

#[derive(Serialize)]
struct StageEntry {
    stage: usize,
    shape: Vec<usize>,
    windows: Option<usize>,
    kept: Option<usize>,
    map: FileEntry,
    scores: Option<FileEntry>,
    selection: Option<FileEntry>,
    score_map: Option<FileEntry>,
}

#[derive(Serialize)]
struct BackboneManifest {
    version: u32,
    seed: u64,
    dense: bool,
    image_shape: Vec<usize>,
    config: FileEntry,
    stages: Vec<StageEntry>,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn synthetic_image(cfg: &RunConfig) -> Tensor {
    let r = &cfg.backbone_run;
    Tensor::uniform(&[r.height, r.width, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Per-stage maps, scores, selections, score-map PGMs, the parameter
/// checkpoint and a manifest with content hashes. `dense` runs the full
/// attention reference instead and writes maps only.
pub fn backbone(cfg: &RunConfig, out: &Path, dense: bool) -> Result<String> {
    let bcfg = cfg.backbone_config()?;
    let image = synthetic_image(cfg);
    let params = init_params(&bcfg, cfg.seed)?;
    fs::create_dir_all(out)?;
    params.save(&out.join("params")).context("writing parameter checkpoint")?;
    let config = FileEntry::write(out, "run_config.json", &json_bytes(cfg)?)?;

    let mut stages = Vec::new();
    if dense {
        for (i, map) in dense_backbone(&image, &bcfg, &params)?.iter().enumerate() {
            stages.push(StageEntry {
                stage: i + 1,
                shape: map.shape().to_vec(),
                windows: None,
                kept: None,
                map: FileEntry::write(out, &format!("stage{}_map.bin", i + 1), &map.to_bytes())?,
                scores: None,
                selection: None,
                score_map: None,
            });
        }
    } else {
        let noise = (bcfg.mode == Mode::Train).then(|| GumbelNoise::new(cfg.seed));
        for (i, s) in run_backbone(&image, &bcfg, &params, noise.as_ref())?.iter().enumerate() {
            let n = i + 1;
            stages.push(StageEntry {
                stage: n,
                shape: s.map.shape().to_vec(),
                windows: Some(s.selection.total),
                kept: Some(s.selection.kept_count()),
                map: FileEntry::write(out, &format!("stage{n}_map.bin"), &s.map.to_bytes())?,
                scores: Some(FileEntry::write(out, &format!("stage{n}_scores.json"), &json_bytes(&s.scores)?)?),
                selection: Some(FileEntry::write(out, &format!("stage{n}_selection.json"), &json_bytes(&s.selection)?)?),
                score_map: Some(FileEntry::write(out, &format!("stage{n}_scores.pgm"), &score_map_pgm(&s.scores, &s.grid)?)?),
            });
        }
    }
    let summary = stages
        .iter()
        .map(|s| match (s.kept, s.windows) {
            (Some(k), Some(n)) => format!("stage{} {:?} kept {k}/{n}", s.stage, s.shape),
            _ => format!("stage{} {:?}", s.stage, s.shape),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let manifest = BackboneManifest {
        version: 1,
        seed: cfg.seed,
        dense,
        image_shape: image.shape().to_vec(),
        config,
        stages,
    };
    fs::write(out.join("manifest.json"), json_bytes(&manifest)?)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DetectorKind {
    Oracle,
    Backbone,
}

#[derive(Serialize)]
struct PipelineReport<'a> {
    scene: String,
    detector: &'a str,
    merge: MergeKind,
    detections: usize,
    ground_truth: usize,
    match_iou: f64,
    metrics: Metrics,
}

/// Slices the scene, detects, merges and scores the result against the
/// scene's ground truth. Writes `detections.jsonl` and `metrics.json`.
pub fn pipeline(cfg: &RunConfig, scene_path: &Path, detector: DetectorKind, out: &Path) -> Result<(String, Metrics)> {
    let scene = SceneSpec::load(scene_path).with_context(|| format!("loading scene {}", scene_path.display()))?;
    let det: Box<dyn Detector + '_> = match detector {
        DetectorKind::Oracle => Box::new(OracleDetector { scene: &scene }),
        DetectorKind::Backbone => {
            let config = cfg.backbone_config()?;
            let params = init_params(&config, cfg.seed)?;
            Box::new(BackboneDetector { scene: &scene, config, params })
        }
    };
    let boxes: Vec<DetBox> = run_pipeline(&scene, det.as_ref(), &cfg.pipeline)?;
    let metrics = evaluate(&boxes, &scene.boxes, cfg.match_iou);
    fs::create_dir_all(out)?;
    write_jsonl(BufWriter::new(File::create(out.join("detections.jsonl"))?), &boxes)?;
    let report = PipelineReport {
        scene: scene_path.display().to_string(),
        detector: match detector {
            DetectorKind::Oracle => "oracle",
            DetectorKind::Backbone => "backbone",
        },
        merge: cfg.pipeline.merge,
        detections: boxes.len(),
        ground_truth: scene.boxes.len(),
        match_iou: cfg.match_iou,
        metrics,
    };
    fs::write(out.join("metrics.json"), json_bytes(&report)?)?;
    let summary = format!(
        "{} detections, {} ground truth, recall {:.4}, precision {:.4}",
        boxes.len(),
        scene.boxes.len(),
        metrics.recall,
        metrics.precision
    );
    Ok((summary, metrics))
}

/// FLOP sweep over `cfg.flops.ratios`; writes `flops.csv` and `flops.json`
/// and returns the CSV text.
pub fn flops(cfg: &RunConfig, out: &Path) -> Result<String> {
    let f = &cfg.flops;
    let bcfg = cfg.backbone_config()?;
    let (h, w, boxes) = match &f.scene {
        Some(p) => {
            let s = SceneSpec::load(p).with_context(|| format!("loading scene {}", p.display()))?;
            (s.extent.height as usize, s.extent.width as usize, s.boxes)
        }
        None => (f.height, f.width, Vec::new()),
    };
    let variants = SweepVariants { geometric: true, stagewise: f.stagewise };
    let rows = sweep_ratios(&bcfg, h, w, &boxes, &f.ratios, variants)?;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    fs::write(out.join("flops.csv"), &csv)?;
    write_sweep_json(BufWriter::new(File::create(out.join("flops.json"))?), &rows)?;
    Ok(String::from_utf8(csv)?)
}

/// Synthetic scene with `cfg.scene` parameters, written as JSON.
pub fn scene(cfg: &RunConfig, path: &Path) -> Result<String> {
    let s = &cfg.scene;
    let scene = SceneSpec::random(cfg.seed, cfg.scene_extent(), s.count, s.max_side, s.disjoint);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, scene.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(format!("{} boxes in {}x{}", scene.boxes.len(), s.width, s.height))
}

pub fn verify(fault: Option<Fault>, out: Option<&PathBuf>) -> Result<Vec<Check>> {
    let checks = run_suite(fault);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), json_bytes(&checks)?)?;
    }
    Ok(checks)
}
