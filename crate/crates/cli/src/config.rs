//! Run configuration: one JSON document that, with a seed, fixes a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparseformer::backbone::BackboneConfig;
use sparseformer::slicer::{Extent, PipelineConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Either an inline backbone config, `"toy"`, or a path to a backbone JSON
/// file (relative to the run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneRef {
    Inline(BackboneConfig),
    Named(String),
}

impl Default for BackboneRef {
    fn default() -> Self {
        Self::Named("toy".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneRun {
    /// Synthetic image size (height, width).
    pub height: usize,
    pub width: usize,
    /// Overrides the stage ratios with the geometric schedule of this ratio.
    pub keep_ratio: Option<f64>,
}

impl Default for BackboneRun {
    fn default() -> Self {
        Self { height: 56, width: 56, keep_ratio: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsRun {
    pub height: usize,
    pub width: usize,
    pub ratios: Vec<f64>,
    pub stagewise: bool,
    /// Ground-truth boxes that mark foreground windows.
    pub scene: Option<PathBuf>,
}

impl Default for FlopsRun {
    fn default() -> Self {
        Self {
            height: 800,
            width: 1280,
            ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            stagewise: false,
            scene: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRun {
    pub width: u32,
    pub height: u32,
    pub count: usize,
    pub max_side: u32,
    pub disjoint: bool,
}

impl Default for SceneRun {
    fn default() -> Self {
        Self { width: 2048, height: 1536, count: 30, max_side: 600, disjoint: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub backbone: BackboneRef,
    pub backbone_run: BackboneRun,
    pub pipeline: PipelineConfig,
    /// IoU at which a detection matches a ground-truth box.
    pub match_iou: f64,
    pub flops: FlopsRun,
    pub scene: SceneRun,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            seed: 0,
            backbone: BackboneRef::default(),
            backbone_run: BackboneRun::default(),
            pipeline: PipelineConfig::default(),
            match_iou: 0.5,
            flops: FlopsRun::default(),
            scene: SceneRun::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config; backbone and scene paths are resolved
    /// against the config's directory and the backbone is inlined.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let BackboneRef::Named(name) = &cfg.backbone {
            if name != "toy" {
                let p = base.join(name);
                let b = BackboneConfig::load(&p).with_context(|| format!("loading backbone config {}", p.display()))?;
                cfg.backbone = BackboneRef::Inline(b);
            }
        }
        if let Some(s) = &cfg.flops.scene {
            cfg.flops.scene = Some(base.join(s));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            bail!("unsupported run config version {}", self.version);
        }
        self.backbone_config()?;
        self.pipeline.cnms.validate()?;
        let s = &self.pipeline.slicing;
        if s.fine_size == 0 || s.overlap >= s.fine_size || s.coarse_factor == 0 || !(s.area_threshold > 0.0) {
            bail!("inconsistent slicing parameters {s:?}");
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            bail!("match_iou {} outside (0, 1]", self.match_iou);
        }
        if self.backbone_run.height == 0 || self.backbone_run.width == 0 {
            bail!("backbone image size must be positive");
        }
        if self.flops.height == 0 || self.flops.width == 0 {
            bail!("flops image size must be positive");
        }
        Ok(())
    }

    /// The backbone with the run's keep ratio applied.
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let base = match &self.backbone {
            BackboneRef::Inline(b) => b.clone(),
            BackboneRef::Named(n) if n == "toy" => BackboneConfig::toy(),
            BackboneRef::Named(n) => bail!("unresolved backbone reference {n:?}"),
        };
        let cfg = match self.backbone_run.keep_ratio {
            Some(k) => base.with_keep_ratio(k)?,
            None => base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_extent(&self) -> Extent {
        Extent::new(self.scene.width, self.scene.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "backbone_run": {"height": 28, "width": 28, "keep_ratio": 0.5}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backbone_config().unwrap().stages[0].ratio, 0.5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.cnms.tau = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.backbone_run.keep_ratio = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
