//! Command-line entry points: backbone runs, the slicing pipeline, FLOP
//! sweeps, synthetic scenes and the verification suite.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sparseformer::slicer::MergeKind;
use sparseformer::verify::Fault;

use commands::DetectorKind;
use config::RunConfig;

/// Worker threads for window-parallel and slice-parallel work.
const THREADS_ENV: &str = "SPARSEFORMER_THREADS";

#[derive(Parser)]
#[command(name = "sparseformer", version, about = "Sparse window attention backbone, slicing pipeline and cross-slice NMS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the backbone on a synthetic image and write stage outputs.
    Backbone {
        #[command(flatten)]
        common: Common,
        /// Use the dense attention reference instead of the sparse backbone.
        #[arg(long)]
        dense: bool,
    },
    /// Slice a scene, detect, merge and score against ground truth.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        merge: Option<MergeArg>,
        #[arg(long, value_enum, default_value = "oracle")]
        detector: DetectorKind,
    },
    /// Foreground/background FLOP sweep over keeping ratios.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Comma-separated keeping ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Add rows that sparsify only stage 1 or only stage 4.
        #[arg(long)]
        stagewise: bool,
        /// Scene whose boxes mark foreground windows.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Write a synthetic scene JSON.
    Scene {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite; exit 1 if any check fails.
    Verify {
        /// Inject a known fault to confirm the suite catches it.
        #[arg(long)]
        fault: Option<Fault>,
        /// Also write verify.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MergeArg {
    Nms,
    Cnms,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring thread pool")
        .map_err(Failure::Runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Backbone { common, dense } => {
            let cfg = common.run_config()?;
            cfg.validate().map_err(Failure::Usage)?;
            let summary = commands::backbone(&cfg, &common.out_dir, dense).map_err(Failure::Runtime)?;
            println!("{summary}");
        }
        Command::Pipeline { common, scene, merge, detector } => {
            let mut cfg = common.run_config()?;
            if let Some(m) = merge {
                cfg.pipeline.merge = match m {
                    MergeArg::Nms => MergeKind::Nms,
                    MergeArg::Cnms => MergeKind::Cnms,
                };
            }
            cfg.validate().map_err(Failure::Usage)?;
            if !scene.is_file() {
                return Err(Failure::Usage(anyhow::anyhow!("scene file {} not found", scene.display())));
            }
            let (summary, _) = commands::pipeline(&cfg, &scene, detector, &common.out_dir).map_err(Failure::Runtime)?;
            println!("{summary}");
        }
        Command::Flops { common, ratios, stagewise, scene } => {
            let mut cfg = common.run_config()?;
            if let Some(r) = ratios {
                cfg.flops.ratios = r;
            }
            cfg.flops.stagewise |= stagewise;
            if scene.is_some() {
                cfg.flops.scene = scene;
            }
            if cfg.flops.ratios.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
                return Err(Failure::Usage(anyhow::anyhow!("ratios must lie in (0, 1]: {:?}", cfg.flops.ratios)));
            }
            cfg.validate().map_err(Failure::Usage)?;
            print!("{}", commands::flops(&cfg, &common.out_dir).map_err(Failure::Runtime)?);
        }
        Command::Scene { common, out } => {
            let cfg = common.run_config()?;
            cfg.validate().map_err(Failure::Usage)?;
            println!("{}", commands::scene(&cfg, &out).map_err(Failure::Runtime)?);
        }
        Command::Verify { fault, out_dir } => {
            let checks = commands::verify(fault, out_dir.as_ref()).map_err(Failure::Runtime)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("verify: {} passed, {failed} failed", checks.len() - failed);
            if failed > 0 {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
