use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::dataset::{load_dataset, save_dataset};
use super::formats::{self, read_json, write_json, Image8};
use super::metrics::{compute_metrics, MetricInput, MetricsReport};
use super::synth::{synth_scene, SynthPreset};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::splatter::RenderOutput;
use crate::trainer::{load_checkpoint, train, TrainConfig, Trainer, FINAL_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(name = "splat-inpaint", version, about = "Object removal for Gaussian-splatting scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Small,
    Medium,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a scene directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// JSON training configuration; missing fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Render color and depth images from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        camera: Option<u32>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the scene's held-out views.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "small")]
        preset: PresetArg,
    },
}

/// A train output directory or a checkpoint directory itself.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join("manifest.json").exists() {
        path.to_path_buf()
    } else {
        path.join(FINAL_CHECKPOINT)
    }
}

/// Min-max normalized 16-bit visualization over covered pixels.
pub fn depth_visualization(render: &RenderOutput) -> Vec<u16> {
    let covered = || render.depth.iter().zip(&render.alpha).filter(|(_, a)| **a > 0.0).map(|(d, _)| *d);
    let lo = covered().fold(f64::INFINITY, f64::min);
    let hi = covered().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    render
        .depth
        .iter()
        .zip(&render.alpha)
        .map(|(&d, &a)| if a > 0.0 && lo.is_finite() { ((d - lo) / span * 65535.0).round() as u16 } else { 0 })
        .collect()
}

fn write_render(out: &Path, cam: &Camera, render: &RenderOutput) -> Result<()> {
    let img = Image8 {
        width: cam.width,
        height: cam.height,
        channels: 3,
        data: formats::to_u8(&render.color),
    };
    formats::write_png(&out.join(format!("{}.png", cam.id)), &img)?;
    formats::write_png16(&out.join(format!("{}_depth.png", cam.id)), cam.width, cam.height, &depth_visualization(render))
}

pub fn evaluate(trainer: &Trainer, dataset: &super::SceneDataset) -> Result<MetricsReport> {
    if dataset.test_views.is_empty() {
        return Err(Error::Dataset("scene has no held-out views".into()));
    }
    let mut renders = Vec::new();
    for t in &dataset.test_views {
        let cam = dataset.camera(t.camera_id)?;
        renders.push((cam.clone(), trainer.render(cam)));
    }
    let inputs: Vec<MetricInput<'_>> = dataset
        .test_views
        .iter()
        .zip(&renders)
        .map(|(t, (cam, r))| MetricInput {
            view_id: t.camera_id,
            width: cam.width as usize,
            height: cam.height as usize,
            render: &r.color,
            truth: &t.image,
            mask: t.mask.as_deref(),
        })
        .collect();
    Ok(compute_metrics(&inputs))
}

pub fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train {
            scene,
            config,
            out,
            seed,
            deterministic,
        } => {
            let dataset = load_dataset(&scene)?;
            let mut cfg: TrainConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            let (trainer, log) = train(&dataset, cfg, Some(&out))?;
            let last = log.last().expect("at least one step");
            Ok(json!({
                "steps": trainer.step,
                "anchors": trainer.scene.anchor_count(),
                "final_total": last.loss.total,
                "checkpoint": out.join(FINAL_CHECKPOINT),
            }))
        }
        Command::Render { checkpoint, camera, all, out } => {
            let trainer = load_checkpoint(&resolve_checkpoint(&checkpoint))?;
            let cams: Vec<Camera> = if all {
                trainer.cameras.clone()
            } else {
                let id = camera.expect("clap enforces --camera or --all");
                vec![trainer.camera(id)?.clone()]
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for cam in &cams {
                write_render(&out, cam, &trainer.render(cam))?;
            }
            Ok(json!({ "rendered": cams.iter().map(|c| c.id).collect::<Vec<_>>() }))
        }
        Command::Eval { checkpoint, scene, out } => {
            let trainer = load_checkpoint(&resolve_checkpoint(&checkpoint))?;
            let dataset = load_dataset(&scene)?;
            let report = evaluate(&trainer, &dataset)?;
            write_json(&out, &report)?;
            Ok(serde_json::to_value(&report.mean).expect("metrics serialize"))
        }
        Command::Synth { out, seed, preset } => {
            let preset = match preset {
                PresetArg::Small => SynthPreset::Small,
                PresetArg::Medium => SynthPreset::Medium,
            };
            let synth = synth_scene(&preset.config(), seed);
            save_dataset(&synth.dataset, &out)?;
            write_json(&out.join("synth_truth.json"), &synth.truth)?;
            Ok(json!({
                "train_views": synth.dataset.views.len(),
                "test_views": synth.dataset.test_views.len(),
                "reference_view_id": synth.dataset.reference_view_id,
            }))
        }
    }
}

/// One-line machine-readable error.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
