//! Optimization loop: view scheduling, Adam updates over every parameter group,
//! densification, regularized renders, logging and checkpoints.

mod adam;
mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, Moments};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::losses::{evaluate_view, AlignmentResult, LossReport, LossWeights, ViewObjective, ViewTargets};
use crate::regularizer::{prepare_overlay, AttentionGrad, FeatureOverlay, AttentionParams, RegularizerConfig, RegularizerDiagnostics, SkipReason};
use crate::scene::{decode_anchors, decode_anchors_with_features, densify_and_prune, DecodedScene, GaussianGrad, init_from_points, retain_rows, DensifyConfig, DensifyStats, Scene, SceneConfig, SceneGrad};
use crate::splatter::{render_backward, render_with, PixelGrads, RenderOptions, RenderOutput};
use crate::workbench::dataset::SceneDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Anchor positions decay exponentially from `position_init` to `position_final`.
    pub position_init: f64,
    pub position_final: f64,
    pub feature: f64,
    pub offset: f64,
    pub offset_scale: f64,
    pub decoder: f64,
    pub attention: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            feature: 2.5e-3,
            offset: 1e-2,
            offset_scale: 7e-3,
            decoder: 2e-3,
            attention: 1e-3,
        }
    }
}

impl LearningRates {
    /// Position rate at `step` (1-based) of `total`.
    pub fn position_at(&self, step: usize, total: usize) -> f64 {
        let t = if total <= 1 { 0.0 } else { (step.saturating_sub(1)) as f64 / (total - 1) as f64 };
        self.position_init * (self.position_final / self.position_init).powf(t.clamp(0.0, 1.0))
    }

    fn all(&self) -> [(&'static str, f64); 7] {
        [
            ("position_init", self.position_init),
            ("position_final", self.position_final),
            ("feature", self.feature),
            ("offset", self.offset),
            ("offset_scale", self.offset_scale),
            ("decoder", self.decoder),
            ("attention", self.attention),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub seed: u64,
    /// Sequential rendering and reductions. Results are bit-reproducible either
    /// way; this only removes thread scheduling from the picture.
    pub deterministic: bool,
    pub rates: LearningRates,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub scene: SceneConfig,
    pub densify: DensifyConfig,
    pub regularizer: RegularizerConfig,
    /// Intermediate checkpoint interval in steps; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 15000,
            seed: 0,
            deterministic: false,
            rates: LearningRates::default(),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            scene: SceneConfig::default(),
            densify: DensifyConfig::default(),
            regularizer: RegularizerConfig::default(),
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    /// The default schedule compressed to `total_steps`: warmup, densification
    /// window and interval shrink proportionally, and only the final checkpoint is kept.
    pub fn scaled(total_steps: usize, seed: u64) -> Self {
        let base = TrainConfig::default();
        let scale = |v: usize| (v as f64 * total_steps as f64 / base.total_steps as f64).round() as usize;
        let mut cfg = TrainConfig {
            total_steps,
            seed,
            checkpoint_every: 0,
            ..base
        };
        cfg.regularizer.warmup_steps = scale(cfg.regularizer.warmup_steps);
        cfg.densify.start_step = scale(cfg.densify.start_step);
        cfg.densify.end_step = scale(cfg.densify.end_step);
        cfg.densify.interval = scale(cfg.densify.interval).max(1);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        for (name, v) in self.rates.all() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("learning rate {name} must be positive, got {v}")));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1) and eps must be non-negative".into()));
        }
        self.loss.validate()?;
        self.scene.validate()
    }
}

/// Names of the parameter groups, in optimizer order.
pub const PARAM_GROUPS: [&str; 19] = [
    "positions",
    "features",
    "offset_scales",
    "offsets",
    "opacity.w1",
    "opacity.b1",
    "opacity.w2",
    "opacity.b2",
    "color.w1",
    "color.b1",
    "color.w2",
    "color.b2",
    "shape.w1",
    "shape.b1",
    "shape.w2",
    "shape.b2",
    "attention.w_q",
    "attention.w_k",
    "attention.w_v",
];

/// Mutable parameter groups in [`PARAM_GROUPS`] order.
pub fn params_mut<'a>(scene: &'a mut Scene, att: &'a mut AttentionParams) -> [&'a mut Vec<f64>; 19] {
    let a = &mut scene.anchors;
    let d = &mut scene.decoders;
    [
        &mut a.positions,
        &mut a.features,
        &mut a.offset_scales,
        &mut a.offsets,
        &mut d.opacity.w1,
        &mut d.opacity.b1,
        &mut d.opacity.w2,
        &mut d.opacity.b2,
        &mut d.color.w1,
        &mut d.color.b1,
        &mut d.color.w2,
        &mut d.color.b2,
        &mut d.shape.w1,
        &mut d.shape.b1,
        &mut d.shape.w2,
        &mut d.shape.b2,
        &mut att.w_q,
        &mut att.w_k,
        &mut att.w_v,
    ]
}

/// Parameter groups in [`PARAM_GROUPS`] order.
pub fn params<'a>(scene: &'a Scene, att: &'a AttentionParams) -> [&'a Vec<f64>; 19] {
    let a = &scene.anchors;
    let d = &scene.decoders;
    [
        &a.positions,
        &a.features,
        &a.offset_scales,
        &a.offsets,
        &d.opacity.w1,
        &d.opacity.b1,
        &d.opacity.w2,
        &d.opacity.b2,
        &d.color.w1,
        &d.color.b1,
        &d.color.w2,
        &d.color.b2,
        &d.shape.w1,
        &d.shape.b1,
        &d.shape.w2,
        &d.shape.b2,
        &att.w_q,
        &att.w_k,
        &att.w_v,
    ]
}

/// Gradients in [`PARAM_GROUPS`] order.
pub fn grads<'a>(g: &'a SceneGrad, a: &'a AttentionGrad) -> [&'a Vec<f64>; 19] {
    let d = &g.decoders;
    [
        &g.positions,
        &g.features,
        &g.offset_scales,
        &g.offsets,
        &d.opacity.w1,
        &d.opacity.b1,
        &d.opacity.w2,
        &d.opacity.b2,
        &d.color.w1,
        &d.color.b1,
        &d.color.w2,
        &d.color.b2,
        &d.shape.w1,
        &d.shape.b1,
        &d.shape.w2,
        &d.shape.b2,
        &a.w_q,
        &a.w_k,
        &a.w_v,
    ]
}

/// Values per anchor row for the first four (per-anchor) groups.
fn anchor_row_widths(scene: &Scene) -> [usize; 4] {
    let a = &scene.anchors;
    [3, a.feature_dim, 3, 3 * a.offsets_per_anchor]
}

fn group_rate(group: usize, rates: &LearningRates, step: usize, total: usize) -> f64 {
    match group {
        0 => rates.position_at(step, total),
        1 => rates.feature,
        2 => rates.offset_scale,
        3 => rates.offset,
        16..=18 => rates.attention,
        _ => rates.decoder,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    /// Number of updates applied so far.
    pub step: u64,
    /// One entry per [`PARAM_GROUPS`] element.
    pub moments: Vec<Moments>,
}

impl Optimizer {
    fn new(scene: &Scene, att: &AttentionParams) -> Self {
        Optimizer {
            step: 0,
            moments: params(scene, att).iter().map(|p| Moments::zeros(p.len())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifySummary {
    pub added: usize,
    pub removed: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub anchors: usize,
    pub regularized: bool,
    pub regularizer: RegularizerDiagnostics,
    pub degenerate_alignment: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub densify: Option<DensifySummary>,
}

/// Complete training state; saving it is a checkpoint.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
    pub scene: Scene,
    pub attention: AttentionParams,
    pub optimizer: Optimizer,
    pub cameras: Vec<Camera>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) view_order: Vec<usize>,
    pub(crate) view_cursor: usize,
    pub(crate) stats: DensifyStats,
}

impl Trainer {
    pub fn new(dataset: &SceneDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scene = init_from_points(&dataset.init_points, &config.scene, &mut rng)?;
        let attention = AttentionParams::identity(scene.anchors.feature_dim);
        let optimizer = Optimizer::new(&scene, &attention);
        let stats = DensifyStats::new(scene.anchor_count(), scene.anchors.offsets_per_anchor);
        Ok(Trainer {
            config,
            step: 0,
            scene,
            attention,
            optimizer,
            cameras: dataset.cameras.clone(),
            rng,
            view_order: Vec::new(),
            view_cursor: 0,
            stats,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn camera(&self, id: u32) -> Result<&Camera> {
        self.cameras.iter().find(|c| c.id == id).ok_or(Error::UnknownCamera(id))
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            parallel: !self.config.deterministic,
            ..RenderOptions::default()
        }
    }

    /// Plain render of the current scene.
    pub fn render(&self, cam: &Camera) -> RenderOutput {
        let decoded = decode_anchors(&self.scene, cam);
        render_with(&decoded.gaussians, cam, &self.render_options()).0
    }

    /// Index into the dataset's views, in shuffled epochs.
    fn next_view(&mut self, views: usize) -> usize {
        if self.view_cursor >= self.view_order.len() || self.view_order.len() != views {
            self.view_order = (0..views).collect();
            self.view_order.shuffle(&mut self.rng);
            self.view_cursor = 0;
        }
        let v = self.view_order[self.view_cursor];
        self.view_cursor += 1;
        v
    }

    /// Runs one optimization step.
    pub fn step(&mut self, dataset: &SceneDataset) -> Result<LogEntry> {
        let step = self.step + 1;
        let view = &dataset.views[self.next_view(dataset.views.len())];
        let cam = self.camera(view.camera_id)?.clone();
        let diverged = |reason: String| Error::Diverged {
            step,
            view: view.camera_id,
            reason,
        };

        let reg = &self.config.regularizer;
        let (overlay, diagnostics) = if reg.active(step, view.is_reference) {
            prepare_overlay(&self.scene, &cam, &view.mask, &self.attention, reg.max_group, &mut self.rng)?
        } else {
            (None, RegularizerDiagnostics::skipped(SkipReason::Disabled))
        };
        let targets = ViewTargets {
            view_id: view.camera_id,
            is_reference: view.is_reference,
            target: view.target(),
            mono_depth: &view.mono_depth,
            mask: &view.mask,
        };
        let eval = evaluate_gradients(
            &self.scene,
            &self.attention,
            &cam,
            &targets,
            &self.config.loss,
            overlay.as_ref(),
            None,
            &self.render_options(),
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => diverged(e.to_string()),
            other => other,
        })?;
        let Evaluation {
            objective,
            decoded,
            gaussian_grads: gauss_grads,
            scene_grad,
            attention_grad: att_grad,
        } = eval;
        if let Some((i, _)) = grads(&scene_grad, &att_grad)
            .iter()
            .enumerate()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(diverged(format!("non-finite gradient in {}", PARAM_GROUPS[i])));
        }

        let densify = self.config.densify.clone();
        if densify.enabled && step <= densify.end_step {
            self.stats.record(&decoded, &gauss_grads);
        }
        self.apply(&scene_grad, &att_grad, step);

        let mut summary = None;
        if densify.is_due(step) {
            let report = densify_and_prune(&mut self.scene, &self.stats, &densify);
            if !report.is_noop() {
                let widths = anchor_row_widths(&self.scene);
                for (g, w) in widths.iter().enumerate() {
                    let m = &mut self.optimizer.moments[g];
                    retain_rows(&mut m.m, *w, &report.kept);
                    retain_rows(&mut m.v, *w, &report.kept);
                    m.m.resize(m.m.len() + report.added * w, 0.0);
                    m.v.resize(m.v.len() + report.added * w, 0.0);
                }
            }
            summary = Some(DensifySummary {
                added: report.added,
                removed: report.removed(),
            });
            self.stats = DensifyStats::new(self.scene.anchor_count(), self.scene.anchors.offsets_per_anchor);
        }

        self.step = step;
        Ok(LogEntry {
            step,
            loss: objective.report,
            anchors: self.scene.anchor_count(),
            regularized: diagnostics.regularized,
            regularizer: diagnostics,
            degenerate_alignment: objective.alignment.degenerate,
            densify: summary,
        })
    }

    fn apply(&mut self, scene_grad: &SceneGrad, att_grad: &AttentionGrad, step: usize) {
        self.optimizer.step += 1;
        let t = self.optimizer.step;
        let total = self.config.total_steps;
        let rates = self.config.rates;
        let adam = self.config.adam;
        let g = grads(scene_grad, att_grad);
        let moments = &mut self.optimizer.moments;
        for (i, p) in params_mut(&mut self.scene, &mut self.attention).into_iter().enumerate() {
            adam_update(p, g[i], &mut moments[i], group_rate(i, &rates, step, total), t, &adam);
        }
    }
}

/// Loss and gradients of one view's objective.
pub struct Evaluation {
    pub objective: ViewObjective,
    pub decoded: DecodedScene,
    pub gaussian_grads: Vec<GaussianGrad>,
    pub scene_grad: SceneGrad,
    pub attention_grad: AttentionGrad,
}

/// Decodes (through `overlay` when given), renders and evaluates one view, then
/// backpropagates the total loss to every scene and attention parameter.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_gradients(
    scene: &Scene,
    attention: &AttentionParams,
    cam: &Camera,
    targets: &ViewTargets<'_>,
    weights: &LossWeights,
    overlay: Option<&FeatureOverlay>,
    alignment: Option<AlignmentResult>,
    options: &RenderOptions,
) -> Result<Evaluation> {
    let features = overlay.map_or(&scene.anchors.features, |o| &o.features);
    let decoded = decode_anchors_with_features(scene, cam, features);
    let (out, state) = render_with(&decoded.gaussians, cam, options);
    let objective = evaluate_view(&out, targets, weights, alignment)?;
    let pixel = PixelGrads {
        color: &objective.d_color,
        depth: &objective.d_depth,
        alpha: None,
    };
    let gaussian_grads = render_backward(&state, &decoded.gaussians, cam, &pixel);
    let mut scene_grad = decoded.backward(scene, &gaussian_grads);
    let mut attention_grad = attention.zero_grad();
    if let Some(o) = overlay {
        let (d_features, g) = o.backward(scene, attention, &scene_grad.features)?;
        scene_grad.features = d_features;
        attention_grad = g;
    }
    Ok(Evaluation {
        objective,
        decoded,
        gaussian_grads,
        scene_grad,
        attention_grad,
    })
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

/// Trains to completion. With an output directory, the log is streamed to
/// `train_log.jsonl`, intermediate checkpoints go to `checkpoints/step_NNNNNN`
/// and the final one to `checkpoint`.
pub fn train(dataset: &SceneDataset, config: TrainConfig, out_dir: Option<&Path>) -> Result<(Trainer, Vec<LogEntry>)> {
    let mut trainer = Trainer::new(dataset, config)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(trainer.config.total_steps);
    while !trainer.is_done() {
        let result = trainer.step(dataset);
        let entry = match result {
            Ok(e) => e,
            Err(e) => {
                if let Some((f, p)) = log_file.as_mut() {
                    f.flush().map_err(|err| Error::io(p.as_path(), err))?;
                }
                return Err(e);
            }
        };
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entries serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);
        let every = trainer.config.checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
                save_checkpoint(&trainer, &dir.join("checkpoints").join(format!("step_{:06}", trainer.step)))?;
            }
        }
    }
    if let (Some(dir), Some((mut f, p))) = (out_dir, log_file) {
        f.flush().map_err(|e| Error::io(p, e))?;
        save_checkpoint(&trainer, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((trainer, log))
}
