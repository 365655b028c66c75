//! Synthetic object-removal scenes with known ground truth.
//!
//! Scene A is a textured ground plane in front of a backdrop wall. Scene B is A
//! plus a compact colored object. Training views see B; the reference view's
//! inpainted image and the held-out views see A.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{SceneDataset, TestView, TrainingView};
use super::formats::{from_u8, to_u8};
use crate::geometry::{Camera, GaussianShape};
use crate::scene::{NeuralGaussian, ScenePoint};
use crate::splatter::{render_with, RenderOptions, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    #[default]
    Small,
    Medium,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub width: u32,
    pub height: u32,
    /// Spacing of the ground-truth Gaussians on the plane and wall.
    pub spacing: f64,
}

impl SynthPreset {
    pub fn config(self) -> SynthConfig {
        match self {
            SynthPreset::Small => SynthConfig {
                train_views: 8,
                test_views: 4,
                width: 64,
                height: 64,
                spacing: 0.1,
            },
            SynthPreset::Medium => SynthConfig {
                train_views: 16,
                test_views: 6,
                width: 128,
                height: 128,
                spacing: 0.06,
            },
        }
    }
}

/// Generator-side values that are not part of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    pub config: SynthConfig,
    /// Per training view: `(camera id, w, q)` with `mono = w·depth + q`.
    pub depth_affine: Vec<(u32, f64, f64)>,
    pub background_gaussians: usize,
    pub object_gaussians: usize,
}

pub struct SynthScene {
    pub dataset: SceneDataset,
    pub truth: SynthTruth,
    pub background: Vec<NeuralGaussian>,
    pub object: Vec<NeuralGaussian>,
}

const OBJECT_CENTER: [f64; 3] = [0.0, 0.35, 0.0];
const OBJECT_RADIUS: f64 = 0.3;
const LOOK_AT: [f64; 3] = [0.0, 0.3, 0.4];
const ORBIT_RADIUS: f64 = 3.2;
const ORBIT_HEIGHT: f64 = 1.4;
const ORBIT_HALF_ANGLE: f64 = 40.0;

fn smooth_checker(u: f64, v: f64, period: f64) -> f64 {
    let s = (std::f64::consts::PI * u / period).sin() * (std::f64::consts::PI * v / period).sin();
    0.5 + 0.5 * (4.0 * s).tanh()
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> Vector3<f64> {
    Vector3::new(a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t)
}

fn flat(mean: Vector3<f64>, color: Vector3<f64>, scale: Vector3<f64>) -> NeuralGaussian {
    NeuralGaussian {
        mean3d: mean,
        opacity: 0.95,
        shape: GaussianShape::new(scale.map(f64::ln), Vector4::new(1.0, 0.0, 0.0, 0.0)),
        color,
        parent_anchor: 0,
    }
}

fn background(spacing: f64) -> Vec<NeuralGaussian> {
    let mut out = Vec::new();
    let s = 0.6 * spacing;
    let steps = |lo: f64, hi: f64| ((hi - lo) / spacing).round() as usize;
    let (nx, nz) = (steps(-4.0, 4.0), steps(-2.5, 2.0));
    for i in 0..=nx {
        for j in 0..=nz {
            let (x, z) = (-4.0 + i as f64 * spacing, -2.5 + j as f64 * spacing);
            let t = smooth_checker(x, z, 0.5);
            let stripe = 0.15 * (2.2 * x + 1.3 * z).sin();
            let c = mix([0.25, 0.45, 0.2], [0.85, 0.8, 0.55], t).add_scalar(stripe).map(|v| v.clamp(0.02, 0.98));
            out.push(flat(Vector3::new(x, 0.0, z), c, Vector3::new(s, 0.2 * s, s)));
        }
    }
    let ny = steps(0.0, 3.0);
    for i in 0..=nx {
        for j in 0..=ny {
            let (x, y) = (-4.0 + i as f64 * spacing, j as f64 * spacing);
            let t = smooth_checker(x + 0.25, y, 0.6);
            let g = 0.2 * y / 3.0;
            let c = mix([0.2, 0.3, 0.6], [0.75, 0.6, 0.8], t).add_scalar(g).map(|v| v.clamp(0.02, 0.98));
            out.push(flat(Vector3::new(x, y, 2.0), c, Vector3::new(s, s, 0.2 * s)));
        }
    }
    out
}

fn object(rng: &mut ChaCha8Rng) -> Vec<NeuralGaussian> {
    let center = Vector3::from(OBJECT_CENTER);
    (0..60)
        .map(|_| {
            let dir = loop {
                let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                if v.norm_squared() <= 1.0 {
                    break v;
                }
            };
            let warm = rng.random_range(0.0..1.0);
            NeuralGaussian {
                mean3d: center + dir * OBJECT_RADIUS,
                opacity: 0.95,
                shape: GaussianShape::new(Vector3::repeat(rng.random_range(0.06f64..0.1).ln()), Vector4::new(1.0, 0.0, 0.0, 0.0)),
                color: Vector3::new(0.9, 0.15 + 0.6 * warm, 0.1),
                parent_anchor: 0,
            }
        })
        .collect()
}

fn orbit_camera(id: u32, angle_deg: f64, cfg: &SynthConfig) -> Camera {
    let a = angle_deg.to_radians();
    let eye = Vector3::new(ORBIT_RADIUS * a.sin(), ORBIT_HEIGHT, -ORBIT_RADIUS * a.cos());
    let f = 0.875 * cfg.width as f64;
    Camera::look_at(id, cfg.width, cfg.height, f, f, eye, Vector3::from(LOOK_AT), Vector3::y()).expect("orbit cameras are valid")
}

fn quantize_rgb(values: &[f64]) -> Vec<f64> {
    from_u8(&to_u8(values))
}

fn render_gt(gaussians: &[NeuralGaussian], cam: &Camera) -> RenderOutput {
    let opts = RenderOptions {
        parallel: false,
        ..RenderOptions::default()
    };
    render_with(gaussians, cam, &opts).0
}

/// Affine-corrupted depth; pixels with little coverage are marked invalid.
fn mono_depth(render: &RenderOutput, w: f64, q: f64) -> Vec<f64> {
    render
        .depth
        .iter()
        .zip(&render.alpha)
        .map(|(&d, &a)| if a > 0.5 { (w * d + q) as f32 as f64 } else { f64::NAN })
        .collect()
}

pub fn synth_scene(config: &SynthConfig, seed: u64) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(config.spacing);
    let obj = object(&mut rng);
    let scene_b: Vec<NeuralGaussian> = bg.iter().chain(&obj).copied().collect();

    let n = config.train_views;
    let train_angles: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.0 } else { -ORBIT_HALF_ANGLE + 2.0 * ORBIT_HALF_ANGLE * i as f64 / (n - 1) as f64 })
        .collect();
    let test_angles: Vec<f64> = (0..config.test_views)
        .map(|i| -ORBIT_HALF_ANGLE + 2.0 * ORBIT_HALF_ANGLE * (i as f64 + 0.5) / config.test_views as f64)
        .collect();
    let reference = (n / 2) as u32;

    let mut cameras = Vec::new();
    let mut views = Vec::new();
    let mut affine = Vec::new();
    for (i, &ang) in train_angles.iter().enumerate() {
        let cam = orbit_camera(i as u32, ang, config);
        let with_object = render_gt(&scene_b, &cam);
        let without = render_gt(&bg, &cam);
        let silhouette = render_gt(&obj, &cam);
        let is_reference = cam.id == reference;
        let w = rng.random_range(0.5..2.0);
        let q = rng.random_range(-0.2..0.2);
        let depth_source = if is_reference { &without } else { &with_object };
        affine.push((cam.id, w, q));
        views.push(TrainingView {
            camera_id: cam.id,
            image: quantize_rgb(&with_object.color),
            mask: silhouette.alpha.iter().map(|&a| a > 0.0).collect(),
            mono_depth: mono_depth(depth_source, w, q),
            is_reference,
            inpainted_image: is_reference.then(|| quantize_rgb(&without.color)),
        });
        cameras.push(cam);
    }
    let mut test_views = Vec::new();
    for (i, &ang) in test_angles.iter().enumerate() {
        let cam = orbit_camera((n + i) as u32, ang, config);
        test_views.push(TestView {
            camera_id: cam.id,
            image: quantize_rgb(&render_gt(&bg, &cam).color),
            mask: Some(render_gt(&obj, &cam).alpha.iter().map(|&a| a > 0.0).collect()),
        });
        cameras.push(cam);
    }

    // Sparse initialization points, as a reconstruction of the captured scene would give.
    let mut init_points = Vec::new();
    for g in bg.iter().step_by(3).chain(obj.iter().step_by(2)) {
        let jitter = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2) * config.spacing);
        init_points.push(ScenePoint {
            position: g.mean3d + jitter,
            color: Some([0, 1, 2].map(|c| (g.color[c] * 255.0).round() as u8)),
        });
    }

    SynthScene {
        dataset: SceneDataset {
            cameras,
            views,
            test_views,
            init_points,
            reference_view_id: reference,
        },
        truth: SynthTruth {
            seed,
            config: *config,
            depth_affine: affine,
            background_gaussians: bg.len(),
            object_gaussians: obj.len(),
        },
        background: bg,
        object: obj,
    }
}
