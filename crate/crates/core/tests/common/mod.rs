#![allow(dead_code)]

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splat_inpaint::geometry::{build_covariance, project_gaussian, Camera, GaussianShape};
use splat_inpaint::losses::{AlignmentResult, ViewTargets};
use splat_inpaint::regularizer::{sample_patch, AttentionParams, FeatureOverlay, PatchSample};
use splat_inpaint::scene::{Anchor, Anchors, DecoderBank, NeuralGaussian, Scene, SceneConfig};
use splat_inpaint::splatter::{ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN};
use splat_inpaint::trainer::{evaluate_gradients, Evaluation};

/// Three anchors in front of an 8×8 pinhole camera, with the first anchor
/// under the mask and the other two in the surrounding patch.
pub struct Fixture {
    pub scene: Scene,
    pub attention: AttentionParams,
    pub cam: Camera,
    pub image: Vec<f64>,
    pub mono: Vec<f64>,
    pub mask: Vec<bool>,
    pub sample: PatchSample,
    pub alignment: AlignmentResult,
}

pub fn camera8() -> Camera {
    Camera::new(0, 8, 8, 8.0, 8.0, 4.0, 4.0, Matrix4::identity()).unwrap()
}

/// Point at camera depth `z` whose projection is the center of pixel `(x, y)` of [`camera8`].
fn on_pixel(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new((x + 0.5 - 4.0) * z / 8.0, (y + 0.5 - 4.0) * z / 8.0, z)
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SceneConfig::default();
    let (d, k, h) = (config.feature_dim, config.offsets_per_anchor, config.hidden_width);
    let mut anchors = Anchors::new(d, k);
    for pos in [on_pixel(3.0, 3.0, 3.0), on_pixel(5.0, 3.0, 3.2), on_pixel(3.0, 5.0, 2.8)] {
        anchors.push(&Anchor {
            position: pos,
            feature: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            offset_scale: Vector3::from_fn(|_, _| 1.5f64.ln() + rng.random_range(-0.1..0.1)),
            offsets: (0..k).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect(),
        });
    }
    let mut decoders = DecoderBank::random(d, h, k, &mut rng);
    // Low opacities keep every pixel far from the transmittance cutoff.
    decoders.opacity.b2.iter_mut().for_each(|b| *b -= 1.5);
    let scene = Scene {
        config,
        voxel_size: 0.5,
        anchors,
        decoders,
    };

    let mut attention = AttentionParams::identity(d);
    for w in [&mut attention.w_q, &mut attention.w_k, &mut attention.w_v] {
        w.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }

    let cam = camera8();
    let mut mask = vec![false; 64];
    for y in 2..=4 {
        for x in 2..=4 {
            mask[y * 8 + x] = true;
        }
    }
    let sample = sample_patch(&scene, &cam, &mask, 1024, &mut rng).expect("fixture anchors straddle the mask");
    assert_eq!((sample.inside_anchors.clone(), sample.outside_anchors.clone()), (vec![0], vec![1, 2]));

    Fixture {
        image: (0..192).map(|_| rng.random_range(0.0..1.0)).collect(),
        mono: (0..64).map(|_| rng.random_range(1.0..7.0)).collect(),
        scene,
        attention,
        cam,
        mask,
        sample,
        alignment: AlignmentResult {
            w: 1.3,
            q: 0.1,
            valid_pixel_count: 64,
            degenerate: false,
        },
    }
}

impl Fixture {
    pub fn targets(&self, is_reference: bool) -> ViewTargets<'_> {
        ViewTargets {
            view_id: 0,
            is_reference,
            target: &self.image,
            mono_depth: &self.mono,
            mask: &self.mask,
        }
    }

    /// Full objective and gradients of `scene`/`attention` on the fixture view,
    /// with the fixture's fixed sample and alignment.
    pub fn evaluate(&self, scene: &Scene, attention: &AttentionParams, is_reference: bool, regularized: bool) -> Evaluation {
        let overlay = regularized.then(|| FeatureOverlay::build(scene, self.sample.clone(), attention).unwrap());
        evaluate_gradients(
            scene,
            attention,
            &self.cam,
            &self.targets(is_reference),
            &Default::default(),
            overlay.as_ref(),
            Some(self.alignment),
            &Default::default(),
        )
        .unwrap()
    }
}

/// Per-pixel reference compositor: every visible Gaussian, fully sorted by
/// depth for each pixel, with no tiling or bounds.
pub struct BruteForce {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn brute_force_render(gaussians: &[NeuralGaussian], cam: &Camera) -> BruteForce {
    struct P {
        index: usize,
        depth: f64,
        mean: (f64, f64),
        inv: [f64; 4],
        opacity: f64,
        color: Vector3<f64>,
    }
    let mut projected = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let p = project_gaussian(&g.mean3d, &build_covariance(&g.shape), cam);
        if !p.visible {
            continue;
        }
        let c = p.cov2d;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        if det == 0.0 {
            continue;
        }
        projected.push(P {
            index,
            depth: p.depth_cam,
            mean: (p.mean2d.x, p.mean2d.y),
            inv: [c[(1, 1)] / det, -c[(0, 1)] / det, -c[(1, 0)] / det, c[(0, 0)] / det],
            opacity: g.opacity,
            color: g.color,
        });
    }
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut out = BruteForce {
        color: vec![0.0; 3 * w * h],
        depth: vec![0.0; w * h],
        alpha: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let mut order: Vec<&P> = projected.iter().collect();
            order.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            let mut depth = 0.0;
            for p in order {
                let (dx, dy) = (px - p.mean.0, py - p.mean.1);
                let q = p.inv[0] * dx * dx + (p.inv[1] + p.inv[2]) * dx * dy + p.inv[3] * dy * dy;
                let alpha = (p.opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let next = t * (1.0 - alpha);
                if next < TRANSMITTANCE_MIN {
                    break;
                }
                color += p.color * (alpha * t);
                depth += p.depth * (alpha * t);
                t = next;
            }
            let i = y * w + x;
            out.color[3 * i..3 * i + 3].copy_from_slice(color.as_slice());
            out.depth[i] = depth;
            out.alpha[i] = 1.0 - t;
        }
    }
    out
}

/// Up to `n` Gaussians scattered in front of a camera looking down +z.
pub fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<NeuralGaussian> {
    (0..n)
        .map(|i| NeuralGaussian {
            mean3d: Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(1.0..5.0)),
            opacity: rng.random_range(0.02..1.0),
            shape: GaussianShape::new(
                Vector3::from_fn(|_, _| rng.random_range(-3.5..-1.0)),
                Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            ),
            color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            parent_anchor: i,
        })
        .collect()
}

pub fn camera32() -> Camera {
    Camera::new(0, 32, 32, 30.0, 30.0, 16.0, 16.0, Matrix4::identity()).unwrap()
}

/// Central-difference relative error, with gradients below `floor` compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
