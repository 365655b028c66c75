use nalgebra::{Vector2, Vector3, Vector4};
use rand::Rng;

use super::mlp::{Mlp, MlpGrad};
use super::{NeuralGaussian, Scene};
use crate::geometry::{normalize_quaternion, normalize_quaternion_backward, Camera, GaussianShape, NEAR_PLANE};

/// Shared decoders mapping `[feature, view direction, 1/distance]` to the
/// attributes of an anchor's `k` Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBank {
    pub opacity: Mlp,
    pub color: Mlp,
    pub shape: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrad {
    pub opacity: MlpGrad,
    pub color: MlpGrad,
    pub shape: MlpGrad,
}

impl DecoderBank {
    pub fn random<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        let inputs = feature_dim + 4;
        DecoderBank {
            opacity: Mlp::random(inputs, hidden, k, rng),
            color: Mlp::random(inputs, hidden, 3 * k, rng),
            shape: Mlp::random(inputs, hidden, 7 * k, rng),
        }
    }

    pub fn zeros(feature_dim: usize, hidden: usize, k: usize) -> Self {
        let inputs = feature_dim + 4;
        DecoderBank {
            opacity: Mlp::zeros(inputs, hidden, k),
            color: Mlp::zeros(inputs, hidden, 3 * k),
            shape: Mlp::zeros(inputs, hidden, 7 * k),
        }
    }

    pub fn zero_grad(&self) -> DecoderGrad {
        DecoderGrad {
            opacity: self.opacity.zero_grad(),
            color: self.color.zero_grad(),
            shape: self.shape.zero_grad(),
        }
    }
}

impl DecoderGrad {
    pub fn add_assign(&mut self, other: &DecoderGrad) {
        self.opacity.add_assign(&other.opacity);
        self.color.add_assign(&other.color);
        self.shape.add_assign(&other.shape);
    }
}

/// Gradient of a scalar loss with respect to one decoded Gaussian.
/// `rotation` is taken with respect to the stored (unit) quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad {
    pub mean3d: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    /// Screen-space mean gradient, kept for densification statistics.
    pub mean2d: Vector2<f64>,
}

impl Default for GaussianGrad {
    fn default() -> Self {
        GaussianGrad {
            mean3d: Vector3::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: Vector4::zeros(),
            mean2d: Vector2::zeros(),
        }
    }
}

#[derive(Debug, Clone)]
struct AnchorCache {
    anchor: usize,
    input: Vec<f64>,
    view: Vector3<f64>,
    hidden_opacity: Vec<f64>,
    hidden_color: Vec<f64>,
    hidden_shape: Vec<f64>,
    raw_quaternions: Vec<Vector4<f64>>,
}

/// Decoded Gaussians for one camera, plus what the backward pass needs.
/// Gaussians are stored anchor-major: `k` consecutive entries per visible anchor.
#[derive(Debug, Clone)]
pub struct DecodedScene {
    pub gaussians: Vec<NeuralGaussian>,
    pub visible_anchors: Vec<usize>,
    caches: Vec<AnchorCache>,
}

/// Fraction of the image size by which the anchor culling window extends past each edge.
pub const ANCHOR_GUARD_BAND: f64 = 0.5;

/// Whether an anchor center lies in front of the camera and projects into the widened image window.
pub fn anchor_in_view(cam: &Camera, pos: &Vector3<f64>) -> bool {
    let pc = cam.to_camera(pos);
    if pc.z <= NEAR_PLANE {
        return false;
    }
    let uv = cam.project_camera_point(&pc);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let band = ANCHOR_GUARD_BAND;
    uv.x >= -band * w && uv.x <= (1.0 + band) * w && uv.y >= -band * h && uv.y <= (1.0 + band) * h
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_anchors(scene: &Scene, cam: &Camera) -> DecodedScene {
    decode_anchors_with_features(scene, cam, &scene.anchors.features)
}

/// Decodes using `features` (`n·d`) in place of the stored anchor features.
pub fn decode_anchors_with_features(scene: &Scene, cam: &Camera, features: &[f64]) -> DecodedScene {
    let anchors = &scene.anchors;
    let d = anchors.feature_dim;
    let k = anchors.offsets_per_anchor;
    assert_eq!(features.len(), anchors.features.len(), "feature buffer size mismatch");
    let center = cam.center();
    let dec = &scene.decoders;

    let mut gaussians = Vec::new();
    let mut caches = Vec::new();
    let mut visible_anchors = Vec::new();
    let mut o_out = vec![0.0; k];
    let mut c_out = vec![0.0; 3 * k];
    let mut s_out = vec![0.0; 7 * k];

    for i in 0..anchors.len() {
        let pos = anchors.position(i);
        if !anchor_in_view(cam, &pos) {
            continue;
        }
        let view = center - pos;
        let dist = view.norm();
        let dir = view / dist;
        let mut input = Vec::with_capacity(d + 4);
        input.extend_from_slice(&features[i * d..(i + 1) * d]);
        input.extend(dir.iter());
        input.push(1.0 / dist);

        let mut hidden_opacity = vec![0.0; dec.opacity.hidden];
        let mut hidden_color = vec![0.0; dec.color.hidden];
        let mut hidden_shape = vec![0.0; dec.shape.hidden];
        dec.opacity.forward(&input, &mut hidden_opacity, &mut o_out);
        dec.color.forward(&input, &mut hidden_color, &mut c_out);
        dec.shape.forward(&input, &mut hidden_shape, &mut s_out);

        let offset_scale = anchors.offset_scale(i);
        let stretch = offset_scale.map(f64::exp);
        let mut raw_quaternions = Vec::with_capacity(k);
        for j in 0..k {
            let s = &s_out[7 * j..7 * j + 7];
            let raw_q = Vector4::new(s[3] + 1.0, s[4], s[5], s[6]);
            raw_quaternions.push(raw_q);
            gaussians.push(NeuralGaussian {
                mean3d: pos + anchors.offset(i, j).component_mul(&stretch),
                opacity: sigmoid(o_out[j]),
                shape: GaussianShape::new(Vector3::new(s[0], s[1], s[2]) + offset_scale, normalize_quaternion(&raw_q)),
                color: Vector3::new(sigmoid(c_out[3 * j]), sigmoid(c_out[3 * j + 1]), sigmoid(c_out[3 * j + 2])),
                parent_anchor: i,
            });
        }
        visible_anchors.push(i);
        caches.push(AnchorCache {
            anchor: i,
            input,
            view,
            hidden_opacity,
            hidden_color,
            hidden_shape,
            raw_quaternions,
        });
    }

    DecodedScene {
        gaussians,
        visible_anchors,
        caches,
    }
}

/// Gradients for every learnable tensor of a [`Scene`], laid out like [`super::Anchors`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub positions: Vec<f64>,
    pub features: Vec<f64>,
    pub offset_scales: Vec<f64>,
    pub offsets: Vec<f64>,
    pub decoders: DecoderGrad,
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        let a = &scene.anchors;
        SceneGrad {
            positions: vec![0.0; a.positions.len()],
            features: vec![0.0; a.features.len()],
            offset_scales: vec![0.0; a.offset_scales.len()],
            offsets: vec![0.0; a.offsets.len()],
            decoders: scene.decoders.zero_grad(),
        }
    }
}

impl DecodedScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Chains per-Gaussian gradients back to the scene parameters. Feature
    /// gradients are with respect to whatever feature buffer was decoded.
    pub fn backward(&self, scene: &Scene, grads: &[GaussianGrad]) -> SceneGrad {
        assert_eq!(grads.len(), self.gaussians.len());
        let anchors = &scene.anchors;
        let d = anchors.feature_dim;
        let k = anchors.offsets_per_anchor;
        let dec = &scene.decoders;
        let mut out = SceneGrad::zeros(scene);

        let mut d_o = vec![0.0; k];
        let mut d_c = vec![0.0; 3 * k];
        let mut d_s = vec![0.0; 7 * k];
        let mut d_input = vec![0.0; d + 4];

        for (c, cache) in self.caches.iter().enumerate() {
            let i = cache.anchor;
            let offset_scale = anchors.offset_scale(i);
            let stretch = offset_scale.map(f64::exp);
            let mut d_pos = Vector3::zeros();
            let mut d_offset_scale = Vector3::zeros();

            for j in 0..k {
                let g = &grads[c * k + j];
                let gauss = &self.gaussians[c * k + j];
                d_o[j] = g.opacity * gauss.opacity * (1.0 - gauss.opacity);
                for ch in 0..3 {
                    d_c[3 * j + ch] = g.color[ch] * gauss.color[ch] * (1.0 - gauss.color[ch]);
                }
                let d_raw_q = normalize_quaternion_backward(&cache.raw_quaternions[j], &g.rotation);
                d_s[7 * j..7 * j + 3].copy_from_slice(g.log_scale.as_slice());
                d_s[7 * j + 3..7 * j + 7].copy_from_slice(d_raw_q.as_slice());
                d_offset_scale += g.log_scale;

                d_pos += g.mean3d;
                let offset = anchors.offset(i, j);
                let d_offset = g.mean3d.component_mul(&stretch);
                let base = 3 * (i * k + j);
                for a in 0..3 {
                    out.offsets[base + a] += d_offset[a];
                }
                d_offset_scale += g.mean3d.component_mul(&offset).component_mul(&stretch);
            }

            d_input.iter_mut().for_each(|v| *v = 0.0);
            dec.opacity
                .backward(&cache.input, &cache.hidden_opacity, &d_o, &mut out.decoders.opacity, &mut d_input);
            dec.color
                .backward(&cache.input, &cache.hidden_color, &d_c, &mut out.decoders.color, &mut d_input);
            dec.shape
                .backward(&cache.input, &cache.hidden_shape, &d_s, &mut out.decoders.shape, &mut d_input);

            for a in 0..d {
                out.features[i * d + a] += d_input[a];
            }
            // view = center - position; dir = view/|view|; inv = 1/|view|
            let dist = cache.view.norm();
            let dir = cache.view / dist;
            let d_dir = Vector3::new(d_input[d], d_input[d + 1], d_input[d + 2]);
            let d_inv = d_input[d + 3];
            let d_view = (d_dir - dir * dir.dot(&d_dir)) / dist - dir * (d_inv / (dist * dist));
            d_pos -= d_view;

            for a in 0..3 {
                out.positions[3 * i + a] += d_pos[a];
                out.offset_scales[3 * i + a] += d_offset_scale[a];
            }
        }
        out
    }
}
