//! Cross-attention feature regularization between anchors inside the object
//! mask and anchors around it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, NEAR_PLANE};
use crate::scene::Scene;

/// Fraction of the mask bounding box added on every side to form the patch.
pub const PATCH_DILATION: f64 = 0.25;
pub const DEFAULT_MAX_GROUP: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    pub enabled: bool,
    /// Steps before the first regularized render.
    pub warmup_steps: usize,
    /// Upper bound on each anchor group.
    pub max_group: usize,
    /// Regularize every masked view instead of the reference view only.
    pub all_views: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            enabled: true,
            warmup_steps: 3000,
            max_group: DEFAULT_MAX_GROUP,
            all_views: false,
        }
    }
}

impl RegularizerConfig {
    pub fn active(&self, step: usize, is_reference: bool) -> bool {
        self.enabled && step >= self.warmup_steps && (is_reference || self.all_views)
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Tight bounding box of the set pixels, `None` for an empty mask.
pub fn mask_bounds(mask: &[bool], width: usize, height: usize) -> Option<PixelRect> {
    assert_eq!(mask.len(), width * height);
    let mut r: Option<PixelRect> = None;
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            r = Some(match r {
                None => PixelRect { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                Some(b) => PixelRect {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
    }
    r
}

/// Mask bounding box grown by a quarter of its size per side, clipped to the image.
pub fn patch_rect(mask: &[bool], width: usize, height: usize) -> Option<PixelRect> {
    let b = mask_bounds(mask, width, height)?;
    let dx = (PATCH_DILATION * b.width() as f64).ceil() as usize;
    let dy = (PATCH_DILATION * b.height() as f64).ceil() as usize;
    Some(PixelRect {
        x0: b.x0.saturating_sub(dx),
        y0: b.y0.saturating_sub(dy),
        x1: (b.x1 + dx).min(width),
        y1: (b.y1 + dy).min(height),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Disabled,
    EmptyMask,
    NoInsideAnchors,
    NoOutsideAnchors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub patch: PixelRect,
    /// Ascending anchor indices.
    pub inside_anchors: Vec<usize>,
    pub outside_anchors: Vec<usize>,
}

/// Pixel hit by an anchor's center, if it is in front of the camera and on the image.
pub fn anchor_pixel(scene: &Scene, i: usize, cam: &Camera) -> Option<(usize, usize)> {
    let pc = cam.to_camera(&scene.anchors.position(i));
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let uv = cam.project_camera_point(&pc);
    if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x < cam.width as f64 && uv.y < cam.height as f64) {
        return None;
    }
    Some((uv.x.floor() as usize, uv.y.floor() as usize))
}

/// Projects anchor centers into the view and splits those that land in the
/// patch by the mask value under them. Each group is subsampled to at most
/// `max_group` anchors.
pub fn sample_patch<R: Rng + ?Sized>(
    scene: &Scene,
    cam: &Camera,
    mask: &[bool],
    max_group: usize,
    rng: &mut R,
) -> std::result::Result<PatchSample, SkipReason> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let patch = patch_rect(mask, w, h).ok_or(SkipReason::EmptyMask)?;
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for i in 0..scene.anchor_count() {
        let Some((x, y)) = anchor_pixel(scene, i, cam) else { continue };
        if !patch.contains(x, y) {
            continue;
        }
        if mask[y * w + x] {
            inside.push(i)
        } else {
            outside.push(i)
        }
    }
    if inside.is_empty() {
        return Err(SkipReason::NoInsideAnchors);
    }
    if outside.is_empty() {
        return Err(SkipReason::NoOutsideAnchors);
    }
    Ok(PatchSample {
        patch,
        inside_anchors: subsample(inside, max_group, rng),
        outside_anchors: subsample(outside, max_group, rng),
    })
}

fn subsample<R: Rng + ?Sized>(items: Vec<usize>, max: usize, rng: &mut R) -> Vec<usize> {
    if items.len() <= max {
        return items;
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, items.len(), max).into_iter().map(|i| items[i]).collect();
    picked.sort_unstable();
    picked
}

/// Shared single-head projections, each `d×d` row-major, applied as `X·W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub dim: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl AttentionParams {
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
        AttentionParams {
            dim,
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
        }
    }

    pub fn zero_grad(&self) -> AttentionGrad {
        AttentionGrad {
            w_q: vec![0.0; self.dim * self.dim],
            w_k: vec![0.0; self.dim * self.dim],
            w_v: vec![0.0; self.dim * self.dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d2 = self.dim * self.dim;
        if self.w_q.len() != d2 || self.w_k.len() != d2 || self.w_v.len() != d2 {
            return Err(Error::DimensionMismatch(format!("attention matrices must be {0}x{0}", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl AttentionGrad {
    pub fn add_assign(&mut self, other: &AttentionGrad) {
        for (a, b) in [(&mut self.w_q, &other.w_q), (&mut self.w_k, &other.w_k), (&mut self.w_v, &other.w_v)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// `(n×d)·(d×d)`.
fn project(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for a in 0..d {
            let xa = x[r * d + a];
            if xa == 0.0 {
                continue;
            }
            for j in 0..d {
                out[r * d + j] += xa * w[a * d + j];
            }
        }
    }
    out
}

struct OneWay {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    out: Vec<f64>,
}

fn one_way(queries: &[f64], context: &[f64], p: &AttentionParams) -> OneWay {
    let d = p.dim;
    let (n, m) = (queries.len() / d, context.len() / d);
    let q = project(queries, &p.w_q, d);
    let k = project(context, &p.w_k, d);
    let v = project(context, &p.w_v, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; n * m];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &mut probs[i * m..(i + 1) * m];
        for (j, s) in row.iter_mut().enumerate() {
            *s = scale * (0..d).map(|a| q[i * d + a] * k[j * d + a]).sum::<f64>();
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|s| *s = (*s - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|s| *s /= z);
        for (j, &pj) in row.iter().enumerate() {
            for a in 0..d {
                out[i * d + a] += pj * v[j * d + a];
            }
        }
    }
    OneWay { q, k, v, probs, out }
}

/// Accumulates gradients of one attention pass into the query/context inputs and the weights.
#[allow(clippy::too_many_arguments)]
fn one_way_backward(
    queries: &[f64],
    context: &[f64],
    p: &AttentionParams,
    fwd: &OneWay,
    d_out: &[f64],
    d_queries: &mut [f64],
    d_context: &mut [f64],
    grad: &mut AttentionGrad,
) {
    let d = p.dim;
    let (n, m) = (queries.len() / d, context.len() / d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_q = vec![0.0; n * d];
    let mut d_k = vec![0.0; m * d];
    let mut d_v = vec![0.0; m * d];
    for i in 0..n {
        let pr = &fwd.probs[i * m..(i + 1) * m];
        let go = &d_out[i * d..(i + 1) * d];
        let d_p: Vec<f64> = (0..m).map(|j| (0..d).map(|a| go[a] * fwd.v[j * d + a]).sum()).collect();
        let dot: f64 = pr.iter().zip(&d_p).map(|(a, b)| a * b).sum();
        for j in 0..m {
            for a in 0..d {
                d_v[j * d + a] += pr[j] * go[a];
            }
            let ds = pr[j] * (d_p[j] - dot) * scale;
            for a in 0..d {
                d_q[i * d + a] += ds * fwd.k[j * d + a];
                d_k[j * d + a] += ds * fwd.q[i * d + a];
            }
        }
    }
    // Y = X·W gives dW += Xᵀ·dY and dX += dY·Wᵀ.
    let back = |x: &[f64], dy: &[f64], w: &[f64], dw: &mut [f64], dx: &mut [f64]| {
        let rows = x.len() / d;
        for r in 0..rows {
            for a in 0..d {
                let xa = x[r * d + a];
                let mut acc = 0.0;
                for j in 0..d {
                    let g = dy[r * d + j];
                    dw[a * d + j] += xa * g;
                    acc += g * w[a * d + j];
                }
                dx[r * d + a] += acc;
            }
        }
    };
    back(queries, &d_q, &p.w_q, &mut grad.w_q, d_queries);
    back(context, &d_k, &p.w_k, &mut grad.w_k, d_context);
    back(context, &d_v, &p.w_v, &mut grad.w_v, d_context);
}

/// Row-major `n_queries × n_context` softmax weights of one attention direction.
pub fn attention_weights(queries: &[f64], context: &[f64], params: &AttentionParams) -> Result<Vec<f64>> {
    check_shapes(queries, context, params)?;
    Ok(one_way(queries, context, params).probs)
}

/// `f̂_in = softmax((f_in W_Q)(f_sur W_K)ᵀ/√d)(f_sur W_V)` and the same with the
/// roles swapped. Inputs are row-major `n×d`.
pub fn bidirectional_cross_attention(f_in: &[f64], f_sur: &[f64], params: &AttentionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(f_in, f_sur, params)?;
    Ok((one_way(f_in, f_sur, params).out, one_way(f_sur, f_in, params).out))
}

fn check_shapes(f_in: &[f64], f_sur: &[f64], params: &AttentionParams) -> Result<()> {
    params.validate()?;
    let d = params.dim;
    if d == 0 || !f_in.len().is_multiple_of(d) || !f_sur.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch(format!("token rows must have {d} features")));
    }
    if f_in.is_empty() || f_sur.is_empty() {
        return Err(Error::DimensionMismatch("both token sets must be non-empty".into()));
    }
    Ok(())
}

/// Gradients of both attention outputs with respect to `(f_in, f_sur)` and the weights.
pub fn bidirectional_cross_attention_backward(
    f_in: &[f64],
    f_sur: &[f64],
    params: &AttentionParams,
    d_in_out: &[f64],
    d_sur_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, AttentionGrad)> {
    check_shapes(f_in, f_sur, params)?;
    let mut grad = params.zero_grad();
    let mut d_in = vec![0.0; f_in.len()];
    let mut d_sur = vec![0.0; f_sur.len()];
    let a = one_way(f_in, f_sur, params);
    one_way_backward(f_in, f_sur, params, &a, d_in_out, &mut d_in, &mut d_sur, &mut grad);
    let b = one_way(f_sur, f_in, params);
    one_way_backward(f_sur, f_in, params, &b, d_sur_out, &mut d_sur, &mut d_in, &mut grad);
    Ok((d_in, d_sur, grad))
}

/// Render-scoped copy of the anchor features with the sampled rows replaced by
/// their attention outputs. The scene itself is never modified.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOverlay {
    pub sample: PatchSample,
    pub features: Vec<f64>,
}

fn gather(features: &[f64], rows: &[usize], d: usize) -> Vec<f64> {
    rows.iter().flat_map(|&r| features[r * d..(r + 1) * d].iter().copied()).collect()
}

impl FeatureOverlay {
    pub fn build(scene: &Scene, sample: PatchSample, params: &AttentionParams) -> Result<Self> {
        let d = scene.anchors.feature_dim;
        if params.dim != d {
            return Err(Error::DimensionMismatch(format!("attention dimension {} does not match feature dimension {d}", params.dim)));
        }
        let base = &scene.anchors.features;
        let f_in = gather(base, &sample.inside_anchors, d);
        let f_sur = gather(base, &sample.outside_anchors, d);
        let (o_in, o_sur) = bidirectional_cross_attention(&f_in, &f_sur, params)?;
        let mut features = base.clone();
        for (rows, out) in [(&sample.inside_anchors, &o_in), (&sample.outside_anchors, &o_sur)] {
            for (t, &r) in rows.iter().enumerate() {
                features[r * d..(r + 1) * d].copy_from_slice(&out[t * d..(t + 1) * d]);
            }
        }
        Ok(FeatureOverlay { sample, features })
    }

    /// Maps gradients with respect to the overlay features back to the stored
    /// anchor features and the attention weights.
    pub fn backward(&self, scene: &Scene, params: &AttentionParams, d_features: &[f64]) -> Result<(Vec<f64>, AttentionGrad)> {
        let d = scene.anchors.feature_dim;
        let base = &scene.anchors.features;
        let (ins, outs) = (&self.sample.inside_anchors, &self.sample.outside_anchors);
        let f_in = gather(base, ins, d);
        let f_sur = gather(base, outs, d);
        let g_in = gather(d_features, ins, d);
        let g_sur = gather(d_features, outs, d);
        let (d_in, d_sur, grad) = bidirectional_cross_attention_backward(&f_in, &f_sur, params, &g_in, &g_sur)?;
        let mut d_base = d_features.to_vec();
        for (rows, g) in [(ins, &d_in), (outs, &d_sur)] {
            for (t, &r) in rows.iter().enumerate() {
                d_base[r * d..(r + 1) * d].copy_from_slice(&g[t * d..(t + 1) * d]);
            }
        }
        Ok((d_base, grad))
    }
}

/// Per-step regularizer record for the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerDiagnostics {
    pub regularized: bool,
    pub inside: usize,
    pub outside: usize,
    pub skip: Option<SkipReason>,
}

impl RegularizerDiagnostics {
    pub fn skipped(reason: SkipReason) -> Self {
        RegularizerDiagnostics {
            regularized: false,
            inside: 0,
            outside: 0,
            skip: Some(reason),
        }
    }
}

/// Builds the feature overlay for one view, or reports why regularization was skipped.
pub fn prepare_overlay<R: Rng + ?Sized>(
    scene: &Scene,
    cam: &Camera,
    mask: &[bool],
    params: &AttentionParams,
    max_group: usize,
    rng: &mut R,
) -> Result<(Option<FeatureOverlay>, RegularizerDiagnostics)> {
    match sample_patch(scene, cam, mask, max_group, rng) {
        Err(reason) => Ok((None, RegularizerDiagnostics::skipped(reason))),
        Ok(sample) => {
            let diag = RegularizerDiagnostics {
                regularized: true,
                inside: sample.inside_anchors.len(),
                outside: sample.outside_anchors.len(),
                skip: None,
            };
            Ok((Some(FeatureOverlay::build(scene, sample, params)?), diag))
        }
    }
}
