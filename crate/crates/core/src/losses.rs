//! Training objective: online scale/shift alignment of rendered depth against a
//! monocular prior, mask-weighted depth L1 and total variation, and masked
//! color reconstruction with a structural term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splatter::RenderOutput;
use crate::ssim::{ssim_map, ssim_map_backward};

/// Rendered pixels with accumulated alpha at or below this are treated as empty background.
pub const ALIGN_ALPHA_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Reference view, inside the mask.
    pub lambda1: f64,
    /// Reference view, outside the mask.
    pub lambda2: f64,
    /// Other views, outside the mask.
    pub lambda3: f64,
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda_ssim: 0.2,
            lambda_depth: 0.5,
            lambda_tv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_depth", self.lambda_depth),
            ("lambda_tv", self.lambda_tv),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::InvalidConfig(format!("lambda_ssim must be at most 1, got {}", self.lambda_ssim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub w: f64,
    pub q: f64,
    pub valid_pixel_count: usize,
    pub degenerate: bool,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        AlignmentResult {
            w: 1.0,
            q: 0.0,
            valid_pixel_count: 0,
            degenerate: true,
        }
    }

    pub fn apply(&self, rendered: f64) -> f64 {
        self.w * rendered + self.q
    }
}

/// Pixels where the depth terms are defined: finite prior and any rendered coverage.
pub fn depth_validity(alpha: &[f64], mono: &[f64]) -> Vec<bool> {
    alpha.iter().zip(mono).map(|(&a, &d)| a > 0.0 && d.is_finite()).collect()
}

/// Pixels used to fit the alignment. Object pixels are excluded except on the reference view.
pub fn alignment_selection(alpha: &[f64], mono: &[f64], mask: &[bool], is_reference: bool) -> Vec<bool> {
    alpha
        .iter()
        .zip(mono)
        .zip(mask)
        .map(|((&a, &d), &m)| a > ALIGN_ALPHA_MIN && d.is_finite() && (is_reference || !m))
        .collect()
}

/// Least-squares `(w, q)` minimizing `Σ (w·rendered + q − mono)²` over the selection.
pub fn align_depth(rendered: &[f64], mono: &[f64], selection: &[bool]) -> AlignmentResult {
    assert_eq!(rendered.len(), mono.len());
    assert_eq!(rendered.len(), selection.len());
    let picked = || {
        rendered
            .iter()
            .zip(mono)
            .zip(selection)
            .filter(|(_, &s)| s)
            .map(|((&r, &d), _)| (r, d))
    };
    let n = picked().count();
    if n == 0 {
        return AlignmentResult::identity();
    }
    let nf = n as f64;
    let (sr, sd) = picked().fold((0.0, 0.0), |(a, b), (r, d)| (a + r, b + d));
    let (mr, md) = (sr / nf, sd / nf);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (r, d) in picked() {
        sxx += (r - mr) * (r - mr);
        sxy += (r - mr) * (d - md);
    }
    // The normal-matrix determinant is n·sxx.
    if n < 2 || nf * sxx < 1e-12 * nf {
        return AlignmentResult {
            w: 1.0,
            q: md - mr,
            valid_pixel_count: n,
            degenerate: true,
        };
    }
    let w = sxy / sxx;
    AlignmentResult {
        w,
        q: md - w * mr,
        valid_pixel_count: n,
        degenerate: false,
    }
}

/// Per-pixel loss weight: `λ1·M + λ2·(1−M)` on the reference view, `λ3·(1−M)` elsewhere.
pub fn mask_weight(is_reference: bool, mask: &[bool], weights: &LossWeights) -> Vec<f64> {
    mask.iter()
        .map(|&m| match (is_reference, m) {
            (true, true) => weights.lambda1,
            (true, false) => weights.lambda2,
            (false, true) => 0.0,
            (false, false) => weights.lambda3,
        })
        .collect()
}

/// A scalar loss and its gradient with respect to the rendered buffer it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `(1/HW)·Σ M′·|w·D̂+q − D|` over valid pixels.
pub fn depth_l1_loss(rendered: &[f64], mono: &[f64], valid: &[bool], alignment: &AlignmentResult, weight: &[f64]) -> ScalarGrad {
    let n = rendered.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for p in 0..n {
        if !valid[p] || weight[p] == 0.0 {
            continue;
        }
        let r = alignment.apply(rendered[p]) - mono[p];
        value += weight[p] * r.abs();
        grad[p] = weight[p] * sign(r) * alignment.w / n as f64;
    }
    ScalarGrad { value: value / n as f64, grad }
}

/// Weighted mean of `|∂x e| + |∂y e|` of the aligned residual `e`, using forward
/// differences. A term exists at pixel `p` when `p` and both forward neighbours
/// are valid and carry non-zero weight; the mean is over those terms.
pub fn depth_tv_loss(
    rendered: &[f64],
    mono: &[f64],
    valid: &[bool],
    alignment: &AlignmentResult,
    weight: &[f64],
    width: usize,
    height: usize,
) -> ScalarGrad {
    let n = width * height;
    assert_eq!(rendered.len(), n);
    let usable = |p: usize| valid[p] && weight[p] != 0.0;
    let residual = |p: usize| alignment.apply(rendered[p]) - mono[p];
    let mut terms = 0usize;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for y in 0..height.saturating_sub(1) {
        for x in 0..width.saturating_sub(1) {
            let p = y * width + x;
            let (right, down) = (p + 1, p + width);
            if !(usable(p) && usable(right) && usable(down)) {
                continue;
            }
            terms += 1;
            let e = residual(p);
            let dx = residual(right) - e;
            let dy = residual(down) - e;
            value += weight[p] * (dx.abs() + dy.abs());
            let (sx, sy) = (weight[p] * sign(dx) * alignment.w, weight[p] * sign(dy) * alignment.w);
            grad[right] += sx;
            grad[down] += sy;
            grad[p] -= sx + sy;
        }
    }
    if terms == 0 {
        return ScalarGrad { value: 0.0, grad };
    }
    let inv = 1.0 / terms as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    ScalarGrad { value: value * inv, grad }
}

/// `(1/HW)·Σ M′·((1−λ)·mean_c|Ĉ−I| + λ·(1 − SSIM(Ĉ,I)))`.
///
/// The structural map is computed on images whose zero-weight pixels are blanked
/// in both inputs, so values under a zero weight never reach the loss.
pub fn color_loss(rendered: &[f64], target: &[f64], weight: &[f64], lambda_ssim: f64, width: usize, height: usize) -> ScalarGrad {
    let n = width * height;
    assert_eq!(rendered.len(), 3 * n);
    assert_eq!(target.len(), 3 * n);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; 3 * n];
    for p in 0..n {
        if weight[p] == 0.0 {
            continue;
        }
        let scale = weight[p] * (1.0 - lambda_ssim) / 3.0;
        for c in 0..3 {
            let d = rendered[3 * p + c] - target[3 * p + c];
            value += scale * d.abs();
            grad[3 * p + c] = scale * sign(d) * inv_n;
        }
    }
    if lambda_ssim > 0.0 {
        let blank = |img: &[f64]| -> Vec<f64> {
            img.iter().enumerate().map(|(i, &v)| if weight[i / 3] == 0.0 { 0.0 } else { v }).collect()
        };
        let (x, y) = (blank(rendered), blank(target));
        let map = ssim_map(&x, &y, width, height, 3);
        let mut d_map = vec![0.0; n];
        for p in 0..n {
            if weight[p] == 0.0 {
                continue;
            }
            value += weight[p] * lambda_ssim * (1.0 - map[p]);
            d_map[p] = -weight[p] * lambda_ssim * inv_n;
        }
        let g = ssim_map_backward(&x, &y, width, height, 3, &d_map);
        for (i, gi) in g.into_iter().enumerate() {
            if weight[i / 3] != 0.0 {
                grad[i] += gi;
            }
        }
    }
    ScalarGrad { value: value * inv_n, grad }
}

/// Per-step loss record, one line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub view_id: u32,
    #[serde(rename = "L_color")]
    pub l_color: f64,
    #[serde(rename = "L_depth")]
    pub l_depth: f64,
    #[serde(rename = "L_tv")]
    pub l_tv: f64,
    pub total: f64,
    pub w: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub color: f64,
    pub depth: f64,
    pub tv: f64,
    pub alignment: AlignmentResult,
}

/// `λ_depth·L_depth + λ_tv·L_tv + L_color`.
pub fn total_loss(components: &LossComponents, weights: &LossWeights, view_id: u32) -> Result<LossReport> {
    for (term, v) in [("L_color", components.color), ("L_depth", components.depth), ("L_tv", components.tv)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, view: view_id });
        }
    }
    let total = weights.lambda_depth * components.depth + weights.lambda_tv * components.tv + components.color;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total", view: view_id });
    }
    Ok(LossReport {
        view_id,
        l_color: components.color,
        l_depth: components.depth,
        l_tv: components.tv,
        total,
        w: components.alignment.w,
        q: components.alignment.q,
    })
}

/// Supervision of one view, borrowed from the dataset.
#[derive(Debug, Clone, Copy)]
pub struct ViewTargets<'a> {
    pub view_id: u32,
    pub is_reference: bool,
    /// `H·W·3`; the inpainted image on the reference view.
    pub target: &'a [f64],
    pub mono_depth: &'a [f64],
    pub mask: &'a [bool],
}

/// Loss value and the gradients of the total with respect to the rendered color and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObjective {
    pub report: LossReport,
    pub alignment: AlignmentResult,
    pub d_color: Vec<f64>,
    pub d_depth: Vec<f64>,
}

/// Evaluates the full objective on one rendered view. `alignment` overrides the
/// per-step fit, which is otherwise computed from the render.
pub fn evaluate_view(render: &RenderOutput, view: &ViewTargets<'_>, weights: &LossWeights, alignment: Option<AlignmentResult>) -> Result<ViewObjective> {
    let (w, h) = (render.width, render.height);
    let n = w * h;
    if view.target.len() != 3 * n || view.mono_depth.len() != n || view.mask.len() != n {
        return Err(Error::DimensionMismatch(format!("view {} supervision does not match a {w}x{h} render", view.view_id)));
    }
    let alignment = alignment.unwrap_or_else(|| {
        let sel = alignment_selection(&render.alpha, view.mono_depth, view.mask, view.is_reference);
        align_depth(&render.depth, view.mono_depth, &sel)
    });
    let weight = mask_weight(view.is_reference, view.mask, weights);
    let valid = depth_validity(&render.alpha, view.mono_depth);
    let color = color_loss(&render.color, view.target, &weight, weights.lambda_ssim, w, h);
    let depth = depth_l1_loss(&render.depth, view.mono_depth, &valid, &alignment, &weight);
    let tv = depth_tv_loss(&render.depth, view.mono_depth, &valid, &alignment, &weight, w, h);
    let report = total_loss(
        &LossComponents {
            color: color.value,
            depth: depth.value,
            tv: tv.value,
            alignment,
        },
        weights,
        view.view_id,
    )?;
    let d_depth = depth
        .grad
        .iter()
        .zip(&tv.grad)
        .map(|(a, b)| weights.lambda_depth * a + weights.lambda_tv * b)
        .collect();
    Ok(ViewObjective {
        report,
        alignment,
        d_color: color.grad,
        d_depth,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
