//! Image quality metrics on `[0,1]` RGB images.

use serde::{Deserialize, Serialize};

use crate::regularizer::mask_bounds;
use crate::ssim::ssim_map;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    psnr_from_mse(mse)
}

/// PSNR over the pixels where `mask` is set; `None` for an empty mask.
pub fn masked_psnr(a: &[f64], b: &[f64], mask: &[bool]) -> Option<f64> {
    let channels = a.len() / mask.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..channels {
            let d = a[p * channels + c] - b[p * channels + c];
            sum += d * d;
        }
        count += channels;
    }
    (count > 0).then(|| psnr_from_mse(sum / count as f64))
}

pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let map = ssim_map(a, b, width, height, 3);
    map.iter().sum::<f64>() / map.len() as f64
}

/// Mean of the SSIM map over the mask's bounding box; `None` for an empty mask.
pub fn masked_ssim(a: &[f64], b: &[f64], mask: &[bool], width: usize, height: usize) -> Option<f64> {
    let rect = mask_bounds(mask, width, height)?;
    let map = ssim_map(a, b, width, height, 3);
    let mut sum = 0.0;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            sum += map[y * width + x];
        }
    }
    Some(sum / (rect.width() * rect.height()) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    pub view_id: u32,
    pub width: usize,
    pub height: usize,
    pub render: &'a [f64],
    pub truth: &'a [f64],
    pub mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: u32,
    pub psnr: f64,
    pub masked_psnr: Option<f64>,
    pub ssim: f64,
    pub masked_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr: f64,
    pub masked_psnr: Option<f64>,
    pub ssim: f64,
    pub masked_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean: MetricsSummary,
    /// Pixel support of the masked PSNR.
    pub masked_psnr_support: String,
    /// Pixel support of the masked SSIM.
    pub masked_ssim_support: String,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_metrics(inputs: &[MetricInput<'_>]) -> MetricsReport {
    let views: Vec<ViewMetrics> = inputs
        .iter()
        .map(|i| ViewMetrics {
            view_id: i.view_id,
            psnr: psnr(i.render, i.truth),
            masked_psnr: i.mask.and_then(|m| masked_psnr(i.render, i.truth, m)),
            ssim: ssim(i.render, i.truth, i.width, i.height),
            masked_ssim: i.mask.and_then(|m| masked_ssim(i.render, i.truth, m, i.width, i.height)),
        })
        .collect();
    let mean = MetricsSummary {
        psnr: mean(views.iter().map(|v| v.psnr)).unwrap_or(f64::NAN),
        masked_psnr: mean(views.iter().filter_map(|v| v.masked_psnr)),
        ssim: mean(views.iter().map(|v| v.ssim)).unwrap_or(f64::NAN),
        masked_ssim: mean(views.iter().filter_map(|v| v.masked_ssim)),
    };
    MetricsReport {
        views,
        mean,
        masked_psnr_support: "mask_pixels".into(),
        masked_ssim_support: "mask_bounding_box".into(),
    }
}
