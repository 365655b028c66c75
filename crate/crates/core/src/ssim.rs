//! Windowed structural similarity with an 11×11 Gaussian window (σ = 1.5),
//! zero padding at the borders, and its gradient with respect to the first image.

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter of one plane; self-adjoint because the kernel is symmetric.
fn blur(plane: &[f64], width: usize, height: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < width {
                    acc += kv * row[sx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = y as isize + t as isize - r;
                if sy >= 0 && (sy as usize) < height {
                    acc += kv * tmp[sy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn plane(img: &[f64], channels: usize, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

struct Moments {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    xx: Vec<f64>,
    yy: Vec<f64>,
    xy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], width: usize, height: usize, k: &[f64; WINDOW]) -> Moments {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    Moments {
        mu_x: blur(x, width, height, k),
        mu_y: blur(y, width, height, k),
        xx: blur(&sq(x, x), width, height, k),
        yy: blur(&sq(y, y), width, height, k),
        xy: blur(&sq(x, y), width, height, k),
    }
}

/// Per-pixel SSIM averaged over channels. Images are interleaved `H·W·channels`.
pub fn ssim_map(x: &[f64], y: &[f64], width: usize, height: usize, channels: usize) -> Vec<f64> {
    assert_eq!(x.len(), width * height * channels);
    assert_eq!(y.len(), x.len());
    let k = kernel();
    let mut out = vec![0.0; width * height];
    for c in 0..channels {
        let m = moments(&plane(x, channels, c), &plane(y, channels, c), width, height, &k);
        for (p, o) in out.iter_mut().enumerate() {
            let (mx, my) = (m.mu_x[p], m.mu_y[p]);
            let vx = m.xx[p] - mx * mx;
            let vy = m.yy[p] - my * my;
            let cxy = m.xy[p] - mx * my;
            let s = ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            *o += s / channels as f64;
        }
    }
    out
}

/// Gradient of `Σ_p d_map[p] · ssim_map(x, y)[p]` with respect to `x`.
pub fn ssim_map_backward(x: &[f64], y: &[f64], width: usize, height: usize, channels: usize, d_map: &[f64]) -> Vec<f64> {
    assert_eq!(d_map.len(), width * height);
    let k = kernel();
    let mut grad = vec![0.0; x.len()];
    let n = width * height;
    for c in 0..channels {
        let xp = plane(x, channels, c);
        let yp = plane(y, channels, c);
        let m = moments(&xp, &yp, width, height, &k);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for p in 0..n {
            let u = d_map[p] / channels as f64;
            if u == 0.0 {
                continue;
            }
            let (mx, my) = (m.mu_x[p], m.mu_y[p]);
            let vx = m.xx[p] - mx * mx;
            let vy = m.yy[p] - my * my;
            let cxy = m.xy[p] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = vx + vy + C2;
            let d_mu = 2.0 * my * a2 / (b1 * b2) - a1 * a2 * 2.0 * mx / (b1 * b1 * b2);
            let d_var = -a1 * a2 / (b1 * b2 * b2);
            let d_cov = 2.0 * a1 / (b1 * b2);
            g_mu[p] = u * (d_mu - 2.0 * mx * d_var - my * d_cov);
            g_xx[p] = u * d_var;
            g_xy[p] = u * d_cov;
        }
        let b_mu = blur(&g_mu, width, height, &k);
        let b_xx = blur(&g_xx, width, height, &k);
        let b_xy = blur(&g_xy, width, height, &k);
        for p in 0..n {
            grad[p * channels + c] = b_mu[p] + 2.0 * xp[p] * b_xx[p] + yp[p] * b_xy[p];
        }
    }
    grad
}
