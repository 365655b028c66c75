//! Tile-based, depth-sorted alpha blending of projected Gaussians with an
//! analytic backward pass.
//!
//! Per pixel, contributors are visited front to back. Each one contributes
//! `α = min(opacity · exp(-½ dᵀ Σ₂⁻¹ d), 0.99)`; contributors with `α < 1/255`
//! are skipped and blending stops before transmittance would drop below 1e-4.
//! Color and camera depth are blended with the same weights, and empty pixels
//! stay black with zero depth.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{
    build_covariance, build_covariance_backward, project_gaussian, project_gaussian_backward, Camera,
    ProjectedGrad,
};
use crate::scene::{GaussianGrad, NeuralGaussian};

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Spread tiles over the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: TILE_SIZE,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H·W·3`.
    pub color: Vec<f64>,
    /// Row-major `H·W`, blended camera-frame z.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderOutput {
            width,
            height,
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
            contributors: vec![0; n],
        }
    }

    pub fn pixel_color(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = 3 * (y * self.width + x);
        Vector3::new(self.color[i], self.color[i + 1], self.color[i + 2])
    }
}

/// A Gaussian after projection, ready for blending.
#[derive(Debug, Clone)]
struct Splat {
    gaussian: usize,
    mean: Vector2<f64>,
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    sigma: Matrix3<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    /// Inclusive pixel bounds outside of which `α < 1/255`.
    bounds: [usize; 4],
    /// Slightly inflated `2 ln(255·opacity)`: pixels with `dᵀΣ₂⁻¹d` above it have `α < 1/255`.
    reach: f64,
}

impl Splat {
    #[inline]
    fn evaluate(&self, px: f64, py: f64) -> (f64, f64) {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        let g = power.exp();
        (g, self.opacity * g)
    }

    /// Columns of row `y` within `xs` that can reach `α ≥ 1/255`.
    #[inline]
    fn row_span(&self, y: usize, xs: &std::ops::Range<usize>) -> std::ops::Range<usize> {
        let [a, b, c] = self.conic;
        let dy = y as f64 + 0.5 - self.mean.y;
        let disc = (b * dy) * (b * dy) - a * (c * dy * dy - self.reach);
        if disc < 0.0 {
            return 0..0;
        }
        let root = disc.sqrt();
        let lo = self.mean.x + (-b * dy - root) / a - 0.5;
        let hi = self.mean.x + (-b * dy + root) / a - 0.5;
        let lo = (lo.floor().max(0.0) as usize).max(xs.start);
        let hi = ((hi.ceil().max(0.0) as usize) + 1).min(xs.end);
        lo..hi.max(lo)
    }
}

/// Projects every Gaussian and keeps those that can reach `α ≥ 1/255` on some pixel.
fn prepare_splats(gaussians: &[NeuralGaussian], cam: &Camera) -> Vec<Splat> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            if g.opacity * 255.0 <= 1.0 {
                return None;
            }
            let sigma = build_covariance(&g.shape);
            let p = project_gaussian(&g.mean3d, &sigma, cam);
            if !p.visible {
                return None;
            }
            let inv = p.cov2d.try_inverse()?;
            // Outside the ellipse dᵀΣ⁻¹d = reach, opacity·exp(-½ dᵀΣ⁻¹d) < 1/255.
            let reach = 2.0 * (255.0 * g.opacity).ln() * 1.01 + 0.01;
            let rx = (reach * p.cov2d[(0, 0)]).sqrt() + 1.0;
            let ry = (reach * p.cov2d[(1, 1)]).sqrt() + 1.0;
            let x0 = (p.mean2d.x - rx - 0.5).ceil().max(0.0);
            let x1 = (p.mean2d.x + rx - 0.5).floor().min(w - 1.0);
            let y0 = (p.mean2d.y - ry - 0.5).ceil().max(0.0);
            let y1 = (p.mean2d.y + ry - 0.5).floor().min(h - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                return None;
            }
            Some(Splat {
                gaussian: i,
                mean: p.mean2d,
                conic: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
                sigma,
                opacity: g.opacity,
                color: g.color,
                depth: p.depth_cam,
                bounds: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
                reach,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn tiles(width: usize, height: usize, size: usize) -> Vec<Tile> {
    let mut out = Vec::new();
    for y0 in (0..height).step_by(size) {
        for x0 in (0..width).step_by(size) {
            out.push(Tile {
                x0,
                y0,
                x1: (x0 + size).min(width),
                y1: (y0 + size).min(height),
            });
        }
    }
    out
}

impl Tile {
    /// Pixel ranges of `bounds` (inclusive) that fall inside the tile.
    fn clip(&self, bounds: &[usize; 4]) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let [x0, y0, x1, y1] = *bounds;
        (x0.max(self.x0)..(x1 + 1).min(self.x1), y0.max(self.y0)..(y1 + 1).min(self.y1))
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderState {
    width: usize,
    height: usize,
    options: RenderOptions,
    splats: Vec<Splat>,
    tiles: Vec<Tile>,
    /// Splat indices per tile, sorted front to back.
    tile_lists: Vec<Vec<u32>>,
    /// Blended contributions per tile, in list order.
    tile_records: Vec<Vec<Contribution>>,
    gaussian_count: usize,
}

/// One splat blended into one pixel.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// Position in the tile's splat list.
    pos: u32,
    /// Pixel index within the tile.
    pixel: u32,
    alpha: f64,
    /// Transmittance in front of the splat.
    t_before: f64,
    /// Unscaled Gaussian falloff at the pixel.
    g: f64,
}

struct TileForward {
    color: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    contributors: Vec<u32>,
    records: Vec<Contribution>,
}

pub fn render(gaussians: &[NeuralGaussian], cam: &Camera) -> (RenderOutput, RenderState) {
    render_with(gaussians, cam, &RenderOptions::default())
}

pub fn render_with(gaussians: &[NeuralGaussian], cam: &Camera, options: &RenderOptions) -> (RenderOutput, RenderState) {
    let width = cam.width as usize;
    let height = cam.height as usize;
    let tile_size = options.tile_size.max(1);
    let splats = prepare_splats(gaussians, cam);
    let tiles = tiles(width, height, tile_size);
    let tiles_x = width.div_ceil(tile_size);

    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.gaussian.cmp(&sb.gaussian))
    });
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles.len()];
    for &si in &order {
        let [x0, y0, x1, y1] = splats[si as usize].bounds;
        for ty in y0 / tile_size..=y1 / tile_size {
            for tx in x0 / tile_size..=x1 / tile_size {
                tile_lists[ty * tiles_x + tx].push(si);
            }
        }
    }

    let forward_tile = |t: usize| -> TileForward {
        let tile = tiles[t];
        let tw = tile.x1 - tile.x0;
        let n = tw * (tile.y1 - tile.y0);
        let mut out = TileForward {
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
            contributors: vec![0; n],
            records: Vec::with_capacity(32 * n),
        };
        let mut t_acc = vec![1.0; n];
        let mut done = vec![false; n];
        let mut remaining = n;
        for (pos, &si) in tile_lists[t].iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let s = &splats[si as usize];
            let (xs, ys) = tile.clip(&s.bounds);
            for y in ys {
                for x in s.row_span(y, &xs) {
                    let p = (y - tile.y0) * tw + (x - tile.x0);
                    if done[p] {
                        continue;
                    }
                    let (g, raw) = s.evaluate(x as f64 + 0.5, y as f64 + 0.5);
                    let alpha = raw.min(ALPHA_MAX);
                    if alpha < ALPHA_MIN {
                        continue;
                    }
                    let next = t_acc[p] * (1.0 - alpha);
                    if next < TRANSMITTANCE_MIN {
                        done[p] = true;
                        remaining -= 1;
                        continue;
                    }
                    out.records.push(Contribution {
                        pos: pos as u32,
                        pixel: p as u32,
                        alpha,
                        t_before: t_acc[p],
                        g,
                    });
                    let weight = alpha * t_acc[p];
                    for c in 0..3 {
                        out.color[3 * p + c] += s.color[c] * weight;
                    }
                    out.depth[p] += s.depth * weight;
                    t_acc[p] = next;
                    out.contributors[p] += 1;
                }
            }
        }
        for p in 0..n {
            out.alpha[p] = 1.0 - t_acc[p];
        }
        out
    };

    let mut per_tile: Vec<TileForward> = if options.parallel {
        (0..tiles.len()).into_par_iter().map(forward_tile).collect()
    } else {
        (0..tiles.len()).map(forward_tile).collect()
    };

    let mut output = RenderOutput::empty(width, height);
    for (tile, result) in tiles.iter().zip(&per_tile) {
        let mut p = 0;
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let i = y * width + x;
                output.color[3 * i..3 * i + 3].copy_from_slice(&result.color[3 * p..3 * p + 3]);
                output.depth[i] = result.depth[p];
                output.alpha[i] = result.alpha[p];
                output.contributors[i] = result.contributors[p];
                p += 1;
            }
        }
    }

    let state = RenderState {
        width,
        height,
        options: *options,
        splats,
        tiles,
        tile_lists,
        tile_records: per_tile.iter_mut().map(|r| std::mem::take(&mut r.records)).collect(),
        gaussian_count: gaussians.len(),
    };
    (output, state)
}

/// Upstream gradients on the rendered buffers.
#[derive(Debug, Clone, Copy)]
pub struct PixelGrads<'a> {
    pub color: &'a [f64],
    pub depth: &'a [f64],
    pub alpha: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Reverse-mode pass of [`render`]: gradients for every input Gaussian, in
/// input order. Pixel contributions are reduced tile by tile in a fixed order.
pub fn render_backward(state: &RenderState, gaussians: &[NeuralGaussian], cam: &Camera, grads: &PixelGrads<'_>) -> Vec<GaussianGrad> {
    assert_eq!(gaussians.len(), state.gaussian_count, "gaussians differ from the forward pass");
    let width = state.width;
    let n_pix = width * state.height;
    assert_eq!(grads.color.len(), 3 * n_pix);
    assert_eq!(grads.depth.len(), n_pix);

    let backward_tile = |t: usize| -> Vec<SplatGrad> {
        let tile = state.tiles[t];
        let list = &state.tile_lists[t];
        let tw = tile.x1 - tile.x0;
        let n = tw * (tile.y1 - tile.y0);
        let mut local = vec![SplatGrad::default(); list.len()];
        let mut g_color = vec![Vector3::zeros(); n];
        let mut g_depth = vec![0.0; n];
        let mut g_alpha = vec![0.0; n];
        let mut active = vec![false; n];
        for p in 0..n {
            let i = (tile.y0 + p / tw) * width + tile.x0 + p % tw;
            g_color[p] = Vector3::new(grads.color[3 * i], grads.color[3 * i + 1], grads.color[3 * i + 2]);
            g_depth[p] = grads.depth[i];
            g_alpha[p] = grads.alpha.map_or(0.0, |a| a[i]);
            active[p] = g_color[p] != Vector3::zeros() || g_depth[p] != 0.0 || g_alpha[p] != 0.0;
        }

        // Blended value of everything behind the current contributor,
        // normalized by the transmittance in front of it. Records are in
        // list order, so walking them backwards visits each pixel back to front.
        let mut behind_color = vec![Vector3::zeros(); n];
        let mut behind_depth = vec![0.0; n];
        let mut behind_alpha = vec![0.0; n];
        for r in state.tile_records[t].iter().rev() {
            let p = r.pixel as usize;
            if !active[p] {
                continue;
            }
            let pos = r.pos as usize;
            let (alpha, g) = (r.alpha, r.g);
            let s = &state.splats[list[pos] as usize];
            let weight = alpha * r.t_before;
            let out = &mut local[pos];
            out.color += g_color[p] * weight;
            out.depth += g_depth[p] * weight;

            let d_alpha = r.t_before
                * ((s.color - behind_color[p]).dot(&g_color[p])
                    + (s.depth - behind_depth[p]) * g_depth[p]
                    + (1.0 - behind_alpha[p]) * g_alpha[p]);

            behind_color[p] = s.color * alpha + behind_color[p] * (1.0 - alpha);
            behind_depth[p] = s.depth * alpha + behind_depth[p] * (1.0 - alpha);
            behind_alpha[p] = alpha + behind_alpha[p] * (1.0 - alpha);

            if s.opacity * g >= ALPHA_MAX {
                continue;
            }
            out.opacity += g * d_alpha;
            let d_power = s.opacity * g * d_alpha;
            let px = (tile.x0 + p % tw) as f64 + 0.5;
            let py = (tile.y0 + p / tw) as f64 + 0.5;
            let dx = px - s.mean.x;
            let dy = py - s.mean.y;
            let [a, b, c] = s.conic;
            out.conic[0] += -0.5 * dx * dx * d_power;
            out.conic[1] += -dx * dy * d_power;
            out.conic[2] += -0.5 * dy * dy * d_power;
            // d = pixel - mean, so d(mean) = -d(d).
            out.mean.x += (a * dx + b * dy) * d_power;
            out.mean.y += (b * dx + c * dy) * d_power;
        }
        local
    };

    let per_tile: Vec<Vec<SplatGrad>> = if state.options.parallel {
        (0..state.tiles.len()).into_par_iter().map(backward_tile).collect()
    } else {
        (0..state.tiles.len()).map(backward_tile).collect()
    };

    let mut splat_grads = vec![SplatGrad::default(); state.splats.len()];
    for (list, local) in state.tile_lists.iter().zip(&per_tile) {
        for (&si, g) in list.iter().zip(local) {
            splat_grads[si as usize].add(g);
        }
    }

    let chain = |(s, g): (&Splat, &SplatGrad)| -> (usize, GaussianGrad) {
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let d_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let d_cov = -(conic * d_conic * conic);
        let gauss = &gaussians[s.gaussian];
        let projected = ProjectedGrad {
            mean2d: g.mean,
            cov2d: d_cov,
            depth_cam: g.depth,
        };
        let (d_mean3d, d_sigma) = project_gaussian_backward(&gauss.mean3d, &s.sigma, cam, &projected);
        let d_shape = build_covariance_backward(&gauss.shape, &d_sigma);
        (
            s.gaussian,
            GaussianGrad {
                mean3d: d_mean3d,
                opacity: g.opacity,
                color: g.color,
                log_scale: d_shape.log_scale,
                rotation: d_shape.rotation,
                mean2d: g.mean,
            },
        )
    };
    let chained: Vec<(usize, GaussianGrad)> = if state.options.parallel {
        state.splats.par_iter().zip(splat_grads.par_iter()).map(chain).collect()
    } else {
        state.splats.iter().zip(splat_grads.iter()).map(chain).collect()
    };

    let mut out = vec![GaussianGrad::default(); gaussians.len()];
    for (i, g) in chained {
        out[i] = g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GaussianShape;
    use nalgebra::{Matrix4, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(size: u32) -> Camera {
        let f = size as f64;
        Camera::new(0, size, size, f, f, f / 2.0, f / 2.0, Matrix4::identity()).unwrap()
    }

    /// A Gaussian whose projection is centered on pixel `(px, py)` at depth `z`.
    fn on_pixel(cam: &Camera, px: usize, py: usize, z: f64, opacity: f64, color: [f64; 3], scale: f64) -> NeuralGaussian {
        let u = px as f64 + 0.5;
        let v = py as f64 + 0.5;
        NeuralGaussian {
            mean3d: Vector3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z),
            opacity,
            shape: GaussianShape::isotropic(scale),
            color: Vector3::from(color),
            parent_anchor: 0,
        }
    }

    fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<NeuralGaussian> {
        (0..n)
            .map(|i| NeuralGaussian {
                mean3d: Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(1.0..4.0)),
                opacity: rng.random_range(0.05..1.0),
                shape: GaussianShape::new(
                    Vector3::from_fn(|_, _| rng.random_range(-3.5..-1.5)),
                    Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                ),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                parent_anchor: i,
            })
            .collect()
    }

    #[test]
    fn single_opaque_gaussian() {
        let cam = camera(16);
        let g = on_pixel(&cam, 8, 8, 2.0, 1.0, [1.0, 0.0, 0.0], 1e-3);
        let (out, _) = render(&[g], &cam);
        let c = out.pixel_color(8, 8);
        assert!((c - Vector3::new(0.99, 0.0, 0.0)).norm() < 1e-12);
        assert!((out.depth[8 * 16 + 8] - 0.99 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_term_blend() {
        let cam = camera(16);
        let a = on_pixel(&cam, 4, 4, 1.0, 0.5, [0.2, 0.4, 0.6], 1e-4);
        let b = on_pixel(&cam, 4, 4, 2.0, 0.5, [0.8, 0.1, 0.3], 1e-4);
        let (out, _) = render(&[b, a], &cam);
        let i = 4 * 16 + 4;
        // Point sources hit the blur floor; at the center the Gaussian is exactly 1.
        let expected = Vector3::new(0.2, 0.4, 0.6) * 0.5 + Vector3::new(0.8, 0.1, 0.3) * 0.25;
        assert!((out.pixel_color(4, 4) - expected).norm() < 1e-12);
        assert!((out.depth[i] - 1.0).abs() < 1e-12);
        assert!((out.alpha[i] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_renders_black() {
        let (out, state) = render(&[], &camera(8));
        assert!(out.color.iter().chain(&out.depth).chain(&out.alpha).all(|&v| v == 0.0));
        let zeros = vec![0.0; 64];
        let grads = render_backward(&state, &[], &camera(8), &PixelGrads {
            color: &vec![1.0; 192],
            depth: &zeros,
            alpha: None,
        });
        assert!(grads.is_empty());
    }

    #[test]
    fn telescoping_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = camera(32);
        let gs = random_gaussians(&mut rng, 80);
        let (out, state) = render(&gs, &cam);
        for i in 0..32 * 32 {
            assert!((0.0..=1.0).contains(&out.alpha[i]));
            for c in 0..3 {
                let v = out.color[3 * i + c];
                assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            assert!(out.alpha[i] > 0.0 || out.depth[i] == 0.0);
        }
        // Blending pure white gives the accumulated alpha.
        let white: Vec<NeuralGaussian> = gs.iter().map(|g| NeuralGaussian { color: Vector3::repeat(1.0), ..*g }).collect();
        let (w, _) = render(&white, &cam);
        for i in 0..32 * 32 {
            assert!((w.color[3 * i] - w.alpha[i]).abs() < 1e-6);
        }
        drop(state);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = camera(32);
        let gs = random_gaussians(&mut rng, 60);
        let mut shuffled = gs.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let (a, _) = render(&gs, &cam);
        let (b, _) = render(&shuffled, &cam);
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn near_opaque_occluder_pulls_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = camera(16);
        let mut gs = random_gaussians(&mut rng, 30);
        let (before, _) = render(&gs, &cam);
        let mut wall = on_pixel(&cam, 8, 8, 0.5, 1.0, [0.0, 0.0, 0.0], 0.5);
        wall.shape = GaussianShape::isotropic(2.0);
        gs.push(wall);
        let (after, _) = render(&gs, &cam);
        let i = 8 * 16 + 8;
        // Everything behind the occluder shares the remaining 1% of transmittance.
        assert!(before.depth[i] > 1.0);
        assert!(after.depth[i] >= 0.5 * 0.99 && after.depth[i] <= 0.5 * 0.99 + 0.01 * 4.0);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = camera(40);
        let gs = random_gaussians(&mut rng, 100);
        let seq = RenderOptions {
            parallel: false,
            ..Default::default()
        };
        let (a, sa) = render_with(&gs, &cam, &seq);
        let (b, sb) = render(&gs, &cam);
        assert_eq!(a, b);
        let gc: Vec<f64> = (0..a.color.len()).map(|i| (i % 7) as f64 * 0.1 - 0.3).collect();
        let gd: Vec<f64> = (0..a.depth.len()).map(|i| (i % 5) as f64 * 0.1 - 0.2).collect();
        let pg = PixelGrads {
            color: &gc,
            depth: &gd,
            alpha: None,
        };
        assert_eq!(render_backward(&sa, &gs, &cam, &pg), render_backward(&sb, &gs, &cam, &pg));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = camera(16);
        let gs = random_gaussians(&mut rng, 20);
        let (_, state) = render(&gs, &cam);
        let zeros3 = vec![0.0; 16 * 16 * 3];
        let zeros = vec![0.0; 16 * 16];
        let grads = render_backward(&state, &gs, &cam, &PixelGrads {
            color: &zeros3,
            depth: &zeros,
            alpha: Some(&zeros),
        });
        assert!(grads.iter().all(|g| *g == GaussianGrad::default()));
    }

    #[test]
    fn color_gradient_is_blend_weight() {
        let cam = camera(8);
        let g = on_pixel(&cam, 3, 3, 2.0, 0.6, [0.3, 0.3, 0.3], 1e-4);
        let (out, state) = render(&[g], &cam);
        let mut gc = vec![0.0; 8 * 8 * 3];
        gc[3 * (3 * 8 + 3)] = 1.0;
        let zeros = vec![0.0; 64];
        let grads = render_backward(&state, &[g], &cam, &PixelGrads {
            color: &gc,
            depth: &zeros,
            alpha: None,
        });
        assert!((grads[0].color.x - out.alpha[3 * 8 + 3]).abs() < 1e-15);
        assert!((grads[0].color.x - 0.6).abs() < 1e-12);
    }

    /// Probe loss over all outputs, for finite-difference checks of the whole chain.
    fn probe(out: &RenderOutput, wc: &[f64], wd: &[f64], wa: &[f64]) -> f64 {
        out.color.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
            + out.depth.iter().zip(wd).map(|(a, b)| a * b).sum::<f64>()
            + out.alpha.iter().zip(wa).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cam = camera(8);
        // Large, translucent splats so that no pixel sits near a skip threshold.
        let gs: Vec<NeuralGaussian> = (0..4)
            .map(|i| NeuralGaussian {
                mean3d: Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 2.0 + i as f64 * 0.3),
                opacity: rng.random_range(0.3..0.6),
                shape: GaussianShape::new(
                    Vector3::from_fn(|_, _| rng.random_range(-0.8..-0.3)),
                    Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                ),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                parent_anchor: i,
            })
            .collect();
        let wc: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wd: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wa: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, state) = render(&gs, &cam);
        let grads = render_backward(&state, &gs, &cam, &PixelGrads {
            color: &wc,
            depth: &wd,
            alpha: Some(&wa),
        });
        let f = |gs: &[NeuralGaussian]| probe(&render(gs, &cam).0, &wc, &wd, &wa);
        let h = 1e-5;
        let check = |a: f64, p: f64, m: f64| {
            let fd = (p - m) / (2.0 * h);
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "analytic {a} fd {fd}");
        };
        for i in 0..gs.len() {
            for k in 0..3 {
                let mut p = gs.clone();
                let mut m = gs.clone();
                p[i].mean3d[k] += h;
                m[i].mean3d[k] -= h;
                check(grads[i].mean3d[k], f(&p), f(&m));
                let mut p = gs.clone();
                let mut m = gs.clone();
                p[i].shape.log_scale[k] += h;
                m[i].shape.log_scale[k] -= h;
                check(grads[i].log_scale[k], f(&p), f(&m));
                let mut p = gs.clone();
                let mut m = gs.clone();
                p[i].color[k] += h;
                m[i].color[k] -= h;
                check(grads[i].color[k], f(&p), f(&m));
            }
            for k in 0..4 {
                let mut p = gs.clone();
                let mut m = gs.clone();
                p[i].shape.rotation[k] += h;
                m[i].shape.rotation[k] -= h;
                check(grads[i].rotation[k], f(&p), f(&m));
            }
            let mut p = gs.clone();
            let mut m = gs.clone();
            p[i].opacity += h;
            m[i].opacity -= h;
            check(grads[i].opacity, f(&p), f(&m));
        }
    }
}
