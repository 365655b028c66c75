use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::decoder::{DecodedScene, GaussianGrad};
use super::{voxel_key, Anchor, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    pub start_step: usize,
    pub end_step: usize,
    /// Mean screen-space positional gradient above which a Gaussian spawns an anchor.
    pub grad_threshold: f64,
    /// Mean decoded opacity below which an anchor is removed.
    pub opacity_threshold: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            interval: 500,
            start_step: 1500,
            end_step: 15000,
            grad_threshold: 2e-4,
            opacity_threshold: 0.05,
        }
    }
}

impl DensifyConfig {
    pub fn is_due(&self, step: usize) -> bool {
        self.enabled && self.interval > 0 && step >= self.start_step && step <= self.end_step && step.is_multiple_of(self.interval)
    }
}

/// Statistics accumulated over one densification window.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub offsets_per_anchor: usize,
    /// Per Gaussian slot (`anchor·k + j`).
    pub grad_sum: Vec<f64>,
    pub grad_count: Vec<u32>,
    /// Per anchor.
    pub opacity_sum: Vec<f64>,
    pub opacity_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(anchors: usize, offsets_per_anchor: usize) -> Self {
        DensifyStats {
            offsets_per_anchor,
            grad_sum: vec![0.0; anchors * offsets_per_anchor],
            grad_count: vec![0; anchors * offsets_per_anchor],
            opacity_sum: vec![0.0; anchors],
            opacity_count: vec![0; anchors],
        }
    }

    pub fn anchors(&self) -> usize {
        self.opacity_sum.len()
    }

    pub fn record(&mut self, decoded: &DecodedScene, grads: &[GaussianGrad]) {
        let k = self.offsets_per_anchor;
        for (c, &anchor) in decoded.visible_anchors.iter().enumerate() {
            let mut opacity = 0.0;
            for j in 0..k {
                let g = c * k + j;
                self.grad_sum[anchor * k + j] += grads[g].mean2d.norm();
                self.grad_count[anchor * k + j] += 1;
                opacity += decoded.gaussians[g].opacity;
            }
            self.opacity_sum[anchor] += opacity / k as f64;
            self.opacity_count[anchor] += 1;
        }
    }
}

/// Outcome of one densification round: which of the previous anchors survived
/// and how many new anchors were appended after them.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyReport {
    pub kept: Vec<bool>,
    pub added: usize,
}

impl DensifyReport {
    pub fn removed(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn is_noop(&self) -> bool {
        self.added == 0 && self.kept.iter().all(|&k| k)
    }
}

/// Grows anchors at high-gradient Gaussians (one per empty voxel) and removes
/// anchors whose decoded opacity stayed low. New anchors inherit their parent's
/// feature, with zero offsets and offset scale at the voxel size.
pub fn densify_and_prune(scene: &mut Scene, stats: &DensifyStats, config: &DensifyConfig) -> DensifyReport {
    let n = scene.anchor_count();
    let k = scene.anchors.offsets_per_anchor;
    assert_eq!(stats.anchors(), n, "stats do not match the anchor set");

    let mut occupied: BTreeSet<[i64; 3]> = (0..n).map(|i| scene.voxel_key(&scene.anchors.position(i))).collect();
    let mut spawned = Vec::new();
    for i in 0..n {
        let stretch = scene.anchors.offset_scale(i).map(f64::exp);
        for j in 0..k {
            let slot = i * k + j;
            let count = stats.grad_count[slot];
            if count == 0 || stats.grad_sum[slot] / count as f64 <= config.grad_threshold {
                continue;
            }
            let mean = scene.anchors.position(i) + scene.anchors.offset(i, j).component_mul(&stretch);
            if !mean.iter().all(|v| v.is_finite()) {
                continue;
            }
            if occupied.insert(voxel_key(&mean, scene.voxel_size)) {
                spawned.push(Anchor {
                    position: mean,
                    feature: scene.anchors.feature(i).to_vec(),
                    offset_scale: nalgebra::Vector3::repeat(scene.voxel_size.ln()),
                    offsets: vec![nalgebra::Vector3::zeros(); k],
                });
            }
        }
    }

    let mut kept: Vec<bool> = (0..n)
        .map(|i| {
            let count = stats.opacity_count[i];
            count == 0 || stats.opacity_sum[i] / count as f64 >= config.opacity_threshold
        })
        .collect();
    if spawned.is_empty() && !kept.iter().any(|&k| k) && n > 0 {
        let best = (0..n)
            .max_by(|&a, &b| {
                let avg = |i: usize| stats.opacity_sum[i] / stats.opacity_count[i].max(1) as f64;
                avg(a).total_cmp(&avg(b)).then(b.cmp(&a))
            })
            .unwrap();
        kept[best] = true;
    }

    scene.anchors.retain_mask(&kept);
    for a in &spawned {
        scene.anchors.push(a);
    }
    DensifyReport {
        kept,
        added: spawned.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_from_points, SceneConfig, ScenePoint};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_scene() -> Scene {
        let pts: Vec<ScenePoint> = (0..4)
            .map(|i| ScenePoint::new(Vector3::new(i as f64 + 0.5, 0.5, 0.5)))
            .collect();
        let config = SceneConfig {
            voxel_size: Some(1.0),
            offsets_per_anchor: 2,
            ..Default::default()
        };
        init_from_points(&pts, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn saturated_stats(n: usize, k: usize) -> DensifyStats {
        let mut stats = DensifyStats::new(n, k);
        stats.opacity_sum.iter_mut().for_each(|v| *v = 0.9);
        stats.opacity_count.iter_mut().for_each(|v| *v = 1);
        stats.grad_count.iter_mut().for_each(|v| *v = 1);
        stats
    }

    #[test]
    fn quiet_statistics_leave_scene_unchanged() {
        let mut scene = grid_scene();
        let before = scene.clone();
        let report = densify_and_prune(&mut scene, &saturated_stats(4, 2), &DensifyConfig::default());
        assert!(report.is_noop());
        assert_eq!(scene, before);
    }

    #[test]
    fn large_gradient_in_empty_voxel_spawns_anchor() {
        let mut scene = grid_scene();
        // Push anchor 0's first offset into the empty voxel above it.
        scene.anchors.offsets.iter_mut().for_each(|o| *o = 0.0);
        scene.anchors.offsets[1] = 1.0;
        let mut stats = saturated_stats(4, 2);
        stats.grad_sum[0] = 10.0 * DensifyConfig::default().grad_threshold;
        let report = densify_and_prune(&mut scene, &stats, &DensifyConfig::default());
        assert_eq!(report.added, 1);
        assert_eq!(scene.anchor_count(), 5);
        assert!((scene.anchors.position(4) - Vector3::new(0.5, 1.5, 0.5)).norm() < 1e-12);
        assert_eq!(scene.anchors.feature(4), scene.anchors.feature(0));
    }

    #[test]
    fn low_opacity_pruned_but_never_the_last() {
        let mut scene = grid_scene();
        let mut stats = saturated_stats(4, 2);
        stats.opacity_sum = vec![0.01, 0.2, 0.02, 0.03];
        let report = densify_and_prune(&mut scene, &stats, &DensifyConfig::default());
        assert_eq!(report.kept, vec![false, true, false, false]);
        assert_eq!(scene.anchor_count(), 1);

        let mut stats = saturated_stats(1, 2);
        stats.opacity_sum = vec![0.0];
        densify_and_prune(&mut scene, &stats, &DensifyConfig::default());
        assert_eq!(scene.anchor_count(), 1);
    }

    /// Independent replay of the growth/prune policy on a random schedule.
    fn replay(mut positions: Vec<Vector3<f64>>, means: &[Vec<Vector3<f64>>], stats: &DensifyStats, cfg: &DensifyConfig, voxel: f64) -> Vec<Vector3<f64>> {
        let k = stats.offsets_per_anchor;
        let cell = |p: &Vector3<f64>| ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64);
        let mut taken: Vec<(i64, i64, i64)> = positions.iter().map(cell).collect();
        let mut grown = Vec::new();
        for (i, slot_means) in means.iter().enumerate() {
            for (j, m) in slot_means.iter().enumerate() {
                let c = stats.grad_count[i * k + j];
                if c > 0 && stats.grad_sum[i * k + j] / c as f64 > cfg.grad_threshold && !taken.contains(&cell(m)) {
                    taken.push(cell(m));
                    grown.push(*m);
                }
            }
        }
        let mut survivors: Vec<Vector3<f64>> = Vec::new();
        for (i, p) in positions.drain(..).enumerate() {
            let c = stats.opacity_count[i];
            if c == 0 || stats.opacity_sum[i] / c as f64 >= cfg.opacity_threshold {
                survivors.push(p);
            }
        }
        survivors.extend(grown);
        survivors
    }

    #[test]
    fn policy_matches_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let pts: Vec<ScenePoint> = (0..30)
                .map(|_| ScenePoint::new(Vector3::from_fn(|_, _| rng.random_range(0.0..3.0))))
                .collect();
            let config = SceneConfig {
                voxel_size: Some(0.5),
                offsets_per_anchor: 3,
                ..Default::default()
            };
            let mut scene = init_from_points(&pts, &config, &mut rng).unwrap();
            scene.anchors.offsets.iter_mut().for_each(|o| *o = rng.random_range(-3.0..3.0));
            let n = scene.anchor_count();
            let mut stats = DensifyStats::new(n, 3);
            for s in 0..n * 3 {
                stats.grad_count[s] = rng.random_range(0..4);
                stats.grad_sum[s] = rng.random_range(0.0..6e-4) * stats.grad_count[s] as f64;
            }
            for a in 0..n {
                stats.opacity_count[a] = rng.random_range(0..3);
                stats.opacity_sum[a] = rng.random_range(0.0..0.3) * stats.opacity_count[a] as f64;
            }
            let positions: Vec<_> = (0..n).map(|i| scene.anchors.position(i)).collect();
            let means: Vec<Vec<_>> = (0..n)
                .map(|i| {
                    let e = scene.anchors.offset_scale(i).map(f64::exp);
                    (0..3).map(|j| positions[i] + scene.anchors.offset(i, j).component_mul(&e)).collect()
                })
                .collect();
            let cfg = DensifyConfig::default();
            let expected = replay(positions, &means, &stats, &cfg, 0.5);
            let mut again = scene.clone();
            densify_and_prune(&mut scene, &stats, &cfg);
            densify_and_prune(&mut again, &stats, &cfg);
            assert_eq!(scene, again, "densification must be deterministic");
            if expected.is_empty() {
                assert_eq!(scene.anchor_count(), 1);
                continue;
            }
            let got: Vec<_> = (0..scene.anchor_count()).map(|i| scene.anchors.position(i)).collect();
            assert_eq!(got, expected);
        }
    }
}
