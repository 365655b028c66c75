//! Anchor-based scene representation.
//!
//! Each anchor carries a feature vector, a log-domain offset scale and `k`
//! unitless offsets. Shared decoders turn an anchor's feature plus the viewing
//! direction into `k` renderable [`NeuralGaussian`]s.

mod decoder;
mod densify;
mod mlp;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GaussianShape;

pub use decoder::{
    decode_anchors, decode_anchors_with_features, DecodedScene, DecoderBank, DecoderGrad, GaussianGrad, SceneGrad,
};
pub use densify::{densify_and_prune, DensifyConfig, DensifyReport, DensifyStats};
pub use mlp::{Mlp, MlpGrad};

/// Used when the initialization set is too small to estimate point spacing.
pub const FALLBACK_VOXEL_SIZE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    pub hidden_width: usize,
    /// Voxel size for anchor placement; median nearest-neighbor spacing when unset.
    pub voxel_size: Option<f64>,
    /// Half-width of the uniform distribution initial offsets are drawn from.
    pub initial_offset_range: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            feature_dim: 32,
            offsets_per_anchor: 5,
            hidden_width: 32,
            voxel_size: None,
            initial_offset_range: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.offsets_per_anchor == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig(
                "feature_dim, offsets_per_anchor and hidden_width must be positive".into(),
            ));
        }
        if let Some(v) = self.voxel_size {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("voxel_size must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A sparse input point, e.g. from structure-from-motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub position: Vector3<f64>,
    pub color: Option<[u8; 3]>,
}

impl ScenePoint {
    pub fn new(position: Vector3<f64>) -> Self {
        ScenePoint { position, color: None }
    }
}

/// One anchor, as an owned value.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: Vector3<f64>,
    pub feature: Vec<f64>,
    pub offset_scale: Vector3<f64>,
    pub offsets: Vec<Vector3<f64>>,
}

/// Structure-of-arrays storage for every anchor's learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    /// `3·n`
    pub positions: Vec<f64>,
    /// `d·n`
    pub features: Vec<f64>,
    /// `3·n`, log-domain
    pub offset_scales: Vec<f64>,
    /// `3·k·n`
    pub offsets: Vec<f64>,
}

impl Anchors {
    pub fn new(feature_dim: usize, offsets_per_anchor: usize) -> Self {
        Anchors {
            feature_dim,
            offsets_per_anchor,
            positions: Vec::new(),
            features: Vec::new(),
            offset_scales: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, anchor: &Anchor) {
        assert_eq!(anchor.feature.len(), self.feature_dim, "feature dimension mismatch");
        assert_eq!(anchor.offsets.len(), self.offsets_per_anchor, "offset count mismatch");
        self.positions.extend(anchor.position.iter());
        self.features.extend_from_slice(&anchor.feature);
        self.offset_scales.extend(anchor.offset_scale.iter());
        for o in &anchor.offsets {
            self.offsets.extend(o.iter());
        }
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn offset_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.offset_scales[3 * i..3 * i + 3])
    }

    pub fn offset(&self, i: usize, j: usize) -> Vector3<f64> {
        let base = 3 * (i * self.offsets_per_anchor + j);
        Vector3::from_column_slice(&self.offsets[base..base + 3])
    }

    pub fn get(&self, i: usize) -> Anchor {
        Anchor {
            position: self.position(i),
            feature: self.feature(i).to_vec(),
            offset_scale: self.offset_scale(i),
            offsets: (0..self.offsets_per_anchor).map(|j| self.offset(i, j)).collect(),
        }
    }

    /// Keeps only the anchors for which `keep` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let d = self.feature_dim;
        let k3 = 3 * self.offsets_per_anchor;
        retain_rows(&mut self.positions, 3, keep);
        retain_rows(&mut self.features, d, keep);
        retain_rows(&mut self.offset_scales, 3, keep);
        retain_rows(&mut self.offsets, k3, keep);
    }
}

/// Keeps the `width`-sized rows of `buf` whose `keep` flag is set.
pub fn retain_rows(buf: &mut Vec<f64>, width: usize, keep: &[bool]) {
    let mut out = Vec::with_capacity(buf.len());
    for (row, &k) in buf.chunks(width).zip(keep) {
        if k {
            out.extend_from_slice(row);
        }
    }
    *buf = out;
}

/// A renderable Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuralGaussian {
    pub mean3d: Vector3<f64>,
    pub opacity: f64,
    pub shape: GaussianShape,
    pub color: Vector3<f64>,
    pub parent_anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub voxel_size: f64,
    pub anchors: Anchors,
    pub decoders: DecoderBank,
}

impl Scene {
    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn voxel_key(&self, p: &Vector3<f64>) -> [i64; 3] {
        voxel_key(p, self.voxel_size)
    }
}

pub(crate) fn voxel_key(p: &Vector3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Median distance from each point to its nearest neighbor.
pub fn median_nearest_neighbor_spacing(points: &[Vector3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let m = nn.len();
    let median = if m % 2 == 1 {
        nn[m / 2]
    } else {
        0.5 * (nn[m / 2 - 1] + nn[m / 2])
    };
    (median > 0.0 && median.is_finite()).then_some(median)
}

/// Voxelizes the points and places one anchor at the mean of each occupied
/// voxel. Features start at zero, offsets uniformly in `±initial_offset_range`,
/// offset scales at the voxel size; decoders are randomly initialized.
pub fn init_from_points<R: Rng + ?Sized>(points: &[ScenePoint], config: &SceneConfig, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    if let Some(bad) = points.iter().find(|p| !p.position.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "non-finite initialization point {:?}",
            bad.position
        )));
    }
    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();
    let voxel = config
        .voxel_size
        .or_else(|| median_nearest_neighbor_spacing(&positions))
        .unwrap_or(FALLBACK_VOXEL_SIZE);

    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for p in &positions {
        let e = cells.entry(voxel_key(p, voxel)).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }

    let d = config.feature_dim;
    let k = config.offsets_per_anchor;
    let mut anchors = Anchors::new(d, k);
    let r = config.initial_offset_range;
    for (sum, count) in cells.values() {
        let offsets = (0..k)
            .map(|_| {
                if r > 0.0 {
                    Vector3::from_fn(|_, _| rng.random_range(-r..r))
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        anchors.push(&Anchor {
            position: sum / *count as f64,
            feature: vec![0.0; d],
            offset_scale: Vector3::repeat(voxel.ln()),
            offsets,
        });
    }

    Ok(Scene {
        config: config.clone(),
        voxel_size: voxel,
        anchors,
        decoders: DecoderBank::random(d, config.hidden_width, k, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn single_point_gives_single_anchor() {
        let scene = init_from_points(&[ScenePoint::new(Vector3::zeros())], &SceneConfig::default(), &mut rng()).unwrap();
        assert_eq!(scene.anchor_count(), 1);
        assert_eq!(scene.anchors.position(0), Vector3::zeros());
        assert!(scene.anchors.feature(0).iter().all(|&f| f == 0.0));
    }

    #[test]
    fn cube_corners_in_one_voxel() {
        let pts: Vec<ScenePoint> = (0..8)
            .map(|c| ScenePoint::new(Vector3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)))
            .collect();
        let config = SceneConfig {
            voxel_size: Some(10.0),
            ..Default::default()
        };
        let scene = init_from_points(&pts, &config, &mut rng()).unwrap();
        assert_eq!(scene.anchor_count(), 1);
        assert!((scene.anchors.position(0) - Vector3::repeat(0.5)).norm() < 1e-15);
        assert!((scene.anchors.offset_scale(0) - Vector3::repeat(10f64.ln())).norm() < 1e-15);
    }

    #[test]
    fn anchor_count_matches_voxel_histogram() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<ScenePoint> = (0..1000)
            .map(|_| ScenePoint::new(Vector3::from_fn(|_, _| r.random_range(0.0..1.0))))
            .collect();
        // Independent oracle: integer cell indices computed directly.
        let occupied: HashSet<(i32, i32, i32)> = pts
            .iter()
            .map(|p| {
                let c = |v: f64| (v * 4.0).floor() as i32;
                (c(p.position.x), c(p.position.y), c(p.position.z))
            })
            .collect();
        let config = SceneConfig {
            voxel_size: Some(0.25),
            ..Default::default()
        };
        let scene = init_from_points(&pts, &config, &mut rng()).unwrap();
        assert_eq!(scene.anchor_count(), occupied.len());
    }

    #[test]
    fn empty_points_rejected() {
        let err = init_from_points(&[], &SceneConfig::default(), &mut rng()).unwrap_err();
        assert_eq!(err.to_string(), "empty initialization set");
    }

    #[test]
    fn default_voxel_is_median_spacing() {
        let pts: Vec<ScenePoint> = (0..5).map(|i| ScenePoint::new(Vector3::new(i as f64 * 0.3, 0.0, 0.0))).collect();
        let scene = init_from_points(&pts, &SceneConfig::default(), &mut rng()).unwrap();
        assert!((scene.voxel_size - 0.3).abs() < 1e-12);
        let offsets = &scene.anchors.offsets;
        assert!(offsets.iter().all(|o| o.abs() <= 0.01));
    }

    #[test]
    fn retain_mask_drops_rows() {
        let mut anchors = Anchors::new(2, 1);
        for i in 0..3 {
            anchors.push(&Anchor {
                position: Vector3::repeat(i as f64),
                feature: vec![i as f64; 2],
                offset_scale: Vector3::zeros(),
                offsets: vec![Vector3::repeat(-(i as f64))],
            });
        }
        anchors.retain_mask(&[true, false, true]);
        assert_eq!(anchors.len(), 2);
        assert_eq!(anchors.get(1).feature, vec![2.0, 2.0]);
        assert_eq!(anchors.offset(1, 0), Vector3::repeat(-2.0));
    }
}
