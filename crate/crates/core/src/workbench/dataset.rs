//! Scene directory layout:
//!
//! ```text
//! cameras.json               array of camera records
//! images/<id>.png            8-bit RGB, training and held-out views
//! images_inpainted/<id>.png  reference view only
//! masks/<id>.png             8-bit gray, >= 128 marks the object
//! depths/<id>.raw            monocular depth, training views
//! points3d.ply               ASCII initialization points
//! meta.json                  reference view id and the train/test split
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::formats::{self, Image8};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::scene::ScenePoint;

pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera transform (OpenCV axes: x right, y down, z forward).
    pub world_to_camera: [[f64; 4]; 4],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let m = &c.world_to_camera;
        CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let m = Matrix4::from_fn(|r, k| self.world_to_camera[r][k]);
        Camera::new(self.id, self.width, self.height, self.fx, self.fy, self.cx, self.cy, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub reference_view_id: u32,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub camera_id: u32,
    /// `H·W·3` in `[0,1]`.
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    /// Non-metric depth; NaN marks invalid pixels.
    pub mono_depth: Vec<f64>,
    pub is_reference: bool,
    pub inpainted_image: Option<Vec<f64>>,
}

impl TrainingView {
    /// Color supervision: the inpainted image on the reference view.
    pub fn target(&self) -> &[f64] {
        self.inpainted_image.as_deref().unwrap_or(&self.image)
    }
}

/// A held-out view with its ground truth image and optional object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub camera_id: u32,
    pub image: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub views: Vec<TrainingView>,
    pub test_views: Vec<TestView>,
    pub init_points: Vec<ScenePoint>,
    pub reference_view_id: u32,
}

impl SceneDataset {
    pub fn camera(&self, id: u32) -> Result<&Camera> {
        self.cameras.iter().find(|c| c.id == id).ok_or(Error::UnknownCamera(id))
    }

    pub fn reference_view(&self) -> Option<&TrainingView> {
        self.views.iter().find(|v| v.is_reference)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.cameras {
            c.validate()?;
            if !ids.insert(c.id) {
                return Err(Error::Dataset(format!("duplicate camera id {}", c.id)));
            }
        }
        if self.views.is_empty() {
            return Err(Error::Dataset("no training views".into()));
        }
        let refs: Vec<u32> = self.views.iter().filter(|v| v.is_reference).map(|v| v.camera_id).collect();
        match refs.as_slice() {
            [r] if *r == self.reference_view_id => {}
            [] => return Err(Error::Dataset("no reference view".into())),
            [r] => return Err(Error::Dataset(format!("reference view {r} does not match meta id {}", self.reference_view_id))),
            many => return Err(Error::Dataset(format!("multiple reference views {many:?}"))),
        }
        for v in &self.views {
            let cam = self.camera(v.camera_id)?;
            let n = cam.pixel_count();
            let id = v.camera_id;
            let check = |what: &str, len: usize, want: usize| {
                if len == want {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch(format!("view {id}: {what} has {len} values, camera expects {want}")))
                }
            };
            check("image", v.image.len(), 3 * n)?;
            check("mask", v.mask.len(), n)?;
            check("depth", v.mono_depth.len(), n)?;
            match (&v.inpainted_image, v.is_reference) {
                (Some(img), true) => check("inpainted image", img.len(), 3 * n)?,
                (None, true) => return Err(Error::Dataset(format!("reference view {id} has no inpainted image"))),
                (Some(_), false) => return Err(Error::Dataset(format!("view {id} has an inpainted image but is not the reference"))),
                (None, false) => {}
            }
        }
        let train_ids: BTreeSet<u32> = self.views.iter().map(|v| v.camera_id).collect();
        if train_ids.len() != self.views.len() {
            return Err(Error::Dataset("a camera is used by more than one training view".into()));
        }
        for t in &self.test_views {
            if train_ids.contains(&t.camera_id) {
                return Err(Error::Dataset(format!("camera {} is in both the training and the test split", t.camera_id)));
            }
            let n = self.camera(t.camera_id)?.pixel_count();
            if t.image.len() != 3 * n || t.mask.as_ref().is_some_and(|m| m.len() != n) {
                return Err(Error::DimensionMismatch(format!("test view {}: buffers do not match the camera", t.camera_id)));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            reference_view_id: self.reference_view_id,
            train: self.views.iter().map(|v| v.camera_id).collect(),
            test: self.test_views.iter().map(|v| v.camera_id).collect(),
        }
    }
}

fn image_path(dir: &Path, sub: &str, id: u32, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.{ext}"))
}

fn load_rgb(path: &Path, cam: &Camera) -> Result<Vec<f64>> {
    let img = formats::read_png(path, 3)?;
    if (img.width, img.height) != (cam.width, cam.height) {
        return Err(Error::DimensionMismatch(format!(
            "{} is {}x{}, camera {} is {}x{}",
            path.display(),
            img.width,
            img.height,
            cam.id,
            cam.width,
            cam.height
        )));
    }
    Ok(formats::from_u8(&img.data))
}

fn load_mask(path: &Path, cam: &Camera) -> Result<Vec<bool>> {
    let img = formats::read_png(path, 1)?;
    if (img.width, img.height) != (cam.width, cam.height) {
        return Err(Error::DimensionMismatch(format!(
            "mask {} is {}x{}, camera {} is {}x{}",
            path.display(),
            img.width,
            img.height,
            cam.id,
            cam.width,
            cam.height
        )));
    }
    Ok(img.data.iter().map(|&v| v >= MASK_THRESHOLD).collect())
}

fn load_depth(path: &Path, cam: &Camera) -> Result<Vec<f64>> {
    let (w, h, data) = formats::read_depth(path)?;
    if (w, h) != (cam.width, cam.height) {
        return Err(Error::DimensionMismatch(format!(
            "depth {} is {w}x{h}, camera {} is {}x{}",
            path.display(),
            cam.id,
            cam.width,
            cam.height
        )));
    }
    Ok(data.into_iter().map(f64::from).collect())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let records: Vec<CameraRecord> = formats::read_json(&dir.join("cameras.json"))?;
    let cameras = records.iter().map(CameraRecord::to_camera).collect::<Result<Vec<_>>>()?;
    let meta: DatasetMeta = formats::read_json(&dir.join("meta.json"))?;
    let find = |id: u32| cameras.iter().find(|c| c.id == id).ok_or(Error::UnknownCamera(id));
    if !meta.train.contains(&meta.reference_view_id) {
        return Err(Error::Dataset(format!("reference view {} is not in the training split", meta.reference_view_id)));
    }
    let mut views = Vec::with_capacity(meta.train.len());
    for &id in &meta.train {
        let cam = find(id)?;
        let is_reference = id == meta.reference_view_id;
        let inpainted_image = if is_reference {
            Some(load_rgb(&image_path(dir, "images_inpainted", id, "png"), cam)?)
        } else {
            None
        };
        views.push(TrainingView {
            camera_id: id,
            image: load_rgb(&image_path(dir, "images", id, "png"), cam)?,
            mask: load_mask(&image_path(dir, "masks", id, "png"), cam)?,
            mono_depth: load_depth(&image_path(dir, "depths", id, "raw"), cam)?,
            is_reference,
            inpainted_image,
        });
    }
    let mut test_views = Vec::with_capacity(meta.test.len());
    for &id in &meta.test {
        let cam = find(id)?;
        let mask_path = image_path(dir, "masks", id, "png");
        test_views.push(TestView {
            camera_id: id,
            image: load_rgb(&image_path(dir, "images", id, "png"), cam)?,
            mask: if mask_path.exists() { Some(load_mask(&mask_path, cam)?) } else { None },
        });
    }
    let dataset = SceneDataset {
        init_points: formats::read_ply(&dir.join("points3d.ply"))?,
        cameras,
        views,
        test_views,
        reference_view_id: meta.reference_view_id,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn rgb_image(cam: &Camera, data: &[f64]) -> Image8 {
    Image8 {
        width: cam.width,
        height: cam.height,
        channels: 3,
        data: formats::to_u8(data),
    }
}

fn mask_image(cam: &Camera, mask: &[bool]) -> Image8 {
    Image8 {
        width: cam.width,
        height: cam.height,
        channels: 1,
        data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

/// Writes the dataset layout. Colors are quantized to 8 bits and depth to `f32`.
pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let records: Vec<CameraRecord> = dataset.cameras.iter().map(CameraRecord::from).collect();
    formats::write_json(&dir.join("cameras.json"), &records)?;
    formats::write_json(&dir.join("meta.json"), &dataset.meta())?;
    formats::write_ply(&dir.join("points3d.ply"), &dataset.init_points)?;
    for v in &dataset.views {
        let cam = dataset.camera(v.camera_id)?;
        let id = v.camera_id;
        formats::write_png(&image_path(dir, "images", id, "png"), &rgb_image(cam, &v.image))?;
        formats::write_png(&image_path(dir, "masks", id, "png"), &mask_image(cam, &v.mask))?;
        let depth: Vec<f32> = v.mono_depth.iter().map(|&d| d as f32).collect();
        formats::write_depth(&image_path(dir, "depths", id, "raw"), cam.width, cam.height, &depth)?;
        if let Some(img) = &v.inpainted_image {
            formats::write_png(&image_path(dir, "images_inpainted", id, "png"), &rgb_image(cam, img))?;
        }
    }
    for t in &dataset.test_views {
        let cam = dataset.camera(t.camera_id)?;
        formats::write_png(&image_path(dir, "images", t.camera_id, "png"), &rgb_image(cam, &t.image))?;
        if let Some(m) = &t.mask {
            formats::write_png(&image_path(dir, "masks", t.camera_id, "png"), &mask_image(cam, m))?;
        }
    }
    Ok(())
}
