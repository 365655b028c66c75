//! Checkpoint directory: `manifest.json` plus one raw tensor file per parameter
//! group, optimizer moment and densification statistic.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{params, Moments, Optimizer, TrainConfig, Trainer, PARAM_GROUPS};
use crate::error::{Error, Result};
use crate::regularizer::AttentionParams;
use crate::scene::{Anchors, DecoderBank, DensifyStats, Mlp, Scene};
use crate::workbench::dataset::CameraRecord;
use crate::workbench::formats::{read_json, read_tensor, write_json, write_tensor};

pub const CHECKPOINT_FORMAT: &str = "splat-inpaint-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

/// Generator state: seed, stream and position in the keystream (in 32-bit words).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: usize,
    config: TrainConfig,
    voxel_size: f64,
    anchors: usize,
    cameras: Vec<CameraRecord>,
    rng: RngState,
    view_order: Vec<usize>,
    view_cursor: usize,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn group_dims(scene: &Scene, att: &AttentionParams) -> Vec<Vec<usize>> {
    let a = &scene.anchors;
    let n = a.len();
    let mlp = |m: &Mlp| [vec![m.hidden, m.inputs], vec![m.hidden], vec![m.outputs, m.hidden], vec![m.outputs]];
    let mut dims = vec![vec![n, 3], vec![n, a.feature_dim], vec![n, 3], vec![n, a.offsets_per_anchor, 3]];
    let d = &scene.decoders;
    for m in [&d.opacity, &d.color, &d.shape] {
        dims.extend(mlp(m));
    }
    dims.extend(std::iter::repeat_n(vec![att.dim, att.dim], 3));
    dims
}

fn stats_tensors(stats: &DensifyStats) -> [(&'static str, Vec<usize>, Vec<f64>); 4] {
    let k = stats.offsets_per_anchor;
    let n = stats.anchors();
    let f = |v: &[u32]| v.iter().map(|&c| c as f64).collect::<Vec<f64>>();
    [
        ("densify.grad_sum", vec![n, k], stats.grad_sum.clone()),
        ("densify.grad_count", vec![n, k], f(&stats.grad_count)),
        ("densify.opacity_sum", vec![n], stats.opacity_sum.clone()),
        ("densify.opacity_count", vec![n], f(&stats.opacity_count)),
    ]
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut put = |name: String, dims: Vec<usize>, data: &[f64]| -> Result<()> {
        let file = format!("{name}.raw");
        write_tensor(&dir.join(&file), &dims, data)?;
        tensors.push(TensorEntry { name, file, dims });
        Ok(())
    };
    let dims = group_dims(&trainer.scene, &trainer.attention);
    let values = params(&trainer.scene, &trainer.attention);
    for (i, name) in PARAM_GROUPS.iter().enumerate() {
        put(name.to_string(), dims[i].clone(), values[i])?;
        put(format!("adam_m.{name}"), dims[i].clone(), &trainer.optimizer.moments[i].m)?;
        put(format!("adam_v.{name}"), dims[i].clone(), &trainer.optimizer.moments[i].v)?;
    }
    for (name, dims, data) in stats_tensors(&trainer.stats) {
        put(name.to_string(), dims, &data)?;
    }
    let rng = &trainer.rng;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        step: trainer.step,
        config: trainer.config.clone(),
        voxel_size: trainer.scene.voxel_size,
        anchors: trainer.scene.anchor_count(),
        cameras: trainer.cameras.iter().map(CameraRecord::from).collect(),
        rng: RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        view_order: trainer.view_order.clone(),
        view_cursor: trainer.view_cursor,
        optimizer_step: trainer.optimizer.step,
        tensors,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&manifest_path, format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    manifest.config.validate()?;
    let load = |name: &str, want: &[usize]| -> Result<Vec<f64>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(&manifest_path, format!("tensor {name} not listed")))?;
        let path = dir.join(&entry.file);
        let (dims, data) = read_tensor(&path)?;
        if dims != want {
            return Err(Error::format(&path, format!("dimensions {dims:?}, expected {want:?}")));
        }
        Ok(data)
    };

    let sc = &manifest.config.scene;
    let (n, d, k, h) = (manifest.anchors, sc.feature_dim, sc.offsets_per_anchor, sc.hidden_width);
    let mut scene = Scene {
        config: sc.clone(),
        voxel_size: manifest.voxel_size,
        anchors: Anchors::new(d, k),
        decoders: DecoderBank::zeros(d, h, k),
    };
    scene.anchors.positions = vec![0.0; 3 * n];
    scene.anchors.features = vec![0.0; d * n];
    scene.anchors.offset_scales = vec![0.0; 3 * n];
    scene.anchors.offsets = vec![0.0; 3 * k * n];
    let mut attention = AttentionParams::identity(d);
    let dims = group_dims(&scene, &attention);
    let mut moments = Vec::with_capacity(PARAM_GROUPS.len());
    for (i, name) in PARAM_GROUPS.iter().enumerate() {
        *super::params_mut(&mut scene, &mut attention)[i] = load(name, &dims[i])?;
        moments.push(Moments {
            m: load(&format!("adam_m.{name}"), &dims[i])?,
            v: load(&format!("adam_v.{name}"), &dims[i])?,
        });
    }
    let counts = |v: Vec<f64>| v.into_iter().map(|c| c as u32).collect::<Vec<u32>>();
    let stats = DensifyStats {
        offsets_per_anchor: k,
        grad_sum: load("densify.grad_sum", &[n, k])?,
        grad_count: counts(load("densify.grad_count", &[n, k])?),
        opacity_sum: load("densify.opacity_sum", &[n])?,
        opacity_count: counts(load("densify.opacity_count", &[n])?),
    };
    let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(manifest.rng.seed);
    rng.set_stream(manifest.rng.stream);
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::format(&manifest_path, "bad generator position"))?;
    rng.set_word_pos(word_pos);
    let cameras = manifest.cameras.iter().map(CameraRecord::to_camera).collect::<Result<Vec<_>>>()?;

    Ok(Trainer {
        config: manifest.config,
        step: manifest.step,
        scene,
        attention,
        optimizer: Optimizer {
            step: manifest.optimizer_step,
            moments,
        },
        cameras,
        rng,
        view_order: manifest.view_order,
        view_cursor: manifest.view_cursor,
        stats,
    })
}
