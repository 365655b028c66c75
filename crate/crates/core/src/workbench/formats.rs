//! On-disk formats: PNG images and masks, raw depth and tensor buffers, ASCII PLY.
//! All binary data is little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::ScenePoint;

pub const DEPTH_MAGIC: &[u8; 4] = b"GSDM";
pub const TENSOR_MAGIC: &[u8; 4] = b"GSDT";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// 8-bit image with 1 (gray) or 3 (RGB) channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Reads any 8-bit or 16-bit PNG and converts it to `channels` (1 or 3) channels;
/// alpha is dropped and 16-bit samples are reduced to 8 bits.
pub fn read_png(path: &Path, channels: usize) -> Result<Image8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let src_channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * src_channels];
        for px in row.chunks(src_channels) {
            let rgb = match src_channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            match channels {
                1 if src_channels <= 2 => data.push(px[0]),
                1 => data.push(((rgb[0] as u32 + rgb[1] as u32 + rgb[2] as u32 + 1) / 3) as u8),
                _ => data.extend_from_slice(&rgb),
            }
        }
    }
    Ok(Image8 {
        width: info.width,
        height: info.height,
        channels,
        data,
    })
}

pub fn write_png(path: &Path, image: &Image8) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::format(path, format!("cannot write {c}-channel PNG"))),
    };
    let mut enc = png::Encoder::new(create(path)?, image.width, image.height);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&image.data).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// 16-bit grayscale PNG, used for depth visualizations.
pub fn write_png16(path: &Path, width: u32, height: u32, data: &[u16]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Quantizes `[0,1]` values to 8 bits.
pub fn to_u8(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn from_u8(values: &[u8]) -> Vec<f64> {
    values.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Depth map: `"GSDM"`, u32 width, u32 height, u32 reserved, then `f32` samples row-major.
pub fn write_depth(path: &Path, width: u32, height: u32, depth: &[f32]) -> Result<()> {
    if depth.len() != width as usize * height as usize {
        return Err(Error::format(path, format!("{} samples for a {width}x{height} map", depth.len())));
    }
    let mut f = create(path)?;
    let mut bytes = Vec::with_capacity(16 + 4 * depth.len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&width.to_le_bytes());
    bytes.extend_from_slice(&height.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    depth.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = read_all(path)?;
    if bytes.len() < 16 || &bytes[0..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing GSDM depth header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (w, h) = (word(4), word(8));
    let n = w as usize * h as usize;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(path, format!("expected {} bytes for a {w}x{h} depth map, found {}", 16 + 4 * n, bytes.len())));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((w, h, data))
}

/// Tensor: `"GSDT"`, u32 rank, `rank` u32 dimensions, then `f64` values row-major.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(Error::format(path, format!("{} values for dimensions {dims:?}", data.len())));
    }
    let mut bytes = Vec::with_capacity(8 + 4 * dims.len() + 8 * data.len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format(path, "dimension exceeds u32"))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    let mut f = create(path)?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = read_all(path)?;
    if bytes.len() < 8 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "missing GSDT tensor header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let rank = word(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated tensor header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + 8 * count {
        return Err(Error::format(path, format!("expected {} bytes for dimensions {dims:?}, found {}", header + 8 * count, bytes.len())));
    }
    let data = bytes[header..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims, data))
}

/// ASCII PLY with `x y z` and optional `red green blue` vertex properties.
pub fn write_ply(path: &Path, points: &[ScenePoint]) -> Result<()> {
    let colored = points.iter().all(|p| p.color.is_some()) && !points.is_empty();
    let mut f = create(path)?;
    let mut s = format!("ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n", points.len());
    if colored {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for p in points {
        let v = p.position;
        // `{:?}` prints the shortest representation that parses back to the same f64.
        s.push_str(&format!("{:?} {:?} {:?}", v.x, v.y, v.z));
        if let (true, Some(c)) = (colored, p.color) {
            s.push_str(&format!(" {} {} {}", c[0], c[1], c[2]));
        }
        s.push('\n');
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<ScenePoint>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |msg: String| Error::format(path, msg);
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(|e| Error::io(path, e)) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?.ok_or_else(|| bad("header not terminated".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => return Err(bad(format!("unsupported PLY format {fmt}"))),
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                }
            }
            ["property", "list", ..] => {}
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex element lacks x, y, z".into())),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = next()?.ok_or_else(|| bad(format!("expected {count} vertices, found {i}")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(bad(format!("vertex {i} has {} of {} properties", vals.len(), props.len())));
        }
        let num = |j: usize| vals[j].parse::<f64>().map_err(|_| bad(format!("vertex {i}: bad number {}", vals[j])));
        let color = match rgb {
            Some((r, g, b)) => {
                let byte = |j: usize| vals[j].parse::<u8>().map_err(|_| bad(format!("vertex {i}: bad color {}", vals[j])));
                Some([byte(r)?, byte(g)?, byte(b)?])
            }
            None => None,
        };
        points.push(ScenePoint {
            position: Vector3::new(num(xi)?, num(yi)?, num(zi)?),
            color,
        });
    }
    Ok(points)
}

/// Reads a whole file as UTF-8 JSON.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::format(path, e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
