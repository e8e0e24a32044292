//! Fixed-size RGB images in planar layout with values in [-1, 1].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AplError, Result};

pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIZE * SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Identity { id: u32, variation: u64 },
    Scene { id: u32, variation: u64 },
    Anonymous { key: u64, variation: u64 },
    Generated { seed: u64 },
    Blank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// `3 × 32 × 32`, channel-major.
    pub data: Vec<f32>,
    pub origin: Origin,
}

impl Image {
    pub fn filled(rgb: [f32; 3], origin: Origin) -> Self {
        let mut data = vec![0.0; PIXELS];
        for (c, v) in rgb.iter().enumerate() {
            data[c * SIZE * SIZE..(c + 1) * SIZE * SIZE].iter_mut().for_each(|p| *p = *v);
        }
        Self { data, origin }
    }

    pub fn from_data(data: Vec<f32>, origin: Origin) -> Result<Self> {
        if data.len() != PIXELS {
            return Err(AplError::Shape(format!("image needs {PIXELS} values, got {}", data.len())));
        }
        Ok(Self { data, origin })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * SIZE + y) * SIZE + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * SIZE + y) * SIZE + x] = v;
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.set(c, y, x, *v);
        }
    }

    /// Values of the square `[lo, hi)²` region, channel-major.
    pub fn region(&self, lo: usize, hi: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(CHANNELS * (hi - lo) * (hi - lo));
        for c in 0..CHANNELS {
            for y in lo..hi {
                for x in lo..hi {
                    out.push(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SIZE * SIZE * 3);
        for y in 0..SIZE {
            for x in 0..SIZE {
                for c in 0..CHANNELS {
                    out.push(to_u8(self.get(c, y, x)));
                }
            }
        }
        out
    }
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Stack images into one `batch × 3 × 32 × 32` buffer.
pub fn stack(images: &[&Image]) -> Vec<f32> {
    let mut out = Vec::with_capacity(images.len() * PIXELS);
    for im in images {
        out.extend_from_slice(&im.data);
    }
    out
}

/// Write an RGB8 PNG, optionally tagging it with text chunks.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(&str, &str)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let w = std::io::BufWriter::new(file);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string())
            .map_err(|e| AplError::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    let mut writer = enc
        .write_header()
        .map_err(|e| AplError::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
    writer
        .write_image_data(rgb)
        .map_err(|e| AplError::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
    writer.finish().map_err(|e| AplError::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

/// Grid of images, `rows × cols`, with a one-pixel gutter. Missing cells stay
/// black.
pub fn contact_sheet(path: &Path, rows: &[Vec<Image>], text: &[(&str, &str)]) -> Result<()> {
    let nrows = rows.len();
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(AplError::EmptyDataset("contact sheet without images".into()));
    }
    let cell = SIZE + 1;
    let (w, h) = (ncols * cell + 1, nrows * cell + 1);
    let mut buf = vec![0u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let rgb = im.to_rgb8();
            for y in 0..SIZE {
                let dst = ((r * cell + 1 + y) * w + c * cell + 1) * 3;
                buf[dst..dst + SIZE * 3].copy_from_slice(&rgb[y * SIZE * 3..(y + 1) * SIZE * 3]);
            }
        }
    }
    write_png(path, w, h, &buf, text)
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
