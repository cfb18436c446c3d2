//! Image decoding, PDIMG fixtures and bilinear resizing.

use std::fs;
use std::path::Path;

use super::{DataError, Result};

pub const PDIMG_MAGIC: &[u8; 4] = b"PDIM";
const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";
const JPEG_MAGIC: &[u8; 3] = b"\xff\xd8\xff";

/// Decoded 8-bit image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Planar RGB image in `[0, 1]`, layout `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_raw(&self) -> RawImage {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                let v = self.data[c * h * w + i].clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
        RawImage {
            height: h,
            width: w,
            channels: 3,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Pdimg,
    Png,
    Jpeg,
}

/// Identifies the container from its leading bytes.
pub fn sniff(bytes: &[u8]) -> Option<Format> {
    if bytes.starts_with(PDIMG_MAGIC) {
        Some(Format::Pdimg)
    } else if bytes.starts_with(PNG_MAGIC) {
        Some(Format::Png)
    } else if bytes.starts_with(JPEG_MAGIC) {
        Some(Format::Jpeg)
    } else {
        None
    }
}

pub fn decode_pdimg(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    if bytes.len() < 16 || !bytes.starts_with(PDIMG_MAGIC) {
        return Err("truncated PDIMG header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(4), word(8), word(12));
    if height == 0 || width == 0 || !matches!(channels, 1 | 3 | 4) {
        return Err(format!("unsupported PDIMG geometry {height}x{width}x{channels}"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or("PDIMG dimensions overflow")?;
    let body = &bytes[16..];
    if body.len() != n {
        return Err(format!("PDIMG body has {} bytes, expected {n}", body.len()));
    }
    Ok(RawImage {
        height,
        width,
        channels,
        data: body.to_vec(),
    })
}

pub fn encode_pdimg(img: &RawImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len());
    out.extend_from_slice(PDIMG_MAGIC);
    for v in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&img.data);
    out
}

fn decode_with_image_crate(bytes: &[u8], format: image::ImageFormat) -> std::result::Result<RawImage, String> {
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    Ok(RawImage {
        height: rgb.height() as usize,
        width: rgb.width() as usize,
        channels: 3,
        data: rgb.into_raw(),
    })
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<RawImage> {
    let failure = |reason: String| DataError::DecodeFailure {
        path: path.to_path_buf(),
        reason,
    };
    match sniff(bytes) {
        Some(Format::Pdimg) => decode_pdimg(bytes).map_err(failure),
        Some(Format::Png) => decode_with_image_crate(bytes, image::ImageFormat::Png).map_err(failure),
        #[cfg(feature = "jpeg")]
        Some(Format::Jpeg) => decode_with_image_crate(bytes, image::ImageFormat::Jpeg).map_err(failure),
        _ => Err(DataError::UnsupportedFormat {
            path: path.to_path_buf(),
        }),
    }
}

pub fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(path, &bytes)
}

/// Converts to planar RGB in `[0, 1]`. Grey is replicated, alpha dropped.
pub fn to_planar_rgb(raw: &RawImage) -> Image {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let px = &raw.data[i * c..(i + 1) * c];
        for ch in 0..3 {
            let v = if c == 1 { px[0] } else { px[ch] };
            data[ch * h * w + i] = v as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Bilinear resize with half-pixel centers and edge clamping. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(img.height, height);
    let xs = axis(img.width, width);
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let p = img.plane(c);
        let at = |y: usize, x: usize| p[y * img.width + x];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    Image::new(height, width, data)
}

/// Decodes, converts to RGB, resizes and scales into `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Image> {
    let raw = read_raw(path)?;
    Ok(resize_bilinear(&to_planar_rgb(&raw), height, width))
}
