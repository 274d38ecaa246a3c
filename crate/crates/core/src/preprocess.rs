//! Image decoding, RGB conversion, fixed-size resize and channel normalization.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Network input resolution.
pub const INPUT_SIDE: usize = 224;

/// ImageNet-1k channel statistics used by the published backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("image has a zero dimension ({height}x{width})")]
    ZeroDimensionImage { height: usize, width: usize },
    #[error("std component {channel} is zero")]
    ZeroStd { channel: usize },
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// Height x width x 3 image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "buffer does not match shape");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width * 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.index(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = self.index(y, x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// (min, max) over all values.
    pub fn value_range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f32 {
        assert!(self.is_shape(other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Planar channel-first copy, as consumed by the backbones.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[plane + p] = px[1];
            out[2 * plane + p] = px[2];
        }
        out
    }

    /// Quantize to 8-bit RGB (round to nearest, clamped).
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, PreprocessError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| PreprocessError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }
}

pub fn decode_image(path: &Path) -> Result<DynamicImage, PreprocessError> {
    image::ImageReader::open(path)
        .map_err(|e| undecodable(path, e))?
        .with_guessed_format()
        .map_err(|e| undecodable(path, e))?
        .decode()
        .map_err(|e| undecodable(path, e))
}

fn undecodable(path: &Path, e: impl std::fmt::Display) -> PreprocessError {
    PreprocessError::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Convert any decoded layout to 3-channel values in [0,1].
///
/// Gray is replicated across channels; alpha is composited over black.
pub fn convert_rgb(raw: &DynamicImage) -> Tensor3 {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    if raw.color().has_alpha() {
        let rgba = raw.to_rgba32f();
        let mut data = Vec::with_capacity(w * h * 3);
        for px in rgba.pixels() {
            let a = px[3];
            data.extend_from_slice(&[px[0] * a, px[1] * a, px[2] * a]);
        }
        Tensor3::new(h, w, data)
    } else {
        Tensor3::new(h, w, raw.to_rgb32f().into_raw())
    }
}

/// Plain bilinear resize to `side x side` (half-pixel centers, edge clamp).
/// Aspect ratio is not preserved.
pub fn resize_fixed(img: &Tensor3, side: usize) -> Result<Tensor3, PreprocessError> {
    resize_bilinear(img, side, side)
}

pub fn resize_bilinear(
    img: &Tensor3,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor3, PreprocessError> {
    if img.height == 0 || img.width == 0 || out_h == 0 || out_w == 0 {
        return Err(PreprocessError::ZeroDimensionImage {
            height: img.height,
            width: img.width,
        });
    }
    if img.is_shape(out_h, out_w) {
        return Ok(img.clone());
    }
    let sy = img.height as f32 / out_h as f32;
    let sx = img.width as f32 / out_w as f32;
    let xs: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|x| axis_taps((x as f32 + 0.5) * sx - 0.5, img.width))
        .collect();
    let mut out = Tensor3::zeros(out_h, out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis_taps((y as f32 + 0.5) * sy - 0.5, img.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let a = img.pixel(y0, x0);
            let b = img.pixel(y0, x1);
            let c = img.pixel(y1, x0);
            let d = img.pixel(y1, x1);
            let mut px = [0.0; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = c[k] + (d[k] - c[k]) * fx;
                px[k] = top + (bottom - top) * fy;
            }
            out.set_pixel(y, x, px);
        }
    }
    Ok(out)
}

fn axis_taps(src: f32, len: usize) -> (usize, usize, f32) {
    let src = src.clamp(0.0, (len - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f32)
}

/// Channel-wise `(v - mean) / std`.
pub fn normalize(img: &Tensor3, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor3, PreprocessError> {
    if let Some(channel) = std.iter().position(|&s| s == 0.0) {
        return Err(PreprocessError::ZeroStd { channel });
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// Per-channel statistics applied before the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Decode, convert and resize one file to the network resolution.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor3, PreprocessError> {
    let rgb = convert_rgb(&decode_image(path)?);
    resize_fixed(&rgb, side)
}
