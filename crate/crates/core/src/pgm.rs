//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{GraspError, Result};
use crate::geometry::BinaryMask;

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(GraspError::dim(
                "GrayImage::new",
                &[height, width],
                &[data.len()],
            ));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    /// Intensity in `[0, 1]`.
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col] as f64 / 255.0
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

pub fn mask_to_image(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        height: mask.height(),
        width: mask.width(),
        data: mask
            .bits()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect(),
    }
}

/// Only 0 and 255 are accepted.
pub fn image_to_mask(image: &GrayImage) -> Result<BinaryMask> {
    let bits = image
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(other),
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|v| GraspError::Invalid(format!("mask pixel value {v} is neither 0 nor 255")))?;
    BinaryMask::new(image.height, image.width, bits)
}

pub fn encode(image: &GrayImage, comment: Option<&str>) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.data.len() + 64);
    out.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n255\n", image.width, image.height).as_bytes());
    out.extend_from_slice(&image.data);
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;

    fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
        while *pos < bytes.len() {
            match bytes[*pos] {
                b' ' | b'\t' | b'\n' | b'\r' => *pos += 1,
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
        skip_ws_and_comments(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    pos += 2;
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    pos += 1;
    let n = width * height;
    if bytes.len() - pos != n {
        return Err(format!(
            "expected {n} raster bytes, found {}",
            bytes.len() - pos
        ));
    }
    GrayImage::new(height, width, bytes[pos..].to_vec()).map_err(|e| e.to_string())
}

pub fn write(path: &Path, image: &GrayImage, comment: Option<&str>) -> Result<()> {
    fs::write(path, encode(image, comment)).map_err(|e| GraspError::io(path, e))
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| GraspError::io(path, e))?;
    decode(&bytes).map_err(|reason| GraspError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = read(path)?;
    image_to_mask(&img).map_err(|e| GraspError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
