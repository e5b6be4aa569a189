//! Binary masks and the geometry derived from them.

mod distance;

pub use distance::{edt, pool_to_grid, sdf, squared_distance_to, DistanceMap, SdfField};

use crate::error::{GraspError, Result};

/// Row-major boolean grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GraspError::Invalid(
                "mask dimensions must be positive".into(),
            ));
        }
        if bits.len() != height * width {
            return Err(GraspError::dim(
                "BinaryMask::new",
                &[height, width],
                &[bits.len()],
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Out-of-range coordinates read as `false`.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.get(row as usize, col as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(GraspError::dim(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    fn combine(
        &self,
        other: &BinaryMask,
        op: &'static str,
        f: impl Fn(bool, bool) -> bool,
    ) -> Result<Self> {
        self.check_dims(other, op)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.combine(other, "mask_union", |a, b| a || b)
    }

    /// `self ∖ other`.
    pub fn diff(&self, other: &BinaryMask) -> Result<Self> {
        self.combine(other, "mask_diff", |a, b| a && !b)
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<Self> {
        self.combine(other, "mask_intersect", |a, b| a && b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_dims(other, "is_subset_of")?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// Shifts content by `(dy, dx)`; pixels leaving the grid are dropped.
    pub fn translate(&self, dy: isize, dx: isize) -> Self {
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            self.get_signed(r as isize - dy, c as isize - dx)
        })
    }

    /// Morphological dilation by a disc of the given radius.
    pub fn dilate(&self, radius: usize) -> Self {
        let offsets = disc_offsets(radius);
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            offsets
                .iter()
                .any(|&(dy, dx)| self.get_signed(r as isize + dy, c as isize + dx))
        })
    }

    /// Morphological erosion by a disc; the region outside the grid counts as background.
    pub fn erode(&self, radius: usize) -> Self {
        let offsets = disc_offsets(radius);
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            offsets
                .iter()
                .all(|&(dy, dx)| self.get_signed(r as isize + dy, c as isize + dx))
        })
    }
}

/// Integer offsets `(dy, dx)` with `dy² + dx² ≤ radius²`.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Intersection over union. Two empty masks score 1, exactly one empty scores 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
