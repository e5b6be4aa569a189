//! Exact Euclidean distance transform (separable lower-envelope method) and
//! the signed distance field built on it.
//!
//! Squared distances are kept as integers throughout; parabola intersections
//! are compared as exact rationals, so the result is exact rather than a
//! chamfer approximation. Distances are measured between pixel centers, to the
//! nearest pixel of the opposite class, so the smallest nonzero magnitude is 1.

use std::fmt::Write as _;

use super::BinaryMask;
use crate::error::{GraspError, Result};

/// Lower envelope of parabolas `f[p] + (q − p)²` over the finite entries of `f`.
fn envelope_1d(f: &[Option<u64>], out: &mut [Option<u64>]) {
    let n = f.len();
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    // boundaries[k] separates sites[k] and sites[k + 1], as numerator/denominator.
    let mut boundaries: Vec<(i128, i128)> = Vec::with_capacity(n);

    let height = |p: usize| f[p].map(|v| v as i128 + (p * p) as i128);
    // a/b <= c/d with positive denominators.
    let le = |(a, b): (i128, i128), (c, d): (i128, i128)| a * d <= c * b;

    for q in 0..n {
        let Some(hq) = height(q) else { continue };
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                break;
            };
            let hp = height(p).expect("sites are finite");
            let s = (hq - hp, 2 * (q as i128 - p as i128));
            if let Some(&last) = boundaries.last() {
                if le(s, last) {
                    sites.pop();
                    boundaries.pop();
                    continue;
                }
            }
            boundaries.push(s);
            sites.push(q);
            break;
        }
    }

    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < boundaries.len() && boundaries[k].0 < (q as i128) * boundaries[k].1 {
            k += 1;
        }
        let p = sites[k];
        let d = q.abs_diff(p) as u64;
        *o = Some(f[p].expect("sites are finite") + d * d);
    }
}

/// Exact squared distance from every pixel to the nearest pixel whose value is
/// `class`; `None` everywhere when no such pixel exists.
pub fn squared_distance_to(mask: &BinaryMask, class: bool) -> Vec<Option<u64>> {
    let (h, w) = mask.dims();
    let mut cols = vec![None; h * w];
    let mut f = vec![None; h];
    let mut g = vec![None; h];
    for c in 0..w {
        for (r, v) in f.iter_mut().enumerate() {
            *v = (mask.get(r, c) == class).then_some(0);
        }
        envelope_1d(&f, &mut g);
        for r in 0..h {
            cols[r * w + c] = g[r];
        }
    }
    let mut out = vec![None; h * w];
    for r in 0..h {
        envelope_1d(&cols[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
    }
    out
}

fn diagonal(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

/// Per-pixel distance to the nearest opposite-class pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    /// Exact squared distances; `None` where the opposite class is absent.
    pub squared: Vec<Option<u64>>,
    pub diagonal: f64,
}

impl DistanceMap {
    /// Absent opposite class maps to the image diagonal.
    pub fn distance(&self, index: usize) -> f64 {
        self.squared[index].map_or(self.diagonal, |s| (s as f64).sqrt())
    }

    pub fn distances(&self) -> Vec<f64> {
        (0..self.squared.len()).map(|i| self.distance(i)).collect()
    }
}

pub fn edt(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = mask.dims();
    let to_true = squared_distance_to(mask, true);
    let to_false = squared_distance_to(mask, false);
    let squared = mask
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &b)| if b { to_false[i] } else { to_true[i] })
        .collect();
    DistanceMap {
        height: h,
        width: w,
        squared,
        diagonal: diagonal(h, w),
    }
}

/// Signed distance field of a visible mask: positive outside, negative inside.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub diagonal: f64,
}

impl SdfField {
    /// Values divided by the image diagonal, in `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.diagonal).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            let row = &self.values[r * self.width..(r + 1) * self.width];
            for (c, v) in row.iter().enumerate() {
                if c > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Maps normalized values from `[-1, 1]` onto `[0, 255]`.
    pub fn heatmap(&self) -> Vec<u8> {
        self.normalized()
            .iter()
            .map(|v| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

pub fn sdf(mask: &BinaryMask) -> SdfField {
    let dist = edt(mask);
    let values = mask
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            let d = dist.distance(i);
            if inside {
                -d
            } else {
                d
            }
        })
        .collect();
    SdfField {
        height: dist.height,
        width: dist.width,
        values,
        diagonal: dist.diagonal,
    }
}

/// Mean of `values` (an `height×width` grid) within each cell of a
/// `grid_h×grid_w` partition, row-major over cells.
pub fn pool_mean(
    values: &[f64],
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<f64>> {
    if grid_h == 0 || grid_w == 0 || !height.is_multiple_of(grid_h) || !width.is_multiple_of(grid_w)
    {
        return Err(GraspError::Config(format!(
            "{height}×{width} field does not divide into a {grid_h}×{grid_w} grid"
        )));
    }
    let (ch, cw) = (height / grid_h, width / grid_w);
    let area = (ch * cw) as f64;
    let mut out = vec![0.0; grid_h * grid_w];
    for (gi, o) in out.iter_mut().enumerate() {
        let (gr, gc) = (gi / grid_w, gi % grid_w);
        let mut total = 0.0;
        for r in gr * ch..(gr + 1) * ch {
            for c in gc * cw..(gc + 1) * cw {
                total += values[r * width + c];
            }
        }
        *o = total / area;
    }
    Ok(out)
}

/// Per-token normalized SDF: cell means of the normalized field.
pub fn pool_to_grid(field: &SdfField, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    pool_mean(
        &field.normalized(),
        field.height,
        field.width,
        grid_h,
        grid_w,
    )
}
