//! Procedural occlusion scenes: a few parametric shapes stacked in a random
//! depth order, each yielding one amodal instance.

mod io;
mod noise;

pub use io::{
    read_dataset, write_dataset, Dataset, DatasetManifest, ManifestEntry, Split, DATASET_VERSION,
};
pub use noise::{mixed_vm, perturb_vm, training_vm, training_vm_is_clean};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GraspError, Result};
use crate::geometry::BinaryMask;
use crate::pgm::GrayImage;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Rectangle,
    Ellipse,
    Triangle,
    LShape,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Rectangle,
        ShapeClass::Ellipse,
        ShapeClass::Triangle,
        ShapeClass::LShape,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative frequency of each class, in [`ShapeClass::ALL`] order.
    pub class_weights: [f64; 4],
    /// Object half-extent range as a fraction of `size`.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Object centers fall in `[center_margin, 1 − center_margin]·size`.
    pub center_margin: f64,
    pub background: f64,
    pub pixel_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            min_objects: 2,
            max_objects: 4,
            class_weights: [1.0; 4],
            min_extent: 0.12,
            max_extent: 0.26,
            center_margin: 0.28,
            background: 0.1,
            pixel_noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects == 0 || self.min_objects == 0 {
            return Err(GraspError::Config("scene needs at least one object".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(GraspError::Config("min_objects exceeds max_objects".into()));
        }
        if self.size < 8 {
            return Err(GraspError::Config(format!(
                "image size {} too small",
                self.size
            )));
        }
        if self.class_weights.iter().any(|w| *w < 0.0)
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(GraspError::Config(
                "class weights must be nonnegative with positive sum".into(),
            ));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent) {
            return Err(GraspError::Config("invalid extent range".into()));
        }
        Ok(())
    }
}

/// One amodal instance: the scene image plus this object's masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    pub image: GrayImage,
    pub visible: BinaryMask,
    pub amodal: BinaryMask,
    pub occluded: BinaryMask,
    pub occ_ratio: f64,
    pub shape_class: ShapeClass,
    /// Seed of the scene this instance came from.
    pub seed: u64,
    /// Depth rank within the scene, 0 being nearest.
    pub depth: usize,
}

impl SceneInstance {
    /// Builds an instance from its image and masks, deriving `O = A ∖ V`.
    pub fn from_masks(
        image: GrayImage,
        visible: BinaryMask,
        amodal: BinaryMask,
        shape_class: ShapeClass,
        seed: u64,
        depth: usize,
    ) -> Result<Self> {
        if !visible.is_subset_of(&amodal)? {
            return Err(GraspError::Integrity(
                "visible mask is not contained in amodal mask".into(),
            ));
        }
        if (image.height, image.width) != amodal.dims() {
            return Err(GraspError::dim(
                "SceneInstance",
                &[image.height, image.width],
                &[amodal.height(), amodal.width()],
            ));
        }
        let occluded = amodal.diff(&visible)?;
        let occ_ratio = occlusion_ratio(&occluded, &amodal);
        Ok(SceneInstance {
            image,
            visible,
            amodal,
            occluded,
            occ_ratio,
            shape_class,
            seed,
            depth,
        })
    }
}

/// `|O| / |A|`, zero for an empty amodal mask.
pub fn occlusion_ratio(occluded: &BinaryMask, amodal: &BinaryMask) -> f64 {
    let a = amodal.count();
    if a == 0 {
        0.0
    } else {
        occluded.count() as f64 / a as f64
    }
}

#[derive(Clone, Debug)]
struct Shape {
    class: ShapeClass,
    cy: f64,
    cx: f64,
    hy: f64,
    hx: f64,
    orientation: u8,
    thickness: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (u, v) = ((y - self.cy) / self.hy, (x - self.cx) / self.hx);
        match self.class {
            ShapeClass::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeClass::Ellipse => u * u + v * v <= 1.0,
            ShapeClass::Triangle => {
                // apex on one side of the box, base on the opposite side
                let (along, across) = match self.orientation {
                    0 => (u, v),
                    1 => (-u, v),
                    2 => (v, u),
                    _ => (-v, u),
                };
                (-1.0..=1.0).contains(&along) && across.abs() <= (along + 1.0) * 0.5
            }
            ShapeClass::LShape => {
                if u.abs() > 1.0 || v.abs() > 1.0 {
                    return false;
                }
                let (fu, fv) = match self.orientation {
                    0 => (u, v),
                    1 => (u, -v),
                    2 => (-u, v),
                    _ => (-u, -v),
                };
                let band = 2.0 * self.thickness - 1.0;
                fv <= band || fu >= -band
            }
        }
    }

    fn render(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |r, c| {
            self.contains(r as f64 + 0.5, c as f64 + 0.5)
        })
    }
}

fn sample_class(rng: &mut impl Rng, weights: &[f64; 4]) -> ShapeClass {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (class, &w) in ShapeClass::ALL.iter().zip(weights) {
        if t < w {
            return *class;
        }
        t -= w;
    }
    ShapeClass::LShape
}

/// Picks an intensity at least `gap` away from every value in `taken`.
fn distinct_intensity(rng: &mut impl Rng, taken: &[f64], gap: f64) -> f64 {
    for _ in 0..64 {
        let v = rng.random_range(0.35..0.95);
        if taken.iter().all(|t| (t - v).abs() >= gap) {
            return v;
        }
    }
    rng.random_range(0.35..0.95)
}

/// Renders one scene; deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Vec<SceneInstance>> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let size = config.size;
    let s = size as f64;
    let count = rng.random_range(config.min_objects..=config.max_objects);

    let mut shapes = Vec::with_capacity(count);
    let mut intensities = vec![config.background];
    for _ in 0..count {
        let class = sample_class(&mut rng, &config.class_weights);
        let extent = rng.random_range(config.min_extent..=config.max_extent) * s;
        let aspect = rng.random_range(0.6..=1.0);
        let (hy, hx) = if rng.random_bool(0.5) {
            (extent, extent * aspect)
        } else {
            (extent * aspect, extent)
        };
        let lo = config.center_margin * s;
        let hi = (1.0 - config.center_margin) * s;
        shapes.push(Shape {
            class,
            cy: rng.random_range(lo..=hi),
            cx: rng.random_range(lo..=hi),
            hy,
            hx,
            orientation: rng.random_range(0..4),
            thickness: rng.random_range(0.35..=0.5),
        });
        intensities.push(distinct_intensity(&mut rng, &intensities, 0.12));
    }

    // depth[k] is object k's rank, 0 nearest
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut depth = vec![0; count];
    for (rank, &obj) in order.iter().enumerate() {
        depth[obj] = rank;
    }

    let silhouettes: Vec<BinaryMask> = shapes.iter().map(|sh| sh.render(size)).collect();

    let noise = Normal::new(0.0, config.pixel_noise.max(0.0))
        .map_err(|e| GraspError::Config(format!("pixel noise: {e}")))?;
    let mut pixels = Vec::with_capacity(size * size);
    for i in 0..size * size {
        let (r, c) = (i / size, i % size);
        let front = (0..count)
            .filter(|&k| silhouettes[k].get(r, c))
            .min_by_key(|&k| depth[k]);
        let base = front.map_or(config.background, |k| intensities[k + 1]);
        let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
        pixels.push((v * 255.0).round() as u8);
    }
    let image = GrayImage::new(size, size, pixels)?;

    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut covered = BinaryMask::empty(size, size);
        for j in (0..count).filter(|&j| depth[j] < depth[k]) {
            covered = covered.union(&silhouettes[j])?;
        }
        let visible = silhouettes[k].diff(&covered)?;
        out.push(SceneInstance::from_masks(
            image.clone(),
            visible,
            silhouettes[k].clone(),
            shapes[k].class,
            seed,
            depth[k],
        )?);
    }
    Ok(out)
}

/// Scenes `base_seed + i` for `i < scenes`, flattened in scene order.
/// Instances whose amodal mask is empty (object entirely off-canvas) are dropped.
pub fn generate_dataset(
    base_seed: u64,
    scenes: usize,
    config: &SceneConfig,
) -> Result<Vec<SceneInstance>> {
    config.validate()?;
    let per_scene: Vec<Vec<SceneInstance>> = (0..scenes as u64)
        .into_par_iter()
        .map(|i| generate_scene(base_seed.wrapping_add(i), config))
        .collect::<Result<_>>()?;
    Ok(per_scene
        .into_iter()
        .flatten()
        .filter(|inst| !inst.amodal.is_empty())
        .collect())
}
