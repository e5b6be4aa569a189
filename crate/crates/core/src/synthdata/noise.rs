//! Visible-mask perturbations simulating an upstream segmenter.

use rand::Rng;

use crate::geometry::BinaryMask;
use crate::seed::{self, splitmix64};

/// Randomly shifts the mask by up to two pixels and then dilates, erodes, or
/// leaves it, with a disc of radius 1–3. Each step is skipped if it would
/// empty a nonempty mask.
pub fn perturb_vm(v: &BinaryMask, seed: u64) -> BinaryMask {
    let mut rng = seed::rng(seed);
    let shift = rng.random_bool(0.5);
    let dy = rng.random_range(-2i64..=2) as isize;
    let dx = rng.random_range(-2i64..=2) as isize;
    let morph = rng.random_range(0..3u8);
    let radius = rng.random_range(1..=3usize);

    let mut out = v.clone();
    if shift {
        let moved = out.translate(dy, dx);
        if !moved.is_empty() || out.is_empty() {
            out = moved;
        }
    }
    match morph {
        0 => out = out.dilate(radius),
        1 => {
            let eroded = out.erode(radius);
            if !eroded.is_empty() {
                out = eroded;
            }
        }
        _ => {}
    }
    out
}

/// The clean visible mask with probability 0.5, a perturbed one otherwise.
pub fn training_vm(visible: &BinaryMask, seed: u64) -> BinaryMask {
    mixed_vm(visible, seed, 0.5)
}

/// A perturbed mask with probability `perturb_probability`, the clean one otherwise.
pub fn mixed_vm(visible: &BinaryMask, seed: u64, perturb_probability: f64) -> BinaryMask {
    if is_clean(seed, perturb_probability) {
        visible.clone()
    } else {
        perturb_vm(visible, splitmix64(seed))
    }
}

fn is_clean(seed: u64, perturb_probability: f64) -> bool {
    seed::rng(seed).random_bool((1.0 - perturb_probability).clamp(0.0, 1.0))
}

/// Whether [`training_vm`] takes the clean branch for this seed.
pub fn training_vm_is_clean(seed: u64) -> bool {
    is_clean(seed, 0.5)
}
