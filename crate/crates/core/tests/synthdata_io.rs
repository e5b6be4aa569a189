mod common;

use std::fs;
use std::path::Path;

use common::{mini_data, mini_scene};
use grasp::geometry::{iou, BinaryMask};
use grasp::seed;
use grasp::synthdata::{
    generate_dataset, perturb_vm, read_dataset, write_dataset, Dataset, SceneConfig, Split,
};
use grasp::GraspError;
use rand::Rng;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn dataset_round_trips_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = Dataset::new(mini_data(5, 6), Split::Test, 5, 6, mini_scene());
    write_dataset(tmp.path(), &data).unwrap();
    let back = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn generation_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let data = Dataset::new(mini_data(77, 5), Split::Train, 77, 5, mini_scene());
        write_dataset(d.path(), &data).unwrap();
    }
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn missing_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_dataset(tmp.path()),
        Err(GraspError::ManifestMissing(_))
    ));
}

#[test]
fn tampered_ratio_fails_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = Dataset::new(mini_data(6, 3), Split::Train, 6, 3, mini_scene());
    write_dataset(tmp.path(), &data).unwrap();
    let path = tmp.path().join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let r = manifest["instances"][0]["occ_ratio"].as_f64().unwrap();
    manifest["instances"][0]["occ_ratio"] = serde_json::json!(r + 0.01);
    fs::write(&path, manifest.to_string()).unwrap();
    assert!(matches!(
        read_dataset(tmp.path()),
        Err(GraspError::Integrity(_))
    ));
}

#[test]
fn swapped_mask_fails_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = Dataset::new(mini_data(8, 4), Split::Train, 8, 4, mini_scene());
    write_dataset(tmp.path(), &data).unwrap();
    let full = grasp::pgm::mask_to_image(&BinaryMask::full(16, 16));
    grasp::pgm::write(&tmp.path().join("vis_000000.pgm"), &full, None).unwrap();
    assert!(matches!(
        read_dataset(tmp.path()),
        Err(GraspError::Integrity(_))
    ));
}

/// Squared distance from `(r, c)` to the nearest pixel satisfying `inside`
/// within the square window of half-width `reach`.
fn nearest_sq(
    reach: isize,
    r: isize,
    c: isize,
    inside: &dyn Fn(isize, isize) -> bool,
) -> Option<isize> {
    let mut best = None;
    for y in r - reach..=r + reach {
        for x in c - reach..=c + reach {
            if inside(y, x) {
                let d = (y - r).pow(2) + (x - c).pow(2);
                best = Some(best.map_or(d, |b: isize| b.min(d)));
            }
        }
    }
    best
}

/// `perturb_vm` restated through distances: dilation keeps pixels within
/// `radius` of the mask, erosion keeps pixels farther than `radius` from the
/// background (which includes everything off the grid).
fn perturb_oracle(v: &BinaryMask, seed_value: u64) -> BinaryMask {
    let mut rng = seed::rng(seed_value);
    let shift = rng.random_bool(0.5);
    let dy = rng.random_range(-2i64..=2) as isize;
    let dx = rng.random_range(-2i64..=2) as isize;
    let morph = rng.random_range(0..3u8);
    let radius = rng.random_range(1..=3usize) as isize;
    let (h, w) = v.dims();
    let at = |m: &BinaryMask, y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize)
    };

    let mut cur = v.clone();
    if shift {
        let moved = BinaryMask::from_fn(h, w, |r, c| at(v, r as isize - dy, c as isize - dx));
        if moved.count() > 0 || v.count() == 0 {
            cur = moved;
        }
    }
    let src = cur.clone();
    match morph {
        0 => BinaryMask::from_fn(h, w, |r, c| {
            nearest_sq(radius, r as isize, c as isize, &|y, x| at(&src, y, x))
                .is_some_and(|d| d <= radius * radius)
        }),
        1 => {
            let eroded = BinaryMask::from_fn(h, w, |r, c| {
                nearest_sq(radius, r as isize, c as isize, &|y, x| !at(&src, y, x))
                    .is_none_or(|d| d > radius * radius)
            });
            if eroded.count() > 0 {
                eroded
            } else {
                src
            }
        }
        _ => src,
    }
}

#[test]
fn perturbation_matches_distance_oracle() {
    let data = generate_dataset(1000, 12, &SceneConfig::default()).unwrap();
    for (k, inst) in data.iter().enumerate() {
        assert_eq!(
            perturb_vm(&inst.visible, k as u64),
            perturb_oracle(&inst.visible, k as u64),
            "seed {k}"
        );
    }
}

/// Mean overlap of perturbed and clean masks over the first `n` nonempty
/// visible masks of a fixed dataset, perturbed with seeds `0..n`.
pub fn perturbation_mean_iou(n: usize, perturb: fn(&BinaryMask, u64) -> BinaryMask) -> f64 {
    let data = generate_dataset(1000, 400, &SceneConfig::default()).unwrap();
    let masks: Vec<&BinaryMask> = data
        .iter()
        .map(|i| &i.visible)
        .filter(|v| !v.is_empty())
        .take(n)
        .collect();
    assert_eq!(masks.len(), n);
    let total: f64 = masks
        .iter()
        .enumerate()
        .map(|(k, v)| iou(&perturb(v, k as u64), v).unwrap())
        .sum();
    total / n as f64
}

#[test]
fn perturbation_overlap_is_calibrated() {
    let oracle = perturbation_mean_iou(500, perturb_oracle);
    let implementation = perturbation_mean_iou(500, perturb_vm);
    assert_eq!(oracle.to_bits(), implementation.to_bits());
    assert!(
        (implementation - 0.6419090494942672).abs() < 1e-12,
        "{implementation}"
    );
}
