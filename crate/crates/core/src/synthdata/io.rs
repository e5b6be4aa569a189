//! On-disk dataset layout: `manifest.json` plus one image and two mask PGMs
//! per instance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SceneConfig, SceneInstance, ShapeClass};
use crate::error::{GraspError, Result};
use crate::pgm;

pub const DATASET_VERSION: &str = "grasp-dataset/1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub image: String,
    pub visible: String,
    pub amodal: String,
    pub shape_class: ShapeClass,
    pub occ_ratio: f64,
    pub seed: u64,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub split: Split,
    pub base_seed: u64,
    pub scenes: usize,
    pub scene_config: SceneConfig,
    pub instances: Vec<ManifestEntry>,
    /// Resolved run configuration of the command that wrote the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub instances: Vec<SceneInstance>,
}

impl Dataset {
    pub fn new(
        instances: Vec<SceneInstance>,
        split: Split,
        base_seed: u64,
        scenes: usize,
        scene_config: SceneConfig,
    ) -> Self {
        let entries = instances
            .iter()
            .enumerate()
            .map(|(id, inst)| ManifestEntry {
                id,
                image: format!("img_{id:06}.pgm"),
                visible: format!("vis_{id:06}.pgm"),
                amodal: format!("amo_{id:06}.pgm"),
                shape_class: inst.shape_class,
                occ_ratio: inst.occ_ratio,
                seed: inst.seed,
                depth: inst.depth,
            })
            .collect();
        Dataset {
            manifest: DatasetManifest {
                version: DATASET_VERSION.to_string(),
                height: scene_config.size,
                width: scene_config.size,
                count: instances.len(),
                split,
                base_seed,
                scenes,
                scene_config,
                instances: entries,
                provenance: None,
            },
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Writes every instance, then the manifest.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GraspError::io(dir, e))?;
    let tag = crate::VERSION;
    for (entry, inst) in dataset.manifest.instances.iter().zip(&dataset.instances) {
        pgm::write(&dir.join(&entry.image), &inst.image, Some(tag))?;
        pgm::write(
            &dir.join(&entry.visible),
            &pgm::mask_to_image(&inst.visible),
            Some(tag),
        )?;
        pgm::write(
            &dir.join(&entry.amodal),
            &pgm::mask_to_image(&inst.amodal),
            Some(tag),
        )?;
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| GraspError::Invalid(format!("serializing manifest: {e}")))?;
    fs::write(&path, json).map_err(|e| GraspError::io(&path, e))
}

fn integrity(path: &Path, what: impl std::fmt::Display) -> GraspError {
    GraspError::Integrity(format!("{}: {what}", path.display()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(GraspError::ManifestMissing(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| GraspError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| GraspError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    if manifest.version != DATASET_VERSION {
        return Err(integrity(
            &path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.count != manifest.instances.len() {
        return Err(integrity(
            &path,
            format!(
                "count {} but {} entries",
                manifest.count,
                manifest.instances.len()
            ),
        ));
    }
    let dims = (manifest.height, manifest.width);
    let mut instances = Vec::with_capacity(manifest.count);
    for entry in &manifest.instances {
        let file = |name: &str| -> PathBuf { dir.join(name) };
        let image = pgm::read(&file(&entry.image))?;
        if (image.height, image.width) != dims {
            return Err(integrity(
                &file(&entry.image),
                format!(
                    "{}×{} does not match manifest {}×{}",
                    image.height, image.width, dims.0, dims.1
                ),
            ));
        }
        let visible = pgm::read_mask(&file(&entry.visible))?;
        let amodal = pgm::read_mask(&file(&entry.amodal))?;
        for (name, m) in [(&entry.visible, &visible), (&entry.amodal, &amodal)] {
            if m.dims() != dims {
                return Err(integrity(
                    &file(name),
                    "mask dimensions do not match manifest",
                ));
            }
        }
        let inst = SceneInstance::from_masks(
            image,
            visible,
            amodal,
            entry.shape_class,
            entry.seed,
            entry.depth,
        )
        .map_err(|e| integrity(&file(&entry.visible), e))?;
        if inst.occ_ratio.to_bits() != entry.occ_ratio.to_bits() {
            return Err(integrity(
                &file(&entry.amodal),
                format!(
                    "occlusion ratio {} differs from manifest {}",
                    inst.occ_ratio, entry.occ_ratio
                ),
            ));
        }
        instances.push(inst);
    }
    Ok(Dataset {
        manifest,
        instances,
    })
}
