//! Manifest-backed dataset loading shared by the commands.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use srfuse_core::building::footprint_mask;
use srfuse_core::data::{extract_patch, PatchSample, Scene, Split};
use srfuse_core::io::{hash_dataset, BuildingCollection, DatasetManifest};
use srfuse_core::{Error, Result};

/// A manifest opened together with its base directory and content digest.
pub struct OpenDataset {
    pub manifest: DatasetManifest,
    pub base: PathBuf,
    pub hash: String,
}

pub fn open_dataset(manifest_path: &Path) -> Result<OpenDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let hash = hash_dataset(manifest_path)?;
    Ok(OpenDataset { manifest, base, hash })
}

impl OpenDataset {
    /// Spectral band count, read from the first scene's first revisit.
    pub fn bands(&self) -> Result<usize> {
        if self.manifest.scenes.is_empty() {
            return Err(Error::invalid("dataset has no scenes"));
        }
        let scene = self.manifest.load_scene(&self.base, 0)?;
        Ok(scene.revisits[0].raster.bands())
    }

    /// Extract every patch of the given splits, scene by scene.
    pub fn load_patches(&self, splits: &[Split]) -> Result<Vec<PatchSample>> {
        let patch = (self.manifest.patch, self.manifest.patch);
        let mut out = Vec::new();
        for (si, entry) in self.manifest.scenes.iter().enumerate() {
            let per_split: Vec<(Split, &[(usize, usize)])> = splits
                .iter()
                .filter_map(|sp| {
                    entry.splits.get(sp.as_str()).map(|o| (*sp, o.as_slice()))
                })
                .filter(|(_, o)| !o.is_empty())
                .collect();
            if per_split.is_empty() {
                continue;
            }
            let scene = self.manifest.load_scene(&self.base, si)?;
            for (sp, origins) in per_split {
                for &origin in origins {
                    out.push(extract_patch(&scene, patch, origin, sp)?);
                }
            }
        }
        Ok(out)
    }

    /// Load every scene together with its building-footprint mask, read
    /// from the scene's polygon file.
    pub fn load_scenes_with_footprints(&self) -> Result<(Vec<Scene>, Vec<Array2<bool>>)> {
        let mut scenes = Vec::with_capacity(self.manifest.scenes.len());
        let mut masks = Vec::with_capacity(self.manifest.scenes.len());
        for (si, entry) in self.manifest.scenes.iter().enumerate() {
            let scene = self.manifest.load_scene(&self.base, si)?;
            let rel = entry.buildings_path.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "scene {} has no building-footprint polygon file",
                    entry.scene_id
                ))
            })?;
            let collection = BuildingCollection::load(&self.base.join(rel))?;
            let (h, w) = (scene.hr_reference.height(), scene.hr_reference.width());
            masks.push(footprint_mask(&collection, h, w));
            scenes.push(scene);
        }
        Ok((scenes, masks))
    }
}
