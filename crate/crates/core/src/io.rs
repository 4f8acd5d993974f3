//! On-disk formats: the raster container (binary band-major f32 plus a JSON
//! sidecar), the dataset manifest, building ground-truth polygons, weight
//! checkpoints, and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Raster, Revisit, Scene, Split, TerrainTag};
use crate::error::{Error, Result};
use crate::synth::SyntheticTruth;
use srfuse_autograd::nn::ParamStore;
use srfuse_autograd::Arr;

// ---------------------------------------------------------------------------
// Atomic writes
// ---------------------------------------------------------------------------

/// Write bytes to `path` atomically (temp file in the same directory, then
/// rename), creating parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a value as pretty JSON and write it atomically.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Raster container
// ---------------------------------------------------------------------------

/// Sidecar header describing one raster file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RasterHeader {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub resolution_m: f64,
    pub geo_transform: [f64; 6],
    /// Physical value = stored value × scale.  Applies to data bands only; a
    /// declared scene-classification band holds categorical codes and is
    /// read back verbatim.
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquired_at: Option<String>,
    /// Index of a scene-classification band, when present (value 9 = cloud).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scl_band: Option<usize>,
    /// Whether a `.mask` file of u8 {0,1} accompanies the raster.
    #[serde(default)]
    pub has_mask: bool,
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

fn mask_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("mask")
}

/// Write a raster as little-endian f32, band-major, with its JSON sidecar and
/// optional boolean mask file.  `bin_path` should use the `.bin` extension.
pub fn write_raster(
    bin_path: &Path,
    raster: &Raster,
    mask: Option<&Array2<bool>>,
    acquired_at: Option<&str>,
    scl_band: Option<usize>,
) -> Result<()> {
    let (c, h, w) = raster.pixels.dim();
    let mut bytes = Vec::with_capacity(c * h * w * 4);
    for band in 0..c {
        for i in 0..h {
            for j in 0..w {
                bytes.extend_from_slice(&(raster.pixels[[band, i, j]] as f32).to_le_bytes());
            }
        }
    }
    atomic_write(bin_path, &bytes)?;
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::shape(format!("mask {:?} vs raster {h}x{w}", m.dim())));
        }
        let mbytes: Vec<u8> = m.iter().map(|&b| b as u8).collect();
        atomic_write(&mask_path(bin_path), &mbytes)?;
    }
    let header = RasterHeader {
        bands: c,
        height: h,
        width: w,
        resolution_m: raster.resolution_m,
        geo_transform: raster.geo_transform,
        scale: 1.0,
        acquired_at: acquired_at.map(str::to_string),
        scl_band,
        has_mask: mask.is_some(),
    };
    atomic_write_json(&sidecar_path(bin_path), &header)
}

/// A raster loaded from disk together with its sidecar metadata.
pub struct LoadedRaster {
    pub raster: Raster,
    pub mask: Option<Array2<bool>>,
    pub header: RasterHeader,
}

/// Read a raster container written by [`write_raster`].
pub fn read_raster(bin_path: &Path) -> Result<LoadedRaster> {
    let header: RasterHeader = read_json(&sidecar_path(bin_path))?;
    let (c, h, w) = (header.bands, header.height, header.width);
    let mut f = fs::File::open(bin_path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let expected = c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::schema(format!(
            "{}: expected {expected} bytes for {c}x{h}x{w} f32, found {}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let mut pixels = Array3::<f64>::zeros((c, h, w));
    let mut off = 0;
    for band in 0..c {
        let scale = if header.scl_band == Some(band) { 1.0 } else { header.scale };
        for i in 0..h {
            for j in 0..w {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                pixels[[band, i, j]] = v as f64 * scale;
                off += 4;
            }
        }
    }
    let raster = Raster::new(pixels, header.resolution_m, header.geo_transform)?;
    let mask = if header.has_mask {
        let mbytes = fs::read(mask_path(bin_path))?;
        if mbytes.len() != h * w {
            return Err(Error::schema(format!(
                "{}: mask length {} != {h}x{w}",
                bin_path.display(),
                mbytes.len()
            )));
        }
        Some(Array2::from_shape_fn((h, w), |(i, j)| mbytes[i * w + j] != 0))
    } else {
        None
    };
    Ok(LoadedRaster { raster, mask, header })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One revisit's manifest entry; paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RevisitEntry {
    pub path: String,
    pub acquired_at: String,
    pub cloud_fraction: f64,
}

/// One scene's manifest entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub hr_path: String,
    pub revisits: Vec<RevisitEntry>,
    /// Patch origins (LR grid, row-major order) per split name.
    pub splits: BTreeMap<String, Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SyntheticTruth>,
    /// Ground-truth building polygons (HR grid), when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buildings_path: Option<String>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeSet::is_empty")]
    pub terrain_tags: std::collections::BTreeSet<TerrainTag>,
}

/// Dataset manifest: the single entry point enumerating scenes and splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sr_factor: usize,
    /// Patch side length on the LR grid used to derive `splits`.
    pub patch: usize,
    /// Patch stride on the LR grid used to derive `splits`.
    pub stride: usize,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_json(path, self)
    }

    /// Load one scene's rasters, resolving paths against `base_dir`
    /// (normally the manifest's parent directory).
    pub fn load_scene(&self, base_dir: &Path, index: usize) -> Result<Scene> {
        let entry = self
            .scenes
            .get(index)
            .ok_or_else(|| Error::invalid(format!("scene index {index} out of range")))?;
        let hr = read_raster(&base_dir.join(&entry.hr_path))?;
        let mut revisits = Vec::with_capacity(entry.revisits.len());
        for rev in &entry.revisits {
            let loaded = read_raster(&base_dir.join(&rev.path))?;
            let (_, h, w) = loaded.raster.pixels.dim();
            let mask = loaded.mask.unwrap_or_else(|| Array2::from_elem((h, w), false));
            let acquired = loaded
                .header
                .acquired_at
                .clone()
                .unwrap_or_else(|| rev.acquired_at.clone());
            revisits.push(Revisit::new(loaded.raster, acquired, mask)?);
        }
        let scene = Scene {
            scene_id: entry.scene_id.clone(),
            revisits,
            hr_reference: hr.raster,
            terrain_tags: entry.terrain_tags.clone(),
            truth: entry.truth.clone(),
        };
        scene.validate()?;
        Ok(scene)
    }

    /// All (scene_index, origin) pairs assigned to a split.
    pub fn split_origins(&self, split: Split) -> Vec<(usize, (usize, usize))> {
        let key = split.as_str();
        let mut out = Vec::new();
        for (si, scene) in self.scenes.iter().enumerate() {
            if let Some(origins) = scene.splits.get(key) {
                for &o in origins {
                    out.push((si, o));
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Building ground truth
// ---------------------------------------------------------------------------

/// One building footprint as closed rings of (x, y) vertices on the HR pixel
/// grid (outer ring first; holes follow).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildingFeature {
    pub id: usize,
    pub rings: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BuildingCollection {
    pub features: Vec<BuildingFeature>,
}

impl BuildingCollection {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_json(path, self)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SRCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 payload.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: serde_json::Value,
    config_hash: String,
    seed: u64,
    arrays: Vec<ArrayRecord>,
}

/// Hash of a configuration's canonical JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let text = serde_json::to_string(config)?;
    Ok(hex_digest(text.as_bytes()))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Persist every parameter in `store` (little-endian f32, names sorted) with
/// a JSON header carrying the config, its hash, and the run seed.
pub fn save_checkpoint<T: Serialize>(
    path: &Path,
    store: &ParamStore,
    config: &T,
    seed: u64,
) -> Result<()> {
    let mut names: Vec<&str> = store.names().collect();
    names.sort_unstable();
    let mut arrays = Vec::with_capacity(names.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for name in names {
        let a = store.get(name);
        arrays.push(ArrayRecord {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            offset,
        });
        for &v in a.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += a.len();
    }
    let header = CheckpointHeader {
        format_version: 1,
        config: serde_json::to_value(config)?,
        config_hash: config_hash(config)?,
        seed,
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + header_bytes.len() + payload.len());
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

/// A checkpoint read back into memory.
pub struct Checkpoint {
    pub store: ParamStore,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..8] != CKPT_MAGIC {
        return Err(Error::schema(format!("{}: not a checkpoint file", path.display())));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::schema(format!("{}: truncated header", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let payload = &bytes[12 + header_len..];
    let mut store = ParamStore::new();
    for rec in &header.arrays {
        let len: usize = rec.shape.iter().product();
        let start = rec.offset * 4;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(Error::schema(format!(
                "{}: array {} exceeds payload",
                path.display(),
                rec.name
            )));
        }
        let mut data = Vec::with_capacity(len);
        for k in 0..len {
            let b = &payload[start + 4 * k..start + 4 * k + 4];
            data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
        let arr = Arr::from_shape_vec(IxDyn(&rec.shape), data)
            .map_err(|e| Error::schema(format!("array {}: {e}", rec.name)))?;
        store.insert(&rec.name, arr);
    }
    Ok(Checkpoint {
        store,
        config: header.config,
        config_hash: header.config_hash,
        seed: header.seed,
    })
}

// ---------------------------------------------------------------------------
// Dataset hashing
// ---------------------------------------------------------------------------

/// Hash of one file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest over a dataset: the manifest bytes plus every referenced raster
/// (binary and sidecar), in manifest order.  Changing any pixel, header, or
/// the manifest itself changes the digest.
pub fn hash_dataset(manifest_path: &Path) -> Result<String> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut hasher = Sha256::new();
    hasher.update(fs::read(manifest_path)?);
    let add_file = |p: PathBuf, hasher: &mut Sha256| -> Result<()> {
        hasher.update(fs::read(&p)?);
        Ok(())
    };
    for scene in &manifest.scenes {
        for rel in std::iter::once(&scene.hr_path).chain(scene.revisits.iter().map(|r| &r.path)) {
            let bin = base.join(rel);
            add_file(bin.clone(), &mut hasher)?;
            add_file(sidecar_path(&bin), &mut hasher)?;
            if mask_path(&bin).exists() {
                add_file(mask_path(&bin), &mut hasher)?;
            }
        }
        if let Some(b) = &scene.buildings_path {
            add_file(base.join(b), &mut hasher)?;
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn sample_raster(seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = A3::from_shape_fn((2, 6, 5), |_| rng.random_range(0.0f64..1.0));
        Raster::new(pixels, 10.0, [500_000.0, 10.0, 0.0, 4_000_000.0, 0.0, -10.0]).unwrap()
    }

    #[test]
    fn raster_round_trip_preserves_f32_precision_and_metadata() {
        let dir = TempDir::new().unwrap();
        let r = sample_raster(1);
        let mask = Array2::from_shape_fn((6, 5), |(i, j)| (i + j) % 3 == 0);
        let path = dir.path().join("scene/rev0.bin");
        write_raster(&path, &r, Some(&mask), Some("2020-03-15"), None).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.raster.pixels.dim(), (2, 6, 5));
        for (a, b) in r.pixels.iter().zip(back.raster.pixels.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(back.raster.resolution_m, 10.0);
        assert_eq!(back.raster.geo_transform, r.geo_transform);
        assert_eq!(back.mask.unwrap(), mask);
        assert_eq!(back.header.acquired_at.as_deref(), Some("2020-03-15"));
    }

    #[test]
    fn truncated_raster_is_a_schema_error() {
        let dir = TempDir::new().unwrap();
        let r = sample_raster(2);
        let path = dir.path().join("r.bin");
        write_raster(&path, &r, None, None, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_raster(&path).err().unwrap();
        assert_eq!(err.kind(), "schema");
    }

    #[test]
    fn checkpoint_round_trip_restores_all_arrays() {
        let dir = TempDir::new().unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.insert(
            "model.w",
            Arr::from_shape_fn(IxDyn(&[3, 2]), |_| rng.random_range(-1.0f64..1.0)),
        );
        store.insert("model.b", Arr::from_shape_fn(IxDyn(&[3]), |_| rng.random_range(-1.0f64..1.0)));
        store.insert("shiftnet.fc.weight", Arr::zeros(IxDyn(&[2, 4])));
        #[derive(Serialize)]
        struct Cfg {
            hidden: usize,
        }
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &store, &Cfg { hidden: 64 }, 42).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.seed, 42);
        assert_eq!(ck.config["hidden"], 64);
        assert_eq!(ck.config_hash, config_hash(&Cfg { hidden: 64 }).unwrap());
        assert_eq!(ck.store.len(), 3);
        for name in ["model.w", "model.b", "shiftnet.fc.weight"] {
            let a = store.get(name);
            let b = ck.store.get(name);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32, "array {name} changed beyond f32 rounding");
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert_eq!(load_checkpoint(&path).err().unwrap().kind(), "schema");
    }

    #[test]
    fn manifest_round_trip_and_scene_loading() {
        let dir = TempDir::new().unwrap();
        let scene = crate::synth::generate_synthetic_scene(
            7,
            3,
            2,
            (16, 16),
            2,
            &crate::synth::DegradationSpec::default(),
        )
        .unwrap();
        // Write the scene's rasters.
        let mut revisits = Vec::new();
        for (i, rev) in scene.revisits.iter().enumerate() {
            let rel = format!("scenes/{}/rev{i}.bin", scene.scene_id);
            write_raster(
                &dir.path().join(&rel),
                &rev.raster,
                Some(&rev.cloud_mask),
                Some(&rev.acquired_at),
                None,
            )
            .unwrap();
            revisits.push(RevisitEntry {
                path: rel,
                acquired_at: rev.acquired_at.clone(),
                cloud_fraction: rev.cloud_fraction,
            });
        }
        let hr_rel = format!("scenes/{}/hr.bin", scene.scene_id);
        write_raster(&dir.path().join(&hr_rel), &scene.hr_reference, None, None, None).unwrap();

        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), vec![(0usize, 0usize), (0, 8)]);
        splits.insert("val".to_string(), vec![(8, 0)]);
        let manifest = DatasetManifest {
            name: "unit".into(),
            sr_factor: 2,
            patch: 8,
            stride: 8,
            scenes: vec![SceneEntry {
                scene_id: scene.scene_id.clone(),
                hr_path: hr_rel,
                revisits,
                splits,
                truth: scene.truth.clone(),
                buildings_path: None,
                terrain_tags: scene.terrain_tags.clone(),
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();

        let loaded = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(loaded.scenes.len(), 1);
        let scene2 = loaded.load_scene(dir.path(), 0).unwrap();
        assert_eq!(scene2.scene_id, scene.scene_id);
        assert_eq!(scene2.revisits.len(), 3);
        assert_eq!(scene2.sr_factor(), 2);
        // Pixels survive the f32 round trip.
        for (a, b) in scene.hr_reference.pixels.iter().zip(scene2.hr_reference.pixels.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(loaded.split_origins(Split::Train), vec![(0, (0, 0)), (0, (0, 8))]);
        assert_eq!(loaded.split_origins(Split::Test), vec![]);
    }

    #[test]
    fn dataset_hash_changes_with_content_and_is_stable_otherwise() {
        let dir = TempDir::new().unwrap();
        let r = sample_raster(5);
        write_raster(&dir.path().join("hr.bin"), &r, None, None, None).unwrap();
        let manifest = DatasetManifest {
            name: "h".into(),
            sr_factor: 2,
            patch: 4,
            stride: 4,
            scenes: vec![SceneEntry {
                scene_id: "s".into(),
                hr_path: "hr.bin".into(),
                revisits: vec![],
                splits: BTreeMap::new(),
                truth: None,
                buildings_path: None,
                terrain_tags: Default::default(),
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let h1 = hash_dataset(&mpath).unwrap();
        let h2 = hash_dataset(&mpath).unwrap();
        assert_eq!(h1, h2);
        // Flip one pixel byte: digest must change.
        let mut bytes = fs::read(dir.path().join("hr.bin")).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(dir.path().join("hr.bin"), &bytes).unwrap();
        let h3 = hash_dataset(&mpath).unwrap();
        assert_ne!(h1, h3);
    }

    #[test]
    fn atomic_write_replaces_existing_files_without_partial_states() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("out/report.json");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        // No temp litter left behind.
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn building_collection_round_trip() {
        let dir = TempDir::new().unwrap();
        let coll = BuildingCollection {
            features: vec![BuildingFeature {
                id: 0,
                rings: vec![vec![(0.0, 0.0), (3.0, 0.0), (3.0, 2.0), (0.0, 2.0)]],
            }],
        };
        let path = dir.path().join("buildings.json");
        coll.save(&path).unwrap();
        let back = BuildingCollection::load(&path).unwrap();
        assert_eq!(back.features.len(), 1);
        assert_eq!(back.features[0].rings[0].len(), 4);
    }
}
