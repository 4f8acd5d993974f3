//! Core dataset types and within-scene train/val/test splitting.
//!
//! A `Scene` couples a stack of low-resolution revisits with one high-
//! resolution reference raster.  Training samples are patches cut from a
//! scene; the split of a patch is a pure function of its origin: the top 80%
//! of rows feeds training, the bottom band is halved into validation (left)
//! and test (right) regions, and patches straddling a boundary are discarded
//! so no two splits share a pixel.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SyntheticTruth;

/// Multi-band image with geospatial placement metadata.
///
/// `pixels` is `[bands, height, width]`, reflectance-like values nominally
/// in `[0, 1]`.  `geo_transform` is the usual 6-scalar affine map from pixel
/// (col, row) to world coordinates:
/// `x = g[0] + col·g[1] + row·g[2]`, `y = g[3] + col·g[4] + row·g[5]`.
#[derive(Clone, Debug)]
pub struct Raster {
    pub pixels: Array3<f64>,
    pub resolution_m: f64,
    pub geo_transform: [f64; 6],
}

impl Raster {
    pub fn new(pixels: Array3<f64>, resolution_m: f64, geo_transform: [f64; 6]) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c < 1 || h < 1 || w < 1 {
            return Err(Error::invalid(format!("raster dims {c}x{h}x{w} must all be >= 1")));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("raster contains non-finite pixels"));
        }
        if !(resolution_m > 0.0) {
            return Err(Error::invalid(format!("resolution_m {resolution_m} must be > 0")));
        }
        Ok(Self { pixels, resolution_m, geo_transform })
    }

    pub fn bands(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// World coordinates of a pixel *center* (col, row offset by 0.5).
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let g = &self.geo_transform;
        let (cc, rr) = (col + 0.5, row + 0.5);
        (g[0] + cc * g[1] + rr * g[2], g[3] + cc * g[4] + rr * g[5])
    }
}

/// One satellite acquisition of a scene.
#[derive(Clone, Debug)]
pub struct Revisit {
    pub raster: Raster,
    /// Calendar date, ISO-8601 (`YYYY-MM-DD`); lexicographic order is
    /// chronological order.
    pub acquired_at: String,
    /// `true` marks cloudy pixels.
    pub cloud_mask: Array2<bool>,
    pub cloud_fraction: f64,
}

impl Revisit {
    pub fn new(raster: Raster, acquired_at: String, cloud_mask: Array2<bool>) -> Result<Self> {
        if cloud_mask.dim() != (raster.height(), raster.width()) {
            return Err(Error::shape(format!(
                "cloud mask {:?} does not match raster {}x{}",
                cloud_mask.dim(),
                raster.height(),
                raster.width()
            )));
        }
        let cloud_fraction =
            cloud_mask.iter().filter(|&&m| m).count() as f64 / cloud_mask.len() as f64;
        Ok(Self { raster, acquired_at, cloud_mask, cloud_fraction })
    }
}

/// Land-cover tags attached to a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainTag {
    Desert,
    Agri,
    Urban,
    Veg,
    Bare,
}

/// A revisit series plus its high-resolution reference.
#[derive(Clone, Debug)]
pub struct Scene {
    pub scene_id: String,
    /// Low-resolution revisits in temporal order.
    pub revisits: Vec<Revisit>,
    pub hr_reference: Raster,
    pub terrain_tags: BTreeSet<TerrainTag>,
    /// Ground-truth degradation parameters, present for synthetic scenes.
    pub truth: Option<SyntheticTruth>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.revisits.is_empty() {
            return Err(Error::invalid("scene needs at least one revisit"));
        }
        let first = &self.revisits[0].raster;
        for r in &self.revisits[1..] {
            if r.raster.pixels.dim() != first.pixels.dim() {
                return Err(Error::shape("revisit rasters disagree in shape"));
            }
            if r.raster.geo_transform != first.geo_transform {
                return Err(Error::schema("revisit geo_transforms disagree"));
            }
        }
        let hr = &self.hr_reference;
        let lr_extent_x = first.width() as f64 * first.geo_transform[1].abs();
        let hr_extent_x = hr.width() as f64 * hr.geo_transform[1].abs();
        if hr_extent_x + 1e-6 < lr_extent_x {
            return Err(Error::invalid("HR reference does not cover the revisit extent"));
        }
        Ok(())
    }

    /// Integer super-resolution factor implied by the HR/LR grids.
    pub fn sr_factor(&self) -> usize {
        let lr_w = self.revisits[0].raster.width();
        self.hr_reference.width() / lr_w
    }
}

/// Revisits usable for fusion: cloud fraction strictly below 50%.
/// Temporal order preserved; may be empty.
pub fn usable_revisits(scene: &Scene) -> Vec<&Revisit> {
    scene.revisits.iter().filter(|r| r.cloud_fraction < 0.5).collect()
}

/// Dataset split regions within a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Split label of the patch at `origin = (row, col)`, or `None` when the
/// patch straddles a region boundary and is discarded.
///
/// Regions (exact rational arithmetic, no floating point):
/// * train: rows `[0, 0.8·H)`
/// * val:   rows `[0.8·H, H)` × cols `[0, 0.5·W)`
/// * test:  rows `[0.8·H, H)` × cols `[0.5·W, W)`
pub fn patch_split(
    scene_dims: (usize, usize),
    patch: (usize, usize),
    origin: (usize, usize),
) -> Result<Option<Split>> {
    let (sh, sw) = scene_dims;
    let (ph, pw) = patch;
    if ph > sh || pw > sw {
        return Err(Error::invalid(format!(
            "patch {ph}x{pw} larger than scene {sh}x{sw}"
        )));
    }
    let (r, c) = origin;
    if r + ph > sh || c + pw > sw {
        return Ok(None); // sticks out of the scene entirely
    }
    let last_row = r + ph - 1;
    let last_col = c + pw - 1;
    // Row band: top 80% vs bottom 20%, boundary at 0.8·H ⇔ 10·row < 8·H.
    let fully_top = 10 * last_row < 8 * sh;
    let fully_bottom = 10 * r >= 8 * sh;
    if fully_top {
        return Ok(Some(Split::Train));
    }
    if !fully_bottom {
        return Ok(None); // straddles the 80% row
    }
    // Column halves of the bottom band, boundary at 0.5·W ⇔ 2·col < W.
    let fully_left = 2 * last_col < sw;
    let fully_right = 2 * c >= sw;
    if fully_left {
        Ok(Some(Split::Val))
    } else if fully_right {
        Ok(Some(Split::Test))
    } else {
        Ok(None) // straddles the midline
    }
}

/// The pixel region a split occupies on an `h × w` grid, as half-open
/// (row, col) ranges.  The three regions partition the grid — rows below
/// 80% train; the bottom band splits into a left (val) and right (test)
/// half — and every patch [`patch_split`] assigns to a split lies entirely
/// inside that split's region, because straddling patches are dropped.
pub fn split_region(
    split: Split,
    dims: (usize, usize),
) -> ((usize, usize), (usize, usize)) {
    let (h, w) = dims;
    // First row with 10·r ≥ 8·h, first column with 2·c ≥ w.
    let r_bound = (8 * h).div_ceil(10);
    let c_bound = w.div_ceil(2);
    match split {
        Split::Train => ((0, r_bound), (0, w)),
        Split::Val => ((r_bound, h), (0, c_bound)),
        Split::Test => ((r_bound, h), (c_bound, w)),
    }
}

/// Enumerate patch origins on a regular stride grid with their split labels
/// (discarded origins omitted).  Deterministic row-major order.
pub fn split_scene(
    scene_dims: (usize, usize),
    patch: (usize, usize),
    stride: (usize, usize),
) -> Result<Vec<((usize, usize), Split)>> {
    let (sh, sw) = scene_dims;
    let (ph, pw) = patch;
    if ph > sh || pw > sw {
        return Err(Error::invalid(format!(
            "patch {ph}x{pw} larger than scene {sh}x{sw}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let mut out = Vec::new();
    let mut r = 0;
    while r + ph <= sh {
        let mut c = 0;
        while c + pw <= sw {
            if let Some(split) = patch_split(scene_dims, patch, (r, c))? {
                out.push(((r, c), split));
            }
            c += stride.1;
        }
        r += stride.0;
    }
    Ok(out)
}

/// One training/evaluation sample: a co-located LR patch stack and its HR
/// target patch.
#[derive(Clone, Debug)]
pub struct PatchSample {
    /// `[T, C, h, w]`
    pub lr_stack: Array4<f64>,
    /// `[T, h, w]`, `true` = cloudy
    pub lr_masks: Array3<bool>,
    /// `[C, s·h, s·w]`
    pub hr_target: Array3<f64>,
    pub split: Split,
    pub scene_id: String,
    /// LR-grid pixel coordinates of the patch's top-left corner.
    pub origin: (usize, usize),
}

/// Cut the patch at `origin` (LR grid) out of a scene.
pub fn extract_patch(
    scene: &Scene,
    patch: (usize, usize),
    origin: (usize, usize),
    split: Split,
) -> Result<PatchSample> {
    scene.validate()?;
    let s = scene.sr_factor();
    let t = scene.revisits.len();
    let c = scene.revisits[0].raster.bands();
    let (ph, pw) = patch;
    let (r0, c0) = origin;
    let lr = &scene.revisits[0].raster;
    if r0 + ph > lr.height() || c0 + pw > lr.width() {
        return Err(Error::invalid(format!(
            "patch at ({r0},{c0}) size {ph}x{pw} exceeds LR dims {}x{}",
            lr.height(),
            lr.width()
        )));
    }
    let mut lr_stack = Array4::<f64>::zeros((t, c, ph, pw));
    let mut lr_masks = Array3::<bool>::from_elem((t, ph, pw), false);
    for (ti, rev) in scene.revisits.iter().enumerate() {
        lr_stack
            .slice_mut(s![ti, .., .., ..])
            .assign(&rev.raster.pixels.slice(s![.., r0..r0 + ph, c0..c0 + pw]));
        lr_masks
            .slice_mut(s![ti, .., ..])
            .assign(&rev.cloud_mask.slice(s![r0..r0 + ph, c0..c0 + pw]));
    }
    let hr = scene
        .hr_reference
        .pixels
        .slice(s![.., s * r0..s * (r0 + ph), s * c0..s * (c0 + pw)])
        .to_owned();
    Ok(PatchSample {
        lr_stack,
        lr_masks,
        hr_target: hr,
        split,
        scene_id: scene.scene_id.clone(),
        origin,
    })
}

/// All patches of a scene on a stride grid, labelled by split.
pub fn scene_patches(
    scene: &Scene,
    patch: (usize, usize),
    stride: (usize, usize),
) -> Result<Vec<PatchSample>> {
    let lr = &scene.revisits[0].raster;
    let dims = (lr.height(), lr.width());
    split_scene(dims, patch, stride)?
        .into_iter()
        .map(|(origin, split)| extract_patch(scene, patch, origin, split))
        .collect()
}

/// Stack every revisit of a scene into `[T, C, h, w]` pixels plus `[T, h, w]`
/// cloud masks, in the scene's temporal order.
pub fn scene_stack(scene: &Scene) -> Result<(Array4<f64>, Array3<bool>)> {
    scene.validate()?;
    let t = scene.revisits.len();
    let (c, h, w) = scene.revisits[0].raster.pixels.dim();
    let mut stack = Array4::zeros((t, c, h, w));
    let mut masks = Array3::from_elem((t, h, w), false);
    for (k, rv) in scene.revisits.iter().enumerate() {
        stack.index_axis_mut(ndarray::Axis(0), k).assign(&rv.raster.pixels);
        masks.index_axis_mut(ndarray::Axis(0), k).assign(&rv.cloud_mask);
    }
    Ok((stack, masks))
}
