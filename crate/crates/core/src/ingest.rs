//! Co-registration of satellite products onto a shared grid, plus revisit
//! quality ranking.
//!
//! A coregistration job takes one high-resolution scene raster and any number
//! of low-resolution products, all georeferenced in a common world frame via
//! their geo_transforms (axis-aligned; rotated transforms are rejected).  The
//! pipeline:
//!
//! 1. crops each LR product to the HR scene bounds (products with an empty
//!    crop are dropped);
//! 2. resamples every LR band onto one target grid at `target_resolution_m`
//!    with bilinear interpolation;
//! 3. mosaics products acquired on the same date — a cloud-free pixel beats a
//!    cloudy one, and between two cloud-free pixels the later product (in
//!    input order) wins;
//! 4. derives each revisit's cloud mask from the scene-classification band
//!    (value 9 = cloud), merged with any explicit mask file the product
//!    carries;
//! 5. area-average-resamples the HR raster onto exactly `sr_factor ×` the LR
//!    grid, so the scene's scale ratio is an exact integer.
//!
//! Jobs are independent and share no mutable state, so callers may run many
//! of them in parallel.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Raster, Revisit, Scene};
use crate::error::{Error, Result};
use crate::io::{read_raster, LoadedRaster};

/// Scene-classification code for high-probability cloud.
pub const SCL_CLOUD: f64 = 9.0;

/// Slack (in source-pixel units) when deciding whether a target pixel centre
/// falls inside a product's footprint, absorbing float rounding on exactly
/// aligned grids.
const COVER_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Fetching
// ---------------------------------------------------------------------------

/// Source of raster products, keyed by provider-relative path.
///
/// Only a local-directory implementation ships; archive protocols can be
/// added by implementing this trait.
pub trait FetchClient {
    fn fetch(&self, key: &str) -> Result<LoadedRaster>;
}

/// Reads raster containers from a directory tree rooted at `root`.
pub struct LocalDirClient {
    root: PathBuf,
}

impl LocalDirClient {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FetchClient for LocalDirClient {
    fn fetch(&self, key: &str) -> Result<LoadedRaster> {
        read_raster(&self.root.join(key))
    }
}

// ---------------------------------------------------------------------------
// Job description
// ---------------------------------------------------------------------------

/// One coregistration task: a HR scene plus candidate LR products.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestJob {
    pub scene_id: String,
    pub hr_scene_path: String,
    pub lr_product_paths: Vec<String>,
    /// Inclusive ISO-8601 date range; products outside it are skipped.
    pub date_window: (String, String),
    pub target_resolution_m: f64,
}

impl IngestJob {
    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() {
            return Err(Error::invalid("scene_id must be non-empty"));
        }
        if self.hr_scene_path.is_empty() {
            return Err(Error::invalid("hr_scene_path must be non-empty"));
        }
        if self.lr_product_paths.is_empty() {
            return Err(Error::invalid("at least one LR product path is required"));
        }
        if self.date_window.0 > self.date_window.1 {
            return Err(Error::invalid(format!(
                "date_window start {:?} is after end {:?}",
                self.date_window.0, self.date_window.1
            )));
        }
        if !(self.target_resolution_m > 0.0) || !self.target_resolution_m.is_finite() {
            return Err(Error::invalid(format!(
                "target_resolution_m {} must be positive and finite",
                self.target_resolution_m
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Grid geometry
// ---------------------------------------------------------------------------

/// An axis-aligned pixel grid in world coordinates.  `dx`/`dy` are signed
/// steps per column/row; pixel (row r, col c) covers the rectangle from
/// `(x0 + c·dx, y0 + r·dy)` to `(x0 + (c+1)·dx, y0 + (r+1)·dy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Grid {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    h: usize,
    w: usize,
}

impl Grid {
    fn of(raster: &Raster) -> Result<Self> {
        let g = raster.geo_transform;
        if g[2] != 0.0 || g[4] != 0.0 {
            return Err(Error::schema(
                "rotated geo_transforms are not supported; inputs must be axis-aligned",
            ));
        }
        if g[1] == 0.0 || g[5] == 0.0 {
            return Err(Error::schema("degenerate geo_transform (zero pixel size)"));
        }
        Ok(Self { x0: g[0], y0: g[3], dx: g[1], dy: g[5], h: raster.height(), w: raster.width() })
    }

    fn geo_transform(&self) -> [f64; 6] {
        [self.x0, self.dx, 0.0, self.y0, 0.0, self.dy]
    }

    /// World coordinates of the centre of pixel (row, col).
    fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.x0 + (col as f64 + 0.5) * self.dx, self.y0 + (row as f64 + 0.5) * self.dy)
    }

    /// Fractional pixel-centre coordinates (v = row, u = col) of a world
    /// point.
    fn frac_index(&self, x: f64, y: f64) -> (f64, f64) {
        ((y - self.y0) / self.dy - 0.5, (x - self.x0) / self.dx - 0.5)
    }

    /// Whether fractional centre coordinates fall inside the grid's outer
    /// pixel edges.
    fn covers(&self, v: f64, u: f64) -> bool {
        u >= -0.5 - COVER_EPS
            && u <= self.w as f64 - 0.5 + COVER_EPS
            && v >= -0.5 - COVER_EPS
            && v <= self.h as f64 - 0.5 + COVER_EPS
    }
}

fn bilinear_at(plane: &ArrayView2<f64>, v: f64, u: f64) -> f64 {
    let (h, w) = plane.dim();
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let j0 = uc.floor() as usize;
    let i0 = vc.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fu = uc - j0 as f64;
    let fv = vc - i0 as f64;
    let top = plane[[i0, j0]] * (1.0 - fu) + plane[[i0, j1]] * fu;
    let bot = plane[[i1, j0]] * (1.0 - fu) + plane[[i1, j1]] * fu;
    top * (1.0 - fv) + bot * fv
}

fn nearest_at(plane: &ArrayView2<f64>, v: f64, u: f64) -> f64 {
    let (h, w) = plane.dim();
    let j = u.round().clamp(0.0, (w - 1) as f64) as usize;
    let i = v.round().clamp(0.0, (h - 1) as f64) as usize;
    plane[[i, j]]
}

/// Per-target-cell source indices and normalized overlap weights along one
/// axis, for area-average resampling.  Weights sum to 1 per target cell; a
/// cell with partial source support renormalizes over the covered part.
fn axis_overlap_weights(
    src_origin: f64,
    src_step: f64,
    src_n: usize,
    tgt_origin: f64,
    tgt_step: f64,
    tgt_n: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut table = Vec::with_capacity(tgt_n);
    for k in 0..tgt_n {
        let t0 = tgt_origin + k as f64 * tgt_step;
        let t1 = t0 + tgt_step;
        // The target interval expressed in fractional source-index space.
        let p = (t0 - src_origin) / src_step;
        let q = (t1 - src_origin) / src_step;
        let (a, b) = if p <= q { (p, q) } else { (q, p) };
        let j_lo = (a.floor() as isize).clamp(0, src_n as isize) as usize;
        let j_hi = (b.ceil() as isize).clamp(0, src_n as isize) as usize;
        let mut weights: Vec<(usize, f64)> = Vec::new();
        let mut total = 0.0;
        for j in j_lo..j_hi {
            let overlap = b.min(j as f64 + 1.0) - a.max(j as f64);
            if overlap > 1e-12 {
                weights.push((j, overlap));
                total += overlap;
            }
        }
        if total <= 0.0 {
            // Target cell entirely outside the source extent: fall back to
            // the nearest source cell so the output stays finite.
            let mid = ((a + b) * 0.5).round().clamp(0.0, (src_n - 1) as f64) as usize;
            weights.push((mid, 1.0));
            total = 1.0;
        }
        for wj in &mut weights {
            wj.1 /= total;
        }
        table.push(weights);
    }
    table
}

fn area_average_plane(
    src: &ArrayView2<f64>,
    row_w: &[Vec<(usize, f64)>],
    col_w: &[Vec<(usize, f64)>],
) -> Array2<f64> {
    let (_, sw) = src.dim();
    let (th, tw) = (row_w.len(), col_w.len());
    let mut rows = Array2::<f64>::zeros((th, sw));
    for (tr, ws) in row_w.iter().enumerate() {
        for &(sr, w) in ws {
            for j in 0..sw {
                rows[[tr, j]] += w * src[[sr, j]];
            }
        }
    }
    let mut out = Array2::<f64>::zeros((th, tw));
    for (tc, ws) in col_w.iter().enumerate() {
        for &(sc, w) in ws {
            for i in 0..th {
                out[[i, tc]] += w * rows[[i, sc]];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Product handling
// ---------------------------------------------------------------------------

/// A loaded LR product reduced to physical data bands plus an optional 0/1
/// cloud indicator plane in its native pixel space.
struct Product {
    data: Array3<f64>,
    cloud: Option<Array2<f64>>,
    grid: Grid,
    date: String,
}

/// Split a loaded raster (already in physical units) into data bands and a
/// cloud indicator, removing the scene-classification band if one is
/// declared.
fn prepare_product(key: &str, loaded: &LoadedRaster) -> Result<Product> {
    let header = &loaded.header;
    let date = header
        .acquired_at
        .clone()
        .ok_or_else(|| Error::schema(format!("product {key} lacks an acquisition date")))?;
    let grid = Grid::of(&loaded.raster)?;
    let (bands, h, w) = loaded.raster.pixels.dim();
    if let Some(scl) = header.scl_band {
        if scl >= bands {
            return Err(Error::schema(format!(
                "product {key}: scl_band {scl} out of range for {bands} bands"
            )));
        }
    }
    let data_band_idx: Vec<usize> =
        (0..bands).filter(|&b| header.scl_band != Some(b)).collect();
    if data_band_idx.is_empty() {
        return Err(Error::schema(format!("product {key} has no data bands")));
    }
    let mut data = Array3::<f64>::zeros((data_band_idx.len(), h, w));
    for (out_b, &src_b) in data_band_idx.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), out_b)
            .assign(&loaded.raster.pixels.index_axis(ndarray::Axis(0), src_b));
    }
    // Cloud indicator: scene-classification value 9, OR'd with any explicit
    // mask file the container carries.  The indicator stays in the product's
    // native pixel space and is resampled nearest-neighbour later.
    let mut cloud: Option<Array2<f64>> = None;
    if let Some(scl) = header.scl_band {
        let mut c = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                // Stored as f32; categorical codes survive rounding well
                // within 0.5.
                if (loaded.raster.pixels[[scl, i, j]] - SCL_CLOUD).abs() < 0.5 {
                    c[[i, j]] = 1.0;
                }
            }
        }
        cloud = Some(c);
    }
    if let Some(mask) = &loaded.mask {
        let mut c = cloud.unwrap_or_else(|| Array2::zeros((h, w)));
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] {
                    c[[i, j]] = 1.0;
                }
            }
        }
        cloud = Some(c);
    }
    Ok(Product { data, cloud, grid, date })
}

/// One product resampled onto the target grid.
struct Resampled {
    bands: Array3<f64>,
    covered: Array2<bool>,
    cloudy: Array2<bool>,
}

fn resample_to_grid(product: &Product, tgt: &Grid) -> Resampled {
    let c = product.data.dim().0;
    let mut bands = Array3::<f64>::zeros((c, tgt.h, tgt.w));
    let mut covered = Array2::from_elem((tgt.h, tgt.w), false);
    let mut cloudy = Array2::from_elem((tgt.h, tgt.w), false);
    for r in 0..tgt.h {
        for col in 0..tgt.w {
            let (x, y) = tgt.center(r, col);
            let (v, u) = product.grid.frac_index(x, y);
            if !product.grid.covers(v, u) {
                continue;
            }
            covered[[r, col]] = true;
            for b in 0..c {
                let plane = product.data.index_axis(ndarray::Axis(0), b);
                bands[[b, r, col]] = bilinear_at(&plane, v, u);
            }
            if let Some(ci) = &product.cloud {
                cloudy[[r, col]] = nearest_at(&ci.view(), v, u) > 0.5;
            }
        }
    }
    Resampled { bands, covered, cloudy }
}

// ---------------------------------------------------------------------------
// Coregistration
// ---------------------------------------------------------------------------

/// Run one coregistration job.  `sr_factor` fixes the integer HR/LR scale
/// ratio of the output scene.
pub fn coregister(client: &dyn FetchClient, job: &IngestJob, sr_factor: usize) -> Result<Scene> {
    job.validate()?;
    if sr_factor < 1 {
        return Err(Error::invalid("sr_factor must be >= 1"));
    }

    let hr_loaded = client.fetch(&job.hr_scene_path)?;
    let hr_grid = Grid::of(&hr_loaded.raster)?;

    // Target LR grid: anchored at the HR origin corner, same axis
    // orientation, floor-fitted inside the HR bounds so every LR (and HR
    // target) pixel has full source support.
    let res = job.target_resolution_m;
    let lw = (hr_grid.w as f64 * hr_grid.dx.abs() / res + COVER_EPS).floor() as usize;
    let lh = (hr_grid.h as f64 * hr_grid.dy.abs() / res + COVER_EPS).floor() as usize;
    if lw == 0 || lh == 0 {
        return Err(Error::invalid(format!(
            "HR scene ({}x{} at {} m) is smaller than one {} m target pixel",
            hr_grid.h,
            hr_grid.w,
            hr_loaded.raster.resolution_m,
            res
        )));
    }
    let lr_grid = Grid {
        x0: hr_grid.x0,
        y0: hr_grid.y0,
        dx: res * hr_grid.dx.signum(),
        dy: res * hr_grid.dy.signum(),
        h: lh,
        w: lw,
    };

    // Load products, skip those outside the date window, and check band
    // consistency.
    let (start, end) = (&job.date_window.0, &job.date_window.1);
    let mut products: Vec<Product> = Vec::new();
    for key in &job.lr_product_paths {
        let loaded = client.fetch(key)?;
        let product = prepare_product(key, &loaded)?;
        if product.date.as_str() < start.as_str() || product.date.as_str() > end.as_str() {
            continue;
        }
        if let Some(first) = products.first() {
            if product.data.dim().0 != first.data.dim().0 {
                return Err(Error::schema(format!(
                    "product {key} has {} data bands, expected {}",
                    product.data.dim().0,
                    first.data.dim().0
                )));
            }
        }
        products.push(product);
    }
    if products.is_empty() {
        return Err(Error::invalid(format!(
            "no LR products within the date window {start}..{end}"
        )));
    }
    let n_bands = products[0].data.dim().0;

    // Crop-and-resample each product; products whose crop is empty are
    // dropped.  If every crop is empty, nothing overlaps the HR bounds.
    let mut per_date: BTreeMap<String, Vec<Resampled>> = BTreeMap::new();
    for product in &products {
        let rs = resample_to_grid(product, &lr_grid);
        if rs.covered.iter().any(|&c| c) {
            per_date.entry(product.date.clone()).or_default().push(rs);
        }
    }
    if per_date.is_empty() {
        return Err(Error::EmptyOverlap(format!(
            "no LR product overlaps the HR scene bounds of {}",
            job.hr_scene_path
        )));
    }

    // Mosaic each date.  Uncovered pixels stay zero and are marked cloudy so
    // downstream treats them as unusable.
    let mut revisits = Vec::with_capacity(per_date.len());
    for (date, parts) in &per_date {
        let mut pixels = Array3::<f64>::zeros((n_bands, lh, lw));
        let mut cloudy = Array2::from_elem((lh, lw), true);
        let mut sourced = Array2::from_elem((lh, lw), false);
        for part in parts {
            for r in 0..lh {
                for cidx in 0..lw {
                    if !part.covered[[r, cidx]] {
                        continue;
                    }
                    let new_clear = !part.cloudy[[r, cidx]];
                    // Cloud-free beats cloudy; on equal cloudiness the later
                    // product (input order) wins.
                    let keep_old = sourced[[r, cidx]] && !cloudy[[r, cidx]] && !new_clear;
                    if keep_old {
                        continue;
                    }
                    for b in 0..n_bands {
                        pixels[[b, r, cidx]] = part.bands[[b, r, cidx]];
                    }
                    cloudy[[r, cidx]] = !new_clear;
                    sourced[[r, cidx]] = true;
                }
            }
        }
        let raster = Raster::new(pixels, res, lr_grid.geo_transform())?;
        revisits.push(Revisit::new(raster, date.clone(), cloudy)?);
    }

    // HR reference on exactly sr_factor × the LR grid.
    let s = sr_factor as f64;
    let hr_tgt = Grid {
        x0: lr_grid.x0,
        y0: lr_grid.y0,
        dx: lr_grid.dx / s,
        dy: lr_grid.dy / s,
        h: lh * sr_factor,
        w: lw * sr_factor,
    };
    let row_w = axis_overlap_weights(hr_grid.y0, hr_grid.dy, hr_grid.h, hr_tgt.y0, hr_tgt.dy, hr_tgt.h);
    let col_w = axis_overlap_weights(hr_grid.x0, hr_grid.dx, hr_grid.w, hr_tgt.x0, hr_tgt.dx, hr_tgt.w);
    let hr_bands_idx: Vec<usize> = (0..hr_loaded.raster.pixels.dim().0)
        .filter(|&b| hr_loaded.header.scl_band != Some(b))
        .collect();
    let mut hr_pixels = Array3::<f64>::zeros((hr_bands_idx.len(), hr_tgt.h, hr_tgt.w));
    for (out_b, &src_b) in hr_bands_idx.iter().enumerate() {
        let plane = hr_loaded.raster.pixels.index_axis(ndarray::Axis(0), src_b);
        let resampled = area_average_plane(&plane, &row_w, &col_w);
        hr_pixels.index_axis_mut(ndarray::Axis(0), out_b).assign(&resampled);
    }
    let hr_reference = Raster::new(hr_pixels, res / s, hr_tgt.geo_transform())?;

    let scene = Scene {
        scene_id: job.scene_id.clone(),
        revisits,
        hr_reference,
        terrain_tags: Default::default(),
        truth: None,
    };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Revisit ranking
// ---------------------------------------------------------------------------

/// Indices of a scene's revisits from most to least usable: cloud fraction
/// ascending, ties broken by acquisition date ascending, then by index.  The
/// result is always a permutation of `0..T`.
pub fn rank_revisits(scene: &Scene) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scene.revisits.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&scene.revisits[a], &scene.revisits[b]);
        ra.cloud_fraction
            .total_cmp(&rb.cloud_fraction)
            .then_with(|| ra.acquired_at.cmp(&rb.acquired_at))
            .then(a.cmp(&b))
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_raster;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;
    use tempfile::TempDir;

    fn north_up(x0: f64, y0: f64, res: f64) -> [f64; 6] {
        [x0, res, 0.0, y0, 0.0, -res]
    }

    /// A raster whose pixel values are a fixed affine ramp in *world*
    /// coordinates, so resampling accuracy can be checked analytically.
    fn ramp_raster(x0: f64, y0: f64, res: f64, h: usize, w: usize) -> Raster {
        let g = north_up(x0, y0, res);
        let pixels = Array3::from_shape_fn((1, h, w), |(_, i, j)| {
            let x = x0 + (j as f64 + 0.5) * res;
            let y = y0 - (i as f64 + 0.5) * res;
            ramp(x, y)
        });
        Raster::new(pixels, res, g).unwrap()
    }

    fn ramp(x: f64, y: f64) -> f64 {
        0.002 * x - 0.003 * y + 0.25
    }

    fn const_raster(x0: f64, y0: f64, res: f64, h: usize, w: usize, value: f64) -> Raster {
        Raster::new(Array3::from_elem((1, h, w), value), res, north_up(x0, y0, res)).unwrap()
    }

    struct Fixture {
        dir: TempDir,
    }

    impl Fixture {
        fn new() -> Self {
            Self { dir: TempDir::new().unwrap() }
        }

        fn client(&self) -> LocalDirClient {
            LocalDirClient::new(self.dir.path())
        }

        fn put(
            &self,
            key: &str,
            raster: &Raster,
            mask: Option<&Array2<bool>>,
            date: Option<&str>,
            scl_band: Option<usize>,
        ) {
            write_raster(&self.dir.path().join(key), raster, mask, date, scl_band).unwrap();
        }
    }

    fn job(paths: &[&str]) -> IngestJob {
        IngestJob {
            scene_id: "scene-a".into(),
            hr_scene_path: "hr.bin".into(),
            lr_product_paths: paths.iter().map(|s| s.to_string()).collect(),
            date_window: ("2020-01-01".into(), "2020-12-31".into()),
            target_resolution_m: 10.0,
        }
    }

    /// Scene with given per-revisit cloud fractions and dates, for ranking
    /// tests.
    fn scene_with(fractions_dates: &[(f64, &str)]) -> Scene {
        let w = 10usize;
        let revisits = fractions_dates
            .iter()
            .map(|&(frac, date)| {
                let raster = const_raster(0.0, 10.0, 10.0, 1, w, 0.5);
                let cloudy_px = (frac * w as f64).round() as usize;
                let mask = Array2::from_shape_fn((1, w), |(_, j)| j < cloudy_px);
                Revisit::new(raster, date.to_string(), mask).unwrap()
            })
            .collect();
        Scene {
            scene_id: "rank".into(),
            revisits,
            hr_reference: const_raster(0.0, 10.0, 5.0, 2, 2 * w, 0.5),
            terrain_tags: BTreeSet::new(),
            truth: None,
        }
    }

    #[test]
    fn ranking_prefers_low_cloud_then_date_then_index() {
        let scene = scene_with(&[(0.3, "2020-01-01"), (0.0, "2020-01-02"), (0.1, "2020-01-03")]);
        assert_eq!(rank_revisits(&scene), vec![1, 2, 0]);

        let tied = scene_with(&[(0.2, "2020-03-01"), (0.2, "2020-01-01"), (0.2, "2020-02-01")]);
        assert_eq!(rank_revisits(&tied), vec![1, 2, 0]);

        let same = scene_with(&[(0.2, "2020-01-01"), (0.2, "2020-01-01")]);
        assert_eq!(rank_revisits(&same), vec![0, 1]);

        let single = scene_with(&[(0.7, "2020-01-01")]);
        assert_eq!(rank_revisits(&single), vec![0]);
    }

    #[test]
    fn ranking_is_a_permutation_ordered_by_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let entries: Vec<(f64, String)> = (0..17)
                .map(|_| {
                    let tenths = rng.random_range(0..=10);
                    let day = rng.random_range(1..=28);
                    (tenths as f64 / 10.0, format!("2020-01-{day:02}"))
                })
                .collect();
            let borrowed: Vec<(f64, &str)> =
                entries.iter().map(|(f, d)| (*f, d.as_str())).collect();
            let scene = scene_with(&borrowed);
            let order = rank_revisits(&scene);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..17).collect::<Vec<_>>(), "must be a permutation");
            for pair in order.windows(2) {
                let (a, b) = (&scene.revisits[pair[0]], &scene.revisits[pair[1]]);
                let key_a = (a.cloud_fraction, a.acquired_at.as_str(), pair[0]);
                let key_b = (b.cloud_fraction, b.acquired_at.as_str(), pair[1]);
                assert!(key_a <= key_b, "ordering violated: {key_a:?} > {key_b:?}");
            }
        }
    }

    #[test]
    fn identity_crop_single_clear_product() {
        let fx = Fixture::new();
        // HR 16x16 at 5 m covering x,y in [0,80]; product already on the
        // 8x8, 10 m target grid.
        let hr = ramp_raster(0.0, 80.0, 5.0, 16, 16);
        let lr = ramp_raster(0.0, 80.0, 10.0, 8, 8);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("p0.bin", &lr, None, Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["p0.bin"]), 2).unwrap();
        assert_eq!(scene.revisits.len(), 1);
        let rv = &scene.revisits[0];
        assert_eq!(rv.cloud_fraction, 0.0);
        assert_eq!(rv.acquired_at, "2020-06-01");
        assert_eq!(rv.raster.pixels.dim(), (1, 8, 8));
        assert_eq!(rv.raster.geo_transform, lr.geo_transform);
        // Bilinear resampling of an already-on-grid product is the identity
        // (f32 storage rounding aside).
        for (a, b) in rv.raster.pixels.iter().zip(lr.pixels.iter()) {
            assert!((a - b).abs() < 1e-6, "idempotence violated: {a} vs {b}");
        }
        // HR source is already on the 2x target grid, so area averaging is
        // the identity too.
        assert_eq!(scene.hr_reference.pixels.dim(), (1, 16, 16));
        for (a, b) in scene.hr_reference.pixels.iter().zip(hr.pixels.iter()) {
            assert!((a - b).abs() < 1e-6, "HR idempotence violated: {a} vs {b}");
        }
        assert_eq!(scene.sr_factor(), 2);
        scene.validate().unwrap();
    }

    #[test]
    fn mosaic_of_half_scenes_covers_every_pixel_exactly_once() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        // Two same-date products, each covering one horizontal half of the
        // 80 m extent.  Constant values identify the source of every output
        // pixel; zero would mean a seam gap (no source at all).
        let left = const_raster(0.0, 80.0, 10.0, 8, 4, 1.0);
        let right = const_raster(40.0, 80.0, 10.0, 8, 4, 2.0);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("left.bin", &left, None, Some("2020-06-01"), None);
        fx.put("right.bin", &right, None, Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["left.bin", "right.bin"]), 2).unwrap();
        assert_eq!(scene.revisits.len(), 1, "same-date products must mosaic into one revisit");
        let rv = &scene.revisits[0];
        assert_eq!(rv.cloud_fraction, 0.0, "full coverage expected");
        for r in 0..8 {
            for c in 0..8 {
                let expect = if c < 4 { 1.0 } else { 2.0 };
                let got = rv.raster.pixels[[0, r, c]];
                assert!(
                    (got - expect).abs() < 1e-6,
                    "pixel ({r},{c}) = {got}, want {expect} (exactly one source)"
                );
            }
        }
    }

    #[test]
    fn scl_nine_becomes_cloud_mask() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        fx.put("hr.bin", &hr, None, None, None);

        // Band 0 = data, band 1 = scene classification, all 9.
        let mut px = Array3::<f64>::zeros((2, 8, 8));
        px.index_axis_mut(ndarray::Axis(0), 0).fill(0.4);
        px.index_axis_mut(ndarray::Axis(0), 1).fill(9.0);
        let all9 = Raster::new(px, 10.0, north_up(0.0, 80.0, 10.0)).unwrap();
        fx.put("p0.bin", &all9, None, Some("2020-06-01"), Some(1));
        let scene = coregister(&fx.client(), &job(&["p0.bin"]), 2).unwrap();
        assert_eq!(scene.revisits[0].cloud_fraction, 1.0);
        assert_eq!(scene.revisits[0].raster.bands(), 1, "SCL band must not leak into data");

        // Only two specific pixels flagged.
        let mut px = Array3::<f64>::zeros((2, 8, 8));
        px.index_axis_mut(ndarray::Axis(0), 0).fill(0.4);
        px[[1, 2, 3]] = 9.0;
        px[[1, 7, 0]] = 9.0;
        px[[1, 4, 4]] = 4.0; // vegetated, not cloud
        let partial = Raster::new(px, 10.0, north_up(0.0, 80.0, 10.0)).unwrap();
        fx.put("p1.bin", &partial, None, Some("2020-06-02"), Some(1));
        let scene = coregister(
            &fx.client(),
            &IngestJob { lr_product_paths: vec!["p1.bin".into()], ..job(&[]) },
            2,
        )
        .unwrap();
        let mask = &scene.revisits[0].cloud_mask;
        assert!(mask[[2, 3]] && mask[[7, 0]]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn cloud_free_pixels_win_and_later_product_breaks_ties() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        fx.put("hr.bin", &hr, None, None, None);

        // clear.bin: value 1, no clouds.  cloudy.bin: value 2, SCL 9 all over.
        let clear = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        let mut px = Array3::<f64>::zeros((2, 8, 8));
        px.index_axis_mut(ndarray::Axis(0), 0).fill(2.0);
        px.index_axis_mut(ndarray::Axis(0), 1).fill(9.0);
        let cloudy = Raster::new(px, 10.0, north_up(0.0, 80.0, 10.0)).unwrap();
        fx.put("clear.bin", &clear, None, Some("2020-06-01"), None);
        fx.put("cloudy.bin", &cloudy, None, Some("2020-06-01"), Some(1));

        for order in [["clear.bin", "cloudy.bin"], ["cloudy.bin", "clear.bin"]] {
            let scene = coregister(&fx.client(), &job(&order), 2).unwrap();
            let rv = &scene.revisits[0];
            assert_eq!(rv.cloud_fraction, 0.0, "order {order:?}");
            assert!(
                rv.raster.pixels.iter().all(|&v| (v - 1.0).abs() < 1e-6),
                "cloud-free pixels must win regardless of input order {order:?}"
            );
        }

        // Both clear: the later product in input order wins.
        let clear2 = const_raster(0.0, 80.0, 10.0, 8, 8, 3.0);
        fx.put("clear2.bin", &clear2, None, Some("2020-06-01"), None);
        let scene = coregister(&fx.client(), &job(&["clear.bin", "clear2.bin"]), 2).unwrap();
        assert!(scene.revisits[0].raster.pixels.iter().all(|&v| (v - 3.0).abs() < 1e-6));
        let scene = coregister(&fx.client(), &job(&["clear2.bin", "clear.bin"]), 2).unwrap();
        assert!(scene.revisits[0].raster.pixels.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn product_outside_hr_bounds_is_empty_overlap() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        let far = const_raster(10_000.0, 80.0, 10.0, 8, 8, 1.0);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("far.bin", &far, None, Some("2020-06-01"), None);

        let err = coregister(&fx.client(), &job(&["far.bin"]), 2).err().unwrap();
        assert_eq!(err.kind(), "empty-overlap");

        // One overlapping product rescues the job; the far one is dropped.
        let near = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        fx.put("near.bin", &near, None, Some("2020-06-02"), None);
        let scene = coregister(&fx.client(), &job(&["far.bin", "near.bin"]), 2).unwrap();
        assert_eq!(scene.revisits.len(), 1);
        assert_eq!(scene.revisits[0].acquired_at, "2020-06-02");
    }

    #[test]
    fn inconsistent_band_counts_are_a_schema_error() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        fx.put("hr.bin", &hr, None, None, None);
        let one_band = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        let two_band = Raster::new(
            Array3::from_elem((2, 8, 8), 1.0),
            10.0,
            north_up(0.0, 80.0, 10.0),
        )
        .unwrap();
        fx.put("a.bin", &one_band, None, Some("2020-06-01"), None);
        fx.put("b.bin", &two_band, None, Some("2020-06-02"), None);

        let err = coregister(&fx.client(), &job(&["a.bin", "b.bin"]), 2).err().unwrap();
        assert_eq!(err.kind(), "schema");

        // A declared SCL band does not count as a data band: 1-band product
        // plus (1 data + 1 SCL) product are consistent.
        fx.put("c.bin", &two_band, None, Some("2020-06-02"), Some(1));
        let scene = coregister(&fx.client(), &job(&["a.bin", "c.bin"]), 2).unwrap();
        assert_eq!(scene.revisits.len(), 2);
        assert!(scene.revisits.iter().all(|r| r.raster.bands() == 1));
    }

    #[test]
    fn date_window_excludes_products() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        let lr = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("in.bin", &lr, None, Some("2020-06-01"), None);
        fx.put("out.bin", &lr, None, Some("2021-01-05"), None);

        let scene = coregister(&fx.client(), &job(&["in.bin", "out.bin"]), 2).unwrap();
        assert_eq!(scene.revisits.len(), 1);
        assert_eq!(scene.revisits[0].acquired_at, "2020-06-01");

        let err = coregister(&fx.client(), &job(&["out.bin"]), 2).err().unwrap();
        assert_eq!(err.kind(), "invalid-argument");

        let undated = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        fx.put("undated.bin", &undated, None, None, None);
        let err = coregister(&fx.client(), &job(&["undated.bin"]), 2).err().unwrap();
        assert_eq!(err.kind(), "schema");
    }

    #[test]
    fn bilinear_resampling_reproduces_affine_ramps() {
        let fx = Fixture::new();
        // Product at 5 m, finer than the 10 m target; a bilinear kernel
        // reconstructs an affine-in-world-coordinates image exactly at any
        // interior sample point.
        let hr = ramp_raster(0.0, 80.0, 5.0, 16, 16);
        let fine = ramp_raster(0.0, 80.0, 5.0, 16, 16);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("fine.bin", &fine, None, Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["fine.bin"]), 2).unwrap();
        let rv = &scene.revisits[0];
        assert_eq!(rv.raster.pixels.dim(), (1, 8, 8));
        for r in 0..8 {
            for c in 0..8 {
                let x = 0.0 + (c as f64 + 0.5) * 10.0;
                let y = 80.0 - (r as f64 + 0.5) * 10.0;
                let got = rv.raster.pixels[[0, r, c]];
                let want = ramp(x, y);
                assert!(
                    (got - want).abs() < 1e-6,
                    "ramp mismatch at ({r},{c}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn hr_area_average_matches_block_mean_when_commensurate() {
        let fx = Fixture::new();
        // HR native 2.5 m (32x32) over an 80 m extent; target HR grid is
        // 16x16 at 5 m, so each target pixel is the mean of a 2x2 block.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels = Array3::from_shape_fn((1, 32, 32), |_| rng.random_range(0.0..1.0));
        let hr = Raster::new(pixels.clone(), 2.5, north_up(0.0, 80.0, 2.5)).unwrap();
        let lr = const_raster(0.0, 80.0, 10.0, 8, 8, 0.5);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("p.bin", &lr, None, Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["p.bin"]), 2).unwrap();
        assert_eq!(scene.hr_reference.pixels.dim(), (1, 16, 16));
        for i in 0..16 {
            for j in 0..16 {
                let mean = (pixels[[0, 2 * i, 2 * j]]
                    + pixels[[0, 2 * i, 2 * j + 1]]
                    + pixels[[0, 2 * i + 1, 2 * j]]
                    + pixels[[0, 2 * i + 1, 2 * j + 1]])
                    / 4.0;
                let got = scene.hr_reference.pixels[[0, i, j]];
                assert!(
                    (got - mean).abs() < 1e-6,
                    "block mean mismatch at ({i},{j}): {got} vs {mean}"
                );
            }
        }
    }

    /// Independent oracle: mean of a piecewise-constant north-up source
    /// field over one world-space rectangle, by direct rectangle
    /// intersection.
    fn cell_average(
        src: &Array3<f64>,
        x0s: f64,
        y0s: f64,
        step: f64,
        (x_lo, x_hi, y_lo, y_hi): (f64, f64, f64, f64),
    ) -> f64 {
        let (_, hs, ws) = src.dim();
        let (mut acc, mut area) = (0.0, 0.0);
        for i in 0..hs {
            let sy_hi = y0s - i as f64 * step;
            let sy_lo = sy_hi - step;
            let oy = (y_hi.min(sy_hi) - y_lo.max(sy_lo)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for j in 0..ws {
                let sx_lo = x0s + j as f64 * step;
                let ox = (x_hi.min(sx_lo + step) - x_lo.max(sx_lo)).max(0.0);
                if ox > 0.0 {
                    acc += src[[0, i, j]] * ox * oy;
                    area += ox * oy;
                }
            }
        }
        acc / area
    }

    #[test]
    fn hr_area_average_handles_non_commensurate_grids() {
        let fx = Fixture::new();
        // HR native 4.8 m over 153.6 m: the 10 m target grid floor-fits to
        // 15 px (150 m), HR target 30 px at 5 m — no integer ratio anywhere.
        let hr = ramp_raster(0.0, 153.6, 4.8, 32, 32);
        let lr = const_raster(0.0, 153.6, 10.0, 15, 15, 0.5);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("p.bin", &lr, None, Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["p.bin"]), 2).unwrap();
        assert_eq!(scene.hr_reference.pixels.dim(), (1, 30, 30));
        for i in 0..30 {
            for j in 0..30 {
                let cell = (
                    j as f64 * 5.0,
                    (j + 1) as f64 * 5.0,
                    153.6 - (i + 1) as f64 * 5.0,
                    153.6 - i as f64 * 5.0,
                );
                let got = scene.hr_reference.pixels[[0, i, j]];
                let want = cell_average(&hr.pixels, 0.0, 153.6, 4.8, cell);
                assert!(
                    (got - want).abs() < 1e-6,
                    "area-average mismatch at ({i},{j}): {got} vs {want}"
                );
            }
        }

        // Constant input stays constant (weights sum to one).
        let flat = const_raster(0.0, 153.6, 4.8, 32, 32, 0.625);
        fx.put("hr2.bin", &flat, None, None, None);
        let scene = coregister(
            &fx.client(),
            &IngestJob { hr_scene_path: "hr2.bin".into(), ..job(&["p.bin"]) },
            2,
        )
        .unwrap();
        for &v in scene.hr_reference.pixels.iter() {
            assert!((v - 0.625).abs() < 1e-6);
        }
    }

    #[test]
    fn revisit_grids_agree_across_mixed_input_grids() {
        let fx = Fixture::new();
        let hr = ramp_raster(0.0, 80.0, 5.0, 16, 16);
        fx.put("hr.bin", &hr, None, None, None);
        // Three dates on three different native grids: on-grid 10 m, fine
        // 5 m, and a 10 m grid offset by 3 m covering only part of the scene.
        let on_grid = ramp_raster(0.0, 80.0, 10.0, 8, 8);
        let fine = ramp_raster(0.0, 80.0, 5.0, 16, 16);
        let offset = ramp_raster(3.0, 77.0, 10.0, 6, 6);
        fx.put("a.bin", &on_grid, None, Some("2020-06-03"), None);
        fx.put("b.bin", &fine, None, Some("2020-06-01"), None);
        fx.put("c.bin", &offset, None, Some("2020-06-02"), None);

        let scene = coregister(&fx.client(), &job(&["a.bin", "b.bin", "c.bin"]), 2).unwrap();
        scene.validate().unwrap();
        assert_eq!(scene.revisits.len(), 3);
        let first = &scene.revisits[0].raster;
        for rv in &scene.revisits {
            assert_eq!(rv.raster.pixels.dim(), first.pixels.dim());
            assert_eq!(rv.raster.geo_transform, first.geo_transform);
        }
        // Revisits come out in date order.
        let dates: Vec<&str> = scene.revisits.iter().map(|r| r.acquired_at.as_str()).collect();
        assert_eq!(dates, vec!["2020-06-01", "2020-06-02", "2020-06-03"]);
        // The offset product leaves uncovered pixels, which must be flagged
        // unusable rather than silently zero-filled.
        let partial = &scene.revisits[1];
        assert!(partial.cloud_fraction > 0.0);
        assert!(partial.cloud_mask[[0, 7]], "far corner is outside the offset product");
        assert_eq!(scene.sr_factor(), 2);
    }

    #[test]
    fn explicit_mask_files_merge_into_cloud_mask() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        let lr = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        let mut mask = Array2::from_elem((8, 8), false);
        mask[[1, 1]] = true;
        mask[[6, 2]] = true;
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("p.bin", &lr, Some(&mask), Some("2020-06-01"), None);

        let scene = coregister(&fx.client(), &job(&["p.bin"]), 2).unwrap();
        let got = &scene.revisits[0].cloud_mask;
        assert!(got[[1, 1]] && got[[6, 2]]);
        assert_eq!(got.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn local_dir_client_round_trips_and_reports_missing_files() {
        let fx = Fixture::new();
        let raster = ramp_raster(0.0, 40.0, 10.0, 4, 4);
        fx.put("sub.bin", &raster, None, Some("2020-01-01"), None);
        // Key resolution is relative to the client root.
        let loaded = fx.client().fetch("sub.bin").unwrap();
        assert_eq!(loaded.raster.pixels.dim(), (1, 4, 4));
        assert_eq!(loaded.header.acquired_at.as_deref(), Some("2020-01-01"));
        for (a, b) in loaded.raster.pixels.iter().zip(raster.pixels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let err = fx.client().fetch("missing.bin").err().unwrap();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn job_validation_rejects_bad_fields() {
        let good = job(&["p.bin"]);
        good.validate().unwrap();

        let mut bad = job(&["p.bin"]);
        bad.date_window = ("2021-01-01".into(), "2020-01-01".into());
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");

        let mut bad = job(&["p.bin"]);
        bad.target_resolution_m = -10.0;
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");

        let bad = job(&[]);
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");

        let mut bad = job(&["p.bin"]);
        bad.scene_id.clear();
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");
    }

    #[test]
    fn rotated_geo_transforms_are_rejected() {
        let fx = Fixture::new();
        let mut hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        hr.geo_transform[2] = 0.3;
        let lr = const_raster(0.0, 80.0, 10.0, 8, 8, 1.0);
        fx.put("hr.bin", &hr, None, None, None);
        fx.put("p.bin", &lr, None, Some("2020-06-01"), None);
        let err = coregister(&fx.client(), &job(&["p.bin"]), 2).err().unwrap();
        assert_eq!(err.kind(), "schema");
    }

    #[test]
    fn header_scale_converts_to_physical_units() {
        let fx = Fixture::new();
        let hr = const_raster(0.0, 80.0, 5.0, 16, 16, 0.5);
        fx.put("hr.bin", &hr, None, None, None);
        // Integer digital numbers with a 1e-4 scale, as archive products
        // typically encode reflectance; band 1 is categorical scene
        // classification, which the scale must not touch.
        let mut px = Array3::<f64>::zeros((2, 8, 8));
        px.index_axis_mut(ndarray::Axis(0), 0).fill(4000.0);
        px[[1, 3, 3]] = 9.0;
        let dn = Raster::new(px, 10.0, north_up(0.0, 80.0, 10.0)).unwrap();
        fx.put("dn.bin", &dn, None, Some("2020-06-01"), Some(1));
        // Rewrite the sidecar with a scale factor.
        let sidecar = fx.dir.path().join("dn.json");
        let mut header: crate::io::RasterHeader = crate::io::read_json(&sidecar).unwrap();
        header.scale = 1e-4;
        crate::io::atomic_write_json(&sidecar, &header).unwrap();

        let scene = coregister(&fx.client(), &job(&["dn.bin"]), 2).unwrap();
        for &v in scene.revisits[0].raster.pixels.iter() {
            assert!((v - 0.4).abs() < 1e-6, "scale must apply: got {v}");
        }
        let mask = &scene.revisits[0].cloud_mask;
        assert!(mask[[3, 3]], "classification code 9 must survive a data scale factor");
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    }
}
