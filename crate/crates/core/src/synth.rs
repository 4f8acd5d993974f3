//! Synthetic-degradation scene generator.
//!
//! Produces scenes with a known high-resolution ground truth and a revisit
//! stack degraded by a controlled, fully recorded pipeline:
//!
//! HR content → per-revisit sub-pixel shift → Gaussian blur → area-average
//! downsample → additive Gaussian noise → per-band affine colour transform →
//! cloud blobs.
//!
//! Every random choice derives from one seeded stream, so a (seed, spec)
//! pair is a complete, bit-reproducible description of the scene, and every
//! degradation parameter is returned in [`SyntheticTruth`] so tests can
//! invert the pipeline.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Raster, Revisit, Scene, TerrainTag};
use crate::error::{Error, Result};
use crate::image::{bicubic_resize, block_downsample, gaussian_blur, translate_content};

/// Scene content: piecewise-constant rectangles ("buildings") over a smooth
/// background.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContentSpec {
    /// Building count range (inclusive).
    pub buildings: (usize, usize),
    /// Building side length range in HR pixels (inclusive).
    pub building_size: (usize, usize),
    /// Brightness offset range added over the background.
    pub building_contrast: (f64, f64),
    /// Approximate feature size of the smooth background, in HR pixels.
    pub background_scale: usize,
    /// Background value range.
    pub background_range: (f64, f64),
}

impl Default for ContentSpec {
    fn default() -> Self {
        Self {
            buildings: (6, 12),
            building_size: (6, 14),
            building_contrast: (0.25, 0.4),
            background_scale: 24,
            background_range: (0.2, 0.45),
        }
    }
}

/// Degradation parameters of the LR simulation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DegradationSpec {
    /// Per-revisit translation magnitude bound, HR pixels (uniform ±).
    pub shift_max_px: f64,
    /// Gaussian blur sigma at HR scale before downsampling; 0 disables.
    pub blur_sigma: f64,
    /// Additive Gaussian noise sigma at LR scale; 0 disables.
    pub noise_sigma: f64,
    /// Per-band multiplicative gain range (1, 1) disables.
    pub color_gain: (f64, f64),
    /// Per-band additive bias range (0, 0) disables.
    pub color_bias: (f64, f64),
    /// Per-revisit cloud coverage target range; (0, 0) disables.
    pub cloud_fraction: (f64, f64),
    pub content: ContentSpec,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            shift_max_px: 2.0,
            blur_sigma: 1.0,
            noise_sigma: 0.01,
            color_gain: (1.0, 1.0),
            color_bias: (0.0, 0.0),
            cloud_fraction: (0.0, 0.0),
            content: ContentSpec::default(),
        }
    }
}

impl DegradationSpec {
    /// No shift, blur, noise, colour gap or clouds: LR is an exact area
    /// average of HR (and equals HR at s = 1).
    pub fn identity() -> Self {
        Self {
            shift_max_px: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            color_gain: (1.0, 1.0),
            color_bias: (0.0, 0.0),
            cloud_fraction: (0.0, 0.0),
            content: ContentSpec::default(),
        }
    }
}

/// Everything needed to invert / verify the degradation of one scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub seed: u64,
    pub spec: DegradationSpec,
    /// Per revisit: content displacement `(dx, dy)` in HR pixels.
    pub shifts: Vec<(f64, f64)>,
    /// Per revisit, per band: `(gain, bias)` of the affine colour transform.
    pub color: Vec<Vec<(f64, f64)>>,
    /// Ground-truth building footprints on the HR grid.
    #[serde(skip)]
    pub building_mask: Option<Array2<bool>>,
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn uniform_usize(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Smooth background: coarse random grid bicubically upsampled to HR size.
fn smooth_background(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    spec: &ContentSpec,
) -> Array3<f64> {
    let (lo, hi) = spec.background_range;
    let ch = (h / spec.background_scale).max(2);
    let cw = (w / spec.background_scale).max(2);
    // One shared spatial pattern, band-specific gentle gain, so bands are
    // correlated the way multi-spectral imagery is.
    let coarse = Array2::from_shape_fn((ch, cw), |_| rng.random_range(lo..hi));
    let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.9..1.1)).collect();
    let coarse3 = coarse
        .clone()
        .into_shape_with_order((1, ch, cw))
        .unwrap();
    let up = bicubic_resize(&coarse3, h, w);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| (up[[0, i, j]] * gains[ci]).clamp(0.0, 1.0))
}

/// Place disjoint axis-aligned rectangles with >= 2 px separation.
/// Returns the building mask; brightness offsets are applied by the caller.
fn place_buildings(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    spec: &ContentSpec,
    hr: &mut Array3<f64>,
) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    let mut occupied = Array2::from_elem((h, w), false); // mask inflated by the 2 px gap
    let count = uniform_usize(rng, spec.buildings);
    let c = hr.dim().0;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count && attempts < count * 40 {
        attempts += 1;
        let bh = uniform_usize(rng, spec.building_size).min(h.saturating_sub(2));
        let bw = uniform_usize(rng, spec.building_size).min(w.saturating_sub(2));
        if bh < 2 || bw < 2 || h <= bh + 1 || w <= bw + 1 {
            continue;
        }
        let r0 = rng.random_range(1..h - bh);
        let c0 = rng.random_range(1..w - bw);
        // Reject overlap with any earlier building inflated by the gap.
        let mut clash = false;
        'scan: for i in r0..r0 + bh {
            for j in c0..c0 + bw {
                if occupied[[i, j]] {
                    clash = true;
                    break 'scan;
                }
            }
        }
        if clash {
            continue;
        }
        let delta = uniform_in(rng, spec.building_contrast);
        for i in r0..r0 + bh {
            for j in c0..c0 + bw {
                mask[[i, j]] = true;
                for ci in 0..c {
                    hr[[ci, i, j]] = (hr[[ci, i, j]] + delta).clamp(0.0, 1.0);
                }
            }
        }
        let gap = 2usize;
        for i in r0.saturating_sub(gap)..(r0 + bh + gap).min(h) {
            for j in c0.saturating_sub(gap)..(c0 + bw + gap).min(w) {
                occupied[[i, j]] = true;
            }
        }
        placed += 1;
    }
    mask
}

/// Grow elliptical cloud blobs until the target coverage is reached, then
/// brighten the covered pixels (clouds are both marked and visible).
fn add_clouds(
    rng: &mut ChaCha8Rng,
    pixels: &mut Array3<f64>,
    target_fraction: f64,
) -> Array2<bool> {
    let (c, h, w) = pixels.dim();
    let mut mask = Array2::from_elem((h, w), false);
    if target_fraction <= 0.0 {
        return mask;
    }
    let total = (h * w) as f64;
    let mut covered = 0usize;
    let max_r = (h.min(w) as f64 / 4.0).max(2.0);
    for _ in 0..64 {
        if covered as f64 / total >= target_fraction {
            break;
        }
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(1.5..max_r);
        let rx = rng.random_range(1.5..max_r);
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 + 0.5 - cy) / ry;
                let dx = (j as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 && !mask[[i, j]] {
                    mask[[i, j]] = true;
                    covered += 1;
                    let glow: f64 = rng.random_range(-0.03..0.03);
                    for ci in 0..c {
                        pixels[[ci, i, j]] = (0.88 + glow).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    mask
}

/// Day `index` (0-based) of 2020, as an ISO date. Enough calendar for
/// synthetic acquisition dates; panics beyond one year.
fn synth_date(index: usize) -> String {
    const DAYS: [usize; 12] = [31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut day = index;
    for (m, &len) in DAYS.iter().enumerate() {
        if day < len {
            return format!("2020-{:02}-{:02}", m + 1, day + 1);
        }
        day -= len;
    }
    panic!("synthetic date index {index} exceeds one year");
}

/// Generate one synthetic scene.  Deterministic per (seed, arguments).
///
/// `s` may be 1 (plain degradation, no scale change), 2 or 3.
pub fn generate_synthetic_scene(
    seed: u64,
    t: usize,
    c: usize,
    hr_dims: (usize, usize),
    s: usize,
    deg: &DegradationSpec,
) -> Result<Scene> {
    let (h, w) = hr_dims;
    if t < 1 {
        return Err(Error::invalid("need at least one revisit"));
    }
    if !(1..=3).contains(&s) {
        return Err(Error::invalid(format!("sr factor {s} not in 1..=3")));
    }
    if c < 1 || h < 8 || w < 8 {
        return Err(Error::invalid(format!("dims {c}x{h}x{w} too small")));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("HR dims {h}x{w} not divisible by s={s}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hr = smooth_background(&mut rng, c, h, w, &deg.content);
    let building_mask = place_buildings(&mut rng, h, w, &deg.content, &mut hr);

    let lr_res = 10.0;
    let hr_res = lr_res / s as f64;
    let x0 = 500_000.0;
    let y0 = 4_000_000.0;
    let hr_raster = Raster::new(hr.clone(), hr_res, [x0, hr_res, 0.0, y0, 0.0, -hr_res])?;
    let lr_geo = [x0, lr_res, 0.0, y0, 0.0, -lr_res];

    let noise = if deg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, deg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };

    let mut revisits = Vec::with_capacity(t);
    let mut shifts = Vec::with_capacity(t);
    let mut colors = Vec::with_capacity(t);
    for ti in 0..t {
        let (dx, dy) = if deg.shift_max_px > 0.0 {
            (
                rng.random_range(-deg.shift_max_px..deg.shift_max_px),
                rng.random_range(-deg.shift_max_px..deg.shift_max_px),
            )
        } else {
            (0.0, 0.0)
        };
        shifts.push((dx, dy));

        let shifted = if dx == 0.0 && dy == 0.0 {
            hr.clone()
        } else {
            translate_content(&hr, dx, dy)
        };
        let blurred = gaussian_blur(&shifted, deg.blur_sigma);
        let mut lr = block_downsample(&blurred, s);

        if let Some(n) = &noise {
            for v in lr.iter_mut() {
                *v += n.sample(&mut rng);
            }
        }

        let mut band_color = Vec::with_capacity(c);
        for ci in 0..c {
            let gain = uniform_in(&mut rng, deg.color_gain);
            let bias = uniform_in(&mut rng, deg.color_bias);
            band_color.push((gain, bias));
            if gain != 1.0 || bias != 0.0 {
                for v in lr.index_axis_mut(ndarray::Axis(0), ci).iter_mut() {
                    *v = gain * *v + bias;
                }
            }
        }
        colors.push(band_color);
        lr.mapv_inplace(|v| v.clamp(0.0, 1.0));

        let target_cloud = uniform_in(&mut rng, deg.cloud_fraction);
        let mask = add_clouds(&mut rng, &mut lr, target_cloud);

        let raster = Raster::new(lr, lr_res, lr_geo)?;
        revisits.push(Revisit::new(raster, synth_date(ti * 5), mask)?);
    }

    let scene = Scene {
        scene_id: format!(
            "{:04}E-{:04}N_{:04}_{:04}",
            seed % 10_000,
            (seed / 10_000) % 10_000,
            h,
            w
        ),
        revisits,
        hr_reference: hr_raster,
        terrain_tags: BTreeSet::from([TerrainTag::Urban, TerrainTag::Agri]),
        truth: Some(SyntheticTruth {
            seed,
            spec: deg.clone(),
            shifts,
            color: colors,
            building_mask: Some(building_mask),
        }),
    };
    scene.validate()?;
    Ok(scene)
}
