//! Downstream-utility evaluation on building footprints: build the five
//! comparison inputs at the HR grid, train a pluggable segmentation backbone,
//! score semantic IoU, vectorize predicted instances, and match them against
//! ground-truth polygons at an IoU threshold.

use std::collections::HashSet;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{scene_stack, Scene};
use crate::error::{Error, Result};
use crate::image::bicubic_resize;
use crate::ingest::rank_revisits;
use crate::io::BuildingCollection;
use crate::misr::HighResNet;
use crate::sisr::SrResNet;
use srfuse_autograd::nn::{Conv2d, ParamStore};
use srfuse_autograd::optim::{Adam, ReduceLrOnPlateau};
use srfuse_autograd::{Arr, Tape, Var};

// ---------------------------------------------------------------------------
// Input configurations
// ---------------------------------------------------------------------------

/// The five comparison inputs evaluated on the segmentation task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Bicubic upsample of the clearest revisit.
    BicubicBest1,
    /// Single-image network output on the clearest revisit.
    SisrBest1,
    /// Channel concatenation of bicubic upsamples of the 4 clearest revisits.
    ConcatBest4Bicubic,
    /// Fusion-network output on all revisits.
    MisrAll,
    /// The HR reference raster itself.
    HrNative,
}

impl InputKind {
    pub const ALL: [InputKind; 5] = [
        InputKind::BicubicBest1,
        InputKind::SisrBest1,
        InputKind::ConcatBest4Bicubic,
        InputKind::MisrAll,
        InputKind::HrNative,
    ];

    /// Channels produced for a scene with `bands` spectral bands.
    pub fn channels(&self, bands: usize) -> usize {
        match self {
            InputKind::ConcatBest4Bicubic => 4 * bands,
            _ => bands,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InputKind::BicubicBest1 => "bicubic_best1",
            InputKind::SisrBest1 => "sisr_best1",
            InputKind::ConcatBest4Bicubic => "concat_best4_bicubic",
            InputKind::MisrAll => "misr_all",
            InputKind::HrNative => "hr_native",
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown input kind {s:?}")))
    }
}

/// Trained super-resolution models available to [`build_input`].
#[derive(Default)]
pub struct SrModels<'a> {
    pub sisr: Option<(&'a SrResNet, &'a ParamStore)>,
    pub misr: Option<(&'a HighResNet, &'a ParamStore)>,
}

/// Assemble one segmentation input at the HR grid.
pub fn build_input(scene: &Scene, kind: InputKind, models: &SrModels<'_>) -> Result<Array3<f64>> {
    scene.validate()?;
    let (hh, hw) = (scene.hr_reference.height(), scene.hr_reference.width());
    let order = rank_revisits(scene);
    match kind {
        InputKind::HrNative => Ok(scene.hr_reference.pixels.clone()),
        InputKind::BicubicBest1 => {
            let best = &scene.revisits[order[0]].raster.pixels;
            Ok(bicubic_resize(best, hh, hw))
        }
        InputKind::SisrBest1 => {
            let (net, store) = models
                .sisr
                .ok_or_else(|| Error::invalid("sisr_best1 input needs a trained SISR model"))?;
            let best = &scene.revisits[order[0]].raster.pixels;
            let sr = net.forward_image(store, &best.view())?;
            if sr.dim().1 != hh || sr.dim().2 != hw {
                return Err(Error::shape(format!(
                    "SISR output {:?} does not land on the HR grid {hh}x{hw}",
                    sr.dim()
                )));
            }
            Ok(sr)
        }
        InputKind::ConcatBest4Bicubic => {
            // The 4 clearest revisits; short scenes repeat the clearest.
            let chosen: Vec<usize> =
                (0..4).map(|i| *order.get(i).unwrap_or(&order[0])).collect();
            let bands = scene.revisits[0].raster.bands();
            let mut out = Array3::<f64>::zeros((4 * bands, hh, hw));
            for (slot, &idx) in chosen.iter().enumerate() {
                let up = bicubic_resize(&scene.revisits[idx].raster.pixels, hh, hw);
                for b in 0..bands {
                    out.index_axis_mut(Axis(0), slot * bands + b)
                        .assign(&up.index_axis(Axis(0), b));
                }
            }
            Ok(out)
        }
        InputKind::MisrAll => {
            let (net, store) = models
                .misr
                .ok_or_else(|| Error::invalid("misr_all input needs a trained MISR model"))?;
            let (stack, masks) = scene_stack(scene)?;
            let sr = net.forward_scene(store, &stack.view(), &masks.view())?;
            if sr.dim().1 != hh || sr.dim().2 != hw {
                return Err(Error::shape(format!(
                    "MISR output {:?} does not land on the HR grid {hh}x{hw}",
                    sr.dim()
                )));
            }
            Ok(sr)
        }
    }
}

// ---------------------------------------------------------------------------
// Semantic IoU
// ---------------------------------------------------------------------------

/// Intersection over union of two boolean masks: TP/(TP+FP+FN), defined as
/// 1.0 when both masks are empty.
pub fn semantic_iou(pred: &ArrayView2<bool>, gt: &ArrayView2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("mask dims {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

// ---------------------------------------------------------------------------
// Polygonization
// ---------------------------------------------------------------------------

/// One connected component of a mask together with its traced boundary.
///
/// `rings` are closed pixel-boundary loops on the integer corner lattice,
/// with `(x, y) = (col, row)` and y growing downward.  Even-odd rasterization
/// of the rings at pixel centres reproduces `pixels` exactly; components with
/// holes or corner-touching parts simply carry several rings.
#[derive(Clone, Debug)]
pub struct Instance {
    /// Component pixels in scan order (row, col).
    pub pixels: Vec<(usize, usize)>,
    pub rings: Vec<Vec<(f64, f64)>>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Build an instance from an explicit pixel set (rings traced).
    pub fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        let rings = trace_rings(&pixels);
        Self { pixels, rings }
    }
}

/// Pixel-set IoU between two instances on a shared grid.
pub fn instance_iou(a: &Instance, b: &Instance) -> f64 {
    if a.pixels.is_empty() && b.pixels.is_empty() {
        return 1.0;
    }
    let set: HashSet<&(usize, usize)> = a.pixels.iter().collect();
    let inter = b.pixels.iter().filter(|p| set.contains(p)).count();
    let union = a.pixels.len() + b.pixels.len() - inter;
    inter as f64 / union as f64
}

/// 8-connected components of `mask` with at least `min_area` pixels, each
/// traced to closed boundary polygons.
pub fn polygonize(mask: &ArrayView2<bool>, min_area: usize) -> Vec<Instance> {
    let (h, w) = mask.dim();
    let mut label = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[[r0, c0]] || label[[r0, c0]] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = vec![(r0, c0)];
            label[[r0, c0]] = true;
            while let Some((r, c)) = queue.pop() {
                pixels.push((r, c));
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[[nr, nc]] && !label[[nr, nc]] {
                            label[[nr, nc]] = true;
                            queue.push((nr, nc));
                        }
                    }
                }
            }
            if pixels.len() >= min_area {
                out.push(Instance::from_pixels(pixels));
            }
        }
    }
    out
}

/// Trace all closed boundary loops of a pixel set.  Each exposed pixel side
/// contributes one directed unit edge (interior on the left); the edges are
/// chained into cycles and collinear runs are merged.
fn trace_rings(pixels: &[(usize, usize)]) -> Vec<Vec<(f64, f64)>> {
    let set: HashSet<&(usize, usize)> = pixels.iter().collect();
    let inside = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && set.contains(&(r as usize, c as usize))
    };
    // Directed edges keyed by start corner (x, y) on the integer lattice.
    let mut edges: std::collections::HashMap<(i64, i64), Vec<(i64, i64)>> =
        std::collections::HashMap::new();
    let mut push = |from: (i64, i64), to: (i64, i64)| {
        edges.entry(from).or_default().push(to);
    };
    for &(r, c) in pixels {
        let (x, y) = (c as i64, r as i64);
        let (ri, ci) = (r as isize, c as isize);
        if !inside(ri - 1, ci) {
            push((x, y), (x + 1, y)); // top, left→right
        }
        if !inside(ri, ci + 1) {
            push((x + 1, y), (x + 1, y + 1)); // right, top→bottom
        }
        if !inside(ri + 1, ci) {
            push((x + 1, y + 1), (x, y + 1)); // bottom, right→left
        }
        if !inside(ri, ci - 1) {
            push((x, y + 1), (x, y)); // left, bottom→top
        }
    }
    let mut rings = Vec::new();
    // Deterministic iteration: repeatedly start from the smallest keyed
    // corner that still has an unused edge.
    loop {
        let start = match edges.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| *k).min() {
            Some(s) => s,
            None => break,
        };
        let mut ring_corners = vec![start];
        let mut current = start;
        loop {
            let outs = edges.get_mut(&current).expect("boundary edges must chain");
            outs.sort_unstable();
            let next = outs.pop().expect("boundary edges must chain");
            if next == start {
                break;
            }
            ring_corners.push(next);
            current = next;
        }
        // Merge collinear runs.
        let n = ring_corners.len();
        let mut ring = Vec::new();
        for i in 0..n {
            let prev = ring_corners[(i + n - 1) % n];
            let here = ring_corners[i];
            let next = ring_corners[(i + 1) % n];
            let d1 = (here.0 - prev.0, here.1 - prev.1);
            let d2 = (next.0 - here.0, next.1 - here.1);
            if d1 != d2 {
                ring.push((here.0 as f64, here.1 as f64));
            }
        }
        rings.push(ring);
    }
    rings
}

/// Even-odd rasterization of polygon rings onto an `h`×`w` grid, testing
/// pixel centres.
pub fn rasterize_rings(rings: &[Vec<(f64, f64)>], h: usize, w: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((h, w), false);
    for r in 0..h {
        let cy = r as f64 + 0.5;
        for c in 0..w {
            let cx = c as f64 + 0.5;
            let mut inside = false;
            for ring in rings {
                let n = ring.len();
                if n < 3 {
                    continue;
                }
                for k in 0..n {
                    let (x1, y1) = ring[k];
                    let (x2, y2) = ring[(k + 1) % n];
                    if (y1 > cy) != (y2 > cy) {
                        let x_cross = x1 + (cy - y1) * (x2 - x1) / (y2 - y1);
                        if cx < x_cross {
                            inside = !inside;
                        }
                    }
                }
            }
            out[[r, c]] = inside;
        }
    }
    out
}

/// Rasterize every ground-truth feature of a collection onto the grid,
/// dropping features whose footprint is empty after rasterization.
pub fn gt_instances(collection: &BuildingCollection, h: usize, w: usize) -> Vec<Instance> {
    collection
        .features
        .iter()
        .filter_map(|f| {
            let mask = rasterize_rings(&f.rings, h, w);
            let pixels: Vec<(usize, usize)> = mask
                .indexed_iter()
                .filter_map(|((r, c), &m)| m.then_some((r, c)))
                .collect();
            (!pixels.is_empty()).then(|| Instance::from_pixels(pixels))
        })
        .collect()
}

/// Union footprint mask of every feature in a collection (HR grid).
pub fn footprint_mask(collection: &BuildingCollection, h: usize, w: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((h, w), false);
    for f in &collection.features {
        let m = rasterize_rings(&f.rings, h, w);
        out.zip_mut_with(&m, |o, &v| *o = *o || v);
    }
    out
}

// ---------------------------------------------------------------------------
// Instance matching
// ---------------------------------------------------------------------------

/// Result of matching predicted against ground-truth instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceMatchResult {
    /// `(pred_idx, gt_idx, iou)` in the order the greedy matcher fixed them.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
    pub threshold: f64,
}

impl InstanceMatchResult {
    pub fn precision(&self) -> f64 {
        let n_pred = self.matches.len() + self.unmatched_pred.len();
        if n_pred == 0 {
            0.0
        } else {
            self.matches.len() as f64 / n_pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let n_gt = self.matches.len() + self.unmatched_gt.len();
        if n_gt == 0 {
            0.0
        } else {
            self.matches.len() as f64 / n_gt as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Greedy matching over an explicit IoU matrix `[n_pred × n_gt]`: pairs are
/// taken in descending IoU order (ties broken by indices), each side used at
/// most once, and pairs below the threshold never match.  `strict` switches
/// the comparison from `iou >= threshold` to `iou > threshold`.
pub fn match_by_iou(
    iou: &Array2<f64>,
    threshold: f64,
    strict: bool,
) -> Result<InstanceMatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} must be in (0, 1]")));
    }
    let (np, ng) = iou.dim();
    let passes =
        |v: f64| if strict { v > threshold } else { v >= threshold };
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for p in 0..np {
        for g in 0..ng {
            if passes(iou[[p, g]]) {
                pairs.push((p, g, iou[[p, g]]));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; np];
    let mut used_g = vec![false; ng];
    let mut matches = Vec::new();
    for (p, g, v) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            matches.push((p, g, v));
        }
    }
    Ok(InstanceMatchResult {
        matches,
        unmatched_pred: (0..np).filter(|&p| !used_p[p]).collect(),
        unmatched_gt: (0..ng).filter(|&g| !used_g[g]).collect(),
        threshold,
    })
}

/// Greedy instance matching at an IoU threshold (inclusive by default).
pub fn match_instances(
    pred: &[Instance],
    gt: &[Instance],
    threshold: f64,
    strict: bool,
) -> Result<InstanceMatchResult> {
    let mut iou = Array2::<f64>::zeros((pred.len(), gt.len()));
    for (p, pi) in pred.iter().enumerate() {
        for (g, gi) in gt.iter().enumerate() {
            iou[[p, g]] = instance_iou(pi, gi);
        }
    }
    match_by_iou(&iou, threshold, strict)
}

/// Maximum achievable match count over the same IoU matrix, by exhaustive
/// assignment (bitmask dynamic program; intended for small instances).
pub fn optimal_match_count(iou: &Array2<f64>, threshold: f64, strict: bool) -> usize {
    let (np, ng) = iou.dim();
    assert!(ng < 16, "exhaustive matcher is for small instances only");
    let passes = |v: f64| if strict { v > threshold } else { v >= threshold };
    let mut memo = vec![u8::MAX; (np + 1) << ng];
    fn dp(
        p: usize,
        mask: usize,
        np: usize,
        ng: usize,
        iou: &Array2<f64>,
        passes: &dyn Fn(f64) -> bool,
        memo: &mut [u8],
    ) -> u8 {
        if p == np {
            return 0;
        }
        let key = (p << ng) | mask;
        if memo[key] != u8::MAX {
            return memo[key];
        }
        let mut best = dp(p + 1, mask, np, ng, iou, passes, memo);
        for g in 0..ng {
            if mask & (1 << g) == 0 && passes(iou[[p, g]]) {
                let cand = 1 + dp(p + 1, mask | (1 << g), np, ng, iou, passes, memo);
                best = best.max(cand);
            }
        }
        memo[key] = best;
        best
    }
    dp(0, 0, np, ng, iou, &passes, &mut memo) as usize
}

// ---------------------------------------------------------------------------
// Segmentation backbone and training
// ---------------------------------------------------------------------------

/// A model producing one logit plane from a multi-channel input.  Implement
/// this to slot in an external architecture.
pub trait SegmentationBackbone {
    /// `[N, C, H, W]` → logits `[N, 1, H, W]`.
    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var>;
    fn in_channels(&self) -> usize;
}

/// Default backbone: a compact fully-convolutional net (three 3×3 conv+ReLU
/// stages and a 1×1 logit head), resolution-preserving.
pub struct CompactFcn {
    in_channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Conv2d,
}

impl CompactFcn {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        if in_channels < 1 || hidden < 1 {
            return Err(Error::invalid("CompactFcn needs in_channels >= 1 and hidden >= 1"));
        }
        Ok(Self {
            in_channels,
            conv1: Conv2d::init(store, rng, &format!("{prefix}.conv1"), in_channels, hidden, 3, 1, 1),
            conv2: Conv2d::init(store, rng, &format!("{prefix}.conv2"), hidden, hidden, 3, 1, 1),
            conv3: Conv2d::init(store, rng, &format!("{prefix}.conv3"), hidden, hidden, 3, 1, 1),
            head: Conv2d::init(store, rng, &format!("{prefix}.head"), hidden, 1, 1, 1, 0),
        })
    }
}

impl SegmentationBackbone for CompactFcn {
    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "backbone expects [N, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let y = self.conv1.forward(t, store, x);
        let y = t.relu(y);
        let y = self.conv2.forward(t, store, y);
        let y = t.relu(y);
        let y = self.conv3.forward(t, store, y);
        let y = t.relu(y);
        Ok(self.head.forward(t, store, y))
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }
}

/// One training/validation example: input image and building mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub input: Array3<f64>,
    pub target: Array2<bool>,
}

/// Training hyper-parameters (defaults match the evaluation protocol).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0007,
            max_epochs: 50,
            plateau_patience: 2,
            lr_decay_factor: 0.5,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Per-epoch log record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub lr_reduced: bool,
}

/// Training outcome; the store is left holding the best-validation weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegReport {
    pub config: SegTrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub log: Vec<SegEpochLog>,
}

fn stack_batch(samples: &[&SegSample]) -> (Arr, Arr) {
    let (c, h, w) = samples[0].input.dim();
    let n = samples.len();
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let mut y = Array4::<f64>::zeros((n, 1, h, w));
    for (k, s) in samples.iter().enumerate() {
        x.index_axis_mut(Axis(0), k).assign(&s.input);
        for i in 0..h {
            for j in 0..w {
                y[[k, 0, i, j]] = s.target[[i, j]] as u8 as f64;
            }
        }
    }
    (x.into_dyn(), y.into_dyn())
}

/// Predicted mask: logits thresholded at zero (probability 0.5).
pub fn predict_mask(
    backbone: &dyn SegmentationBackbone,
    store: &ParamStore,
    input: &ArrayView3<f64>,
) -> Result<Array2<bool>> {
    let mut t = Tape::new();
    let x = t.constant(input.to_owned().insert_axis(Axis(0)).into_dyn());
    let logits = backbone.forward(&mut t, store, x)?;
    let v = t.value(logits);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| v[[0, 0, i, j]] > 0.0))
}

/// Mean semantic IoU of thresholded predictions over a sample set.
pub fn mean_iou(
    backbone: &dyn SegmentationBackbone,
    store: &ParamStore,
    samples: &[SegSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot score an empty sample set"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = predict_mask(backbone, store, &s.input.view())?;
        total += semantic_iou(&pred.view(), &s.target.view())?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean binary-cross-entropy of a sample set, forward only.
fn mean_bce(
    backbone: &dyn SegmentationBackbone,
    store: &ParamStore,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&SegSample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size) {
        let (x, y) = stack_batch(chunk);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let logits = backbone.forward(&mut t, store, xv)?;
        let loss = t.bce_with_logits(logits, &y);
        // All samples share one raster size, so the per-batch means can be
        // recombined by batch length.
        total += t.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Binary-cross-entropy training with plateau learning-rate decay; restores
/// the best-validation-IoU weights into `store` before returning.  When
/// `val` is empty the training set doubles as the validation set.
pub fn train_segmentation(
    store: &mut ParamStore,
    backbone: &dyn SegmentationBackbone,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SegTrainConfig,
) -> Result<SegReport> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size < 1 || cfg.max_epochs < 1 {
        return Err(Error::invalid("batch_size and max_epochs must be >= 1"));
    }
    let val = if val.is_empty() { train } else { val };
    let mut opt = Adam::new(cfg.learning_rate);
    let mut plateau = ReduceLrOnPlateau::new(cfg.lr_decay_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut snapshot: Vec<(String, Arr)> = Vec::new();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack_batch(&batch);
            let mut t = Tape::new();
            let xv = t.constant(x);
            let logits = backbone.forward(&mut t, store, xv)?;
            let loss = t.bce_with_logits(logits, &y);
            let loss_val = t.scalar(loss);
            if !loss_val.is_finite() {
                if !snapshot.is_empty() {
                    for (name, value) in &snapshot {
                        store.set(name, value.clone());
                    }
                }
                return Err(Error::Diverged(format!(
                    "non-finite segmentation loss {loss_val} at epoch {epoch}; \
                     best-so-far weights restored (best val IoU {best_val:.4})"
                )));
            }
            epoch_loss += loss_val;
            batches += 1;
            t.backward(loss);
            let grads = t.param_grads();
            opt.step(store, &grads);
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let val_loss = mean_bce(backbone, store, val, cfg.batch_size)?;
        let val_iou = mean_iou(backbone, store, val)?;
        if val_iou > best_val {
            best_val = val_iou;
            best_epoch = epoch;
            snapshot = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        }
        // Plateau detection on validation loss: the thresholded IoU is flat
        // at zero early in training and would starve the learning rate.
        let lr_reduced = plateau.observe(val_loss, &mut opt.lr);
        log.push(SegEpochLog {
            epoch,
            learning_rate: opt.lr,
            train_loss,
            val_loss,
            val_iou,
            lr_reduced,
        });
    }
    for (name, value) in &snapshot {
        store.set(name, value.clone());
    }
    Ok(SegReport {
        config: cfg.clone(),
        epochs_run: cfg.max_epochs,
        best_epoch,
        best_val_iou: best_val,
        log,
    })
}
