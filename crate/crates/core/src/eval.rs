//! Held-out evaluation: method-comparison tables over dataset splits,
//! spectrum and histogram artifacts, corpus fingerprinting, and the
//! downstream building-detection benchmark over the five input
//! configurations.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use srfuse_autograd::{nn::ParamStore, Tape};

use crate::building::{
    build_input, match_instances, mean_iou, polygonize, predict_mask, train_segmentation,
    CompactFcn, InputKind, Instance, SegSample, SegTrainConfig, SrModels,
};
use crate::consistency::ColorMatchNet;
use crate::data::{split_region, PatchSample, Scene, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    band_histograms, power_spectrum, psnr, ssim, BandHistograms, MetricReport, SpectrumCurve,
    SsimParams,
};
use crate::misr::HighResNet;
use crate::sisr::SrResNet;
use crate::train::{bicubic_baseline, clearest_frame_index};

/// Shared histogram binning for radiometric comparisons.
pub const HISTOGRAM_BINS: usize = 256;
/// Reflectance clip range used for all histogram artifacts.
pub const HISTOGRAM_RANGE: (f64, f64) = (0.0, 1.0);

// ---------------------------------------------------------------------------
// Method predictors
// ---------------------------------------------------------------------------

/// A super-resolution method under evaluation, mapping a patch sample to an
/// HR-grid prediction.
pub enum Method<'a> {
    /// Bicubic upsample of the clearest revisit — the model-free baseline.
    Bicubic,
    /// The HR target itself: the upper-bound row and the source of the
    /// reference spectrum/histograms.
    HrOracle,
    /// Single-image network on the clearest revisit.
    Sisr(&'a SrResNet, &'a ParamStore),
    /// Fusion network over the full revisit stack.
    Misr(&'a HighResNet, &'a ParamStore),
    /// Fusion network followed by the color-match head (HR-calibrated
    /// radiometry).
    MisrColorMatched(&'a HighResNet, &'a ColorMatchNet, &'a ParamStore),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bicubic => "bicubic",
            Method::HrOracle => "hr",
            Method::Sisr(..) => "sisr",
            Method::Misr(..) => "misr",
            Method::MisrColorMatched(..) => "misr_cm",
        }
    }

    /// Predict the HR-grid image for one sample.
    pub fn predict(&self, sample: &PatchSample) -> Result<Array3<f64>> {
        match self {
            Method::Bicubic => Ok(bicubic_baseline(sample)),
            Method::HrOracle => Ok(sample.hr_target.clone()),
            Method::Sisr(net, store) => {
                let best = clearest_frame_index(&sample.lr_masks.view());
                let frame = sample.lr_stack.index_axis(Axis(0), best).to_owned();
                net.forward_image(store, &frame.view())
            }
            Method::Misr(net, store) => {
                net.forward_scene(store, &sample.lr_stack.view(), &sample.lr_masks.view())
            }
            Method::MisrColorMatched(net, cm, store) => {
                let sr =
                    net.forward_scene(store, &sample.lr_stack.view(), &sample.lr_masks.view())?;
                let mut t = Tape::new();
                let v = t.constant(sr.insert_axis(Axis(0)).into_dyn());
                let matched = cm.forward(&mut t, store, v);
                let out = t.value(matched);
                Ok(out
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap())
            }
        }
    }
}

/// The samples of one split, erroring when the split is absent from the
/// corpus.
pub fn split_samples(samples: &[PatchSample], split: Split) -> Result<Vec<&PatchSample>> {
    let picked: Vec<&PatchSample> = samples.iter().filter(|s| s.split == split).collect();
    if picked.is_empty() {
        return Err(Error::invalid(format!(
            "dataset has no samples in split '{}'",
            split.as_str()
        )));
    }
    Ok(picked)
}

/// Evaluate every method on one split: one [`MetricReport`] row per method.
pub fn evaluate_methods(
    samples: &[PatchSample],
    split: Split,
    methods: &[Method<'_>],
) -> Result<Vec<MetricReport>> {
    let picked = split_samples(samples, split)?;
    let params = SsimParams::default();
    methods
        .iter()
        .map(|m| {
            let mut psnr_sum = 0.0;
            let mut finite = 0usize;
            let mut any_infinite = false;
            let mut ssim_sum = 0.0;
            for s in &picked {
                let pred = m.predict(s)?;
                let p = psnr(&s.hr_target.view(), &pred.view(), 1.0)?;
                if p.is_finite() {
                    psnr_sum += p;
                    finite += 1;
                } else {
                    any_infinite = true;
                }
                ssim_sum += ssim(&pred.view(), &s.hr_target.view(), &params)?;
            }
            let report = MetricReport {
                method: m.name().to_string(),
                split,
                psnr_db: if finite > 0 { psnr_sum / finite as f64 } else { 0.0 },
                psnr_infinite: any_infinite,
                ssim: ssim_sum / picked.len() as f64,
                n_samples: picked.len(),
            };
            report.validate()?;
            Ok(report)
        })
        .collect()
}

/// Render metric rows as an aligned text table: one row per split, one
/// PSNR/SSIM column pair per method (first-seen order).
pub fn metric_table(reports: &[MetricReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let splits: Vec<Split> = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .filter(|sp| reports.iter().any(|r| r.split == *sp))
        .collect();
    let cell = |sp: Split, m: &str| -> (String, String) {
        match reports.iter().find(|r| r.split == sp && r.method == m) {
            Some(r) => {
                let p = if r.psnr_infinite {
                    "inf".to_string()
                } else {
                    format!("{:.2}", r.psnr_db)
                };
                (p, format!("{:.4}", r.ssim))
            }
            None => ("-".into(), "-".into()),
        }
    };
    let mut header = vec!["split".to_string()];
    for m in &methods {
        header.push(format!("{m}_psnr_db"));
        header.push(format!("{m}_ssim"));
    }
    let mut rows = vec![header];
    for sp in &splits {
        let mut row = vec![sp.as_str().to_string()];
        for m in &methods {
            let (p, s) = cell(*sp, m);
            row.push(p);
            row.push(s);
        }
        rows.push(row);
    }
    render_columns(&rows)
}

/// Pad cells to per-column width and join with two spaces.
fn render_columns(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut width = vec![0usize; cols];
    for row in rows {
        for (i, c) in row.iter().enumerate() {
            width[i] = width[i].max(c.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = width[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Spectrum and histogram artifacts
// ---------------------------------------------------------------------------

/// Radially averaged power spectrum of each method's predictions on one
/// split, keyed by method name.  HR targets must be square with an even
/// side.
pub fn spectra_by_method(
    samples: &[PatchSample],
    split: Split,
    methods: &[Method<'_>],
) -> Result<Vec<(String, SpectrumCurve)>> {
    let picked = split_samples(samples, split)?;
    methods
        .iter()
        .map(|m| {
            let preds: Vec<Array3<f64>> =
                picked.iter().map(|s| m.predict(s)).collect::<Result<_>>()?;
            let views: Vec<ArrayView3<'_, f64>> = preds.iter().map(|p| p.view()).collect();
            Ok((m.name().to_string(), power_spectrum(&views)?))
        })
        .collect()
}

/// Per-band histograms of each method's predictions on one split, keyed by
/// method name.
pub fn histograms_by_method(
    samples: &[PatchSample],
    split: Split,
    methods: &[Method<'_>],
) -> Result<Vec<(String, BandHistograms)>> {
    let picked = split_samples(samples, split)?;
    methods
        .iter()
        .map(|m| {
            let preds: Vec<Array3<f64>> =
                picked.iter().map(|s| m.predict(s)).collect::<Result<_>>()?;
            let views: Vec<ArrayView3<'_, f64>> = preds.iter().map(|p| p.view()).collect();
            Ok((m.name().to_string(), band_histograms(&views, HISTOGRAM_BINS, HISTOGRAM_RANGE)?))
        })
        .collect()
}

/// Per-band histogram of the raw low-resolution revisits of one split
/// (every frame of every sample) — the sensor-radiometry reference that
/// super-resolved outputs are compared against.
pub fn lr_histograms(samples: &[PatchSample], split: Split) -> Result<BandHistograms> {
    let picked = split_samples(samples, split)?;
    let frames: Vec<ArrayView3<'_, f64>> = picked
        .iter()
        .flat_map(|s| {
            (0..s.lr_stack.dim().0).map(move |i| s.lr_stack.index_axis(Axis(0), i))
        })
        .collect();
    band_histograms(&frames, HISTOGRAM_BINS, HISTOGRAM_RANGE)
}

// ---------------------------------------------------------------------------
// Corpus fingerprint
// ---------------------------------------------------------------------------

/// Content hash of a patch corpus (identity, geometry and pixel values), so
/// artifacts can record exactly which data produced them.
pub fn corpus_fingerprint(samples: &[PatchSample]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        hasher.update(s.scene_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(s.split.as_str().as_bytes());
        hasher.update((s.origin.0 as u64).to_le_bytes());
        hasher.update((s.origin.1 as u64).to_le_bytes());
        for &d in s.lr_stack.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &s.lr_stack {
            hasher.update(v.to_le_bytes());
        }
        for &m in &s.lr_masks {
            hasher.update([m as u8]);
        }
        for &v in &s.hr_target {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Downstream building detection
// ---------------------------------------------------------------------------

/// Downstream benchmark configuration.  Every input configuration trains
/// its own backbone but shares the seed and hyper-parameters, so rows are
/// comparable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub kinds: Vec<InputKind>,
    pub seg: SegTrainConfig,
    /// Backbone hidden width.
    pub hidden: usize,
    /// Predicted components below this pixel area are discarded.
    pub min_area: usize,
    /// Instance-match IoU threshold for the headline precision/recall/F1.
    pub iou_threshold: f64,
    /// Additional thresholds for the F1 sweep.
    pub extra_thresholds: Vec<f64>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            kinds: InputKind::ALL.to_vec(),
            seg: SegTrainConfig::default(),
            hidden: 16,
            min_area: 4,
            iou_threshold: 0.25,
            extra_thresholds: vec![0.1, 0.25, 0.5],
        }
    }
}

/// One input configuration's scores on the test scenes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub input: InputKind,
    pub channels: usize,
    /// Mean semantic IoU over test scenes.
    pub mean_iou: f64,
    /// Instance scores at the headline threshold, micro-averaged over
    /// scenes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(threshold, f1)` sweep.
    pub f1_by_threshold: Vec<(f64, f64)>,
    pub best_val_iou: f64,
    pub epochs_run: usize,
}

/// Downstream benchmark report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub iou_threshold: f64,
    pub seed: u64,
    pub rows: Vec<DownstreamRow>,
}

/// Full-grid building-footprint masks taken from each scene's synthesis
/// record; errors on scenes without one (real scenes get their footprints
/// from polygon files instead).
pub fn truth_footprints(scenes: &[Scene]) -> Result<Vec<Array2<bool>>> {
    scenes
        .iter()
        .map(|sc| {
            sc.truth
                .as_ref()
                .and_then(|t| t.building_mask.clone())
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "scene {} carries no building-footprint ground truth",
                        sc.scene_id
                    ))
                })
        })
        .collect()
}

/// The train/val/test segmentation samples of one input configuration.
/// Every scene contributes one cropped sample per split, following the
/// same within-scene region geometry as the patch splits; inputs are built
/// once per scene on the full HR grid and then cropped.
pub struct SegDataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

fn crop3(a: &Array3<f64>, rows: (usize, usize), cols: (usize, usize)) -> Array3<f64> {
    a.slice(ndarray::s![.., rows.0..rows.1, cols.0..cols.1]).to_owned()
}

fn crop2(a: &ndarray::Array2<bool>, rows: (usize, usize), cols: (usize, usize)) -> ndarray::Array2<bool> {
    a.slice(ndarray::s![rows.0..rows.1, cols.0..cols.1]).to_owned()
}

/// Build the per-split segmentation samples for one input configuration.
/// `footprints` are full-HR-grid masks aligned with `scenes`.
pub fn seg_dataset(
    scenes: &[Scene],
    footprints: &[Array2<bool>],
    kind: InputKind,
    models: &SrModels<'_>,
) -> Result<SegDataset> {
    if scenes.len() != footprints.len() {
        return Err(Error::invalid(format!(
            "{} scenes but {} footprint masks",
            scenes.len(),
            footprints.len()
        )));
    }
    let mut out = SegDataset { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (sc, mask) in scenes.iter().zip(footprints) {
        let input = build_input(sc, kind, models)?;
        let (_, hh, hw) = input.dim();
        if mask.dim() != (hh, hw) {
            return Err(Error::shape(format!(
                "footprint mask {:?} does not match the {hh}x{hw} HR grid of scene {}",
                mask.dim(),
                sc.scene_id
            )));
        }
        let s = sc.sr_factor();
        let lr_dims = (sc.revisits[0].raster.height(), sc.revisits[0].raster.width());
        for split in [Split::Train, Split::Val, Split::Test] {
            let ((r0, r1), (c0, c1)) = split_region(split, lr_dims);
            if r0 == r1 || c0 == c1 {
                return Err(Error::invalid(format!(
                    "scene {} ({}x{} LR) is too small for a {} region",
                    sc.scene_id,
                    lr_dims.0,
                    lr_dims.1,
                    split.as_str()
                )));
            }
            let rows = (s * r0, s * r1);
            let cols = (s * c0, s * c1);
            let sample = SegSample {
                input: crop3(&input, rows, cols),
                target: crop2(mask, rows, cols),
            };
            match split {
                Split::Train => out.train.push(sample),
                Split::Val => out.val.push(sample),
                Split::Test => out.test.push(sample),
            }
        }
    }
    Ok(out)
}

/// Micro-averaged instance precision/recall/F1 over per-scene
/// (predictions, ground truth) instance lists: match counts are summed
/// across scenes before the ratios are taken.
pub fn micro_instance_scores(
    per_scene: &[(Vec<Instance>, Vec<Instance>)],
    threshold: f64,
) -> Result<(f64, f64, f64)> {
    let (mut matched, mut n_pred, mut n_gt) = (0usize, 0usize, 0usize);
    for (pred, gt) in per_scene {
        let res = match_instances(pred, gt, threshold, false)?;
        matched += res.matches.len();
        n_pred += pred.len();
        n_gt += gt.len();
    }
    let p = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 0.0 } else { matched as f64 / n_gt as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

/// Train and score one backbone per requested input configuration.  All
/// configurations share the seed and training hyper-parameters; every
/// scene contributes its train region for training and its val/test
/// regions for scoring.  Scenes must share dimensions (mini-batches stack
/// same-sized crops).
pub fn run_downstream(
    scenes: &[Scene],
    footprints: &[Array2<bool>],
    models: &SrModels<'_>,
    cfg: &DownstreamConfig,
) -> Result<DownstreamReport> {
    if cfg.kinds.is_empty() {
        return Err(Error::invalid("no input configurations requested"));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("downstream benchmark needs at least one scene"));
    }
    if !(cfg.iou_threshold > 0.0 && cfg.iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "iou_threshold {} must be in (0, 1]",
            cfg.iou_threshold
        )));
    }
    let dims = scenes[0].hr_reference.pixels.dim();
    if scenes.iter().any(|sc| sc.hr_reference.pixels.dim() != dims) {
        return Err(Error::shape(
            "downstream scenes must share dimensions so crops can be batched",
        ));
    }
    let bands = scenes[0].hr_reference.bands();
    let mut rows = Vec::with_capacity(cfg.kinds.len());
    for &kind in &cfg.kinds {
        let SegDataset { train, val, test } = seg_dataset(scenes, footprints, kind, models)?;
        let channels = kind.channels(bands);

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seg.seed);
        let backbone = CompactFcn::init(&mut store, &mut rng, "seg", channels, cfg.hidden)?;
        let report = train_segmentation(&mut store, &backbone, &train, &val, &cfg.seg)?;

        let mean_test_iou = mean_iou(&backbone, &store, &test)?;
        let per_scene: Vec<(Vec<Instance>, Vec<Instance>)> = test
            .iter()
            .map(|s| {
                let pm = predict_mask(&backbone, &store, &s.input.view())?;
                let pred = polygonize(&pm.view(), cfg.min_area);
                // Ground-truth components are never area-filtered.
                let gt = polygonize(&s.target.view(), 1);
                Ok((pred, gt))
            })
            .collect::<Result<_>>()?;
        let (precision, recall, f1) = micro_instance_scores(&per_scene, cfg.iou_threshold)?;
        let f1_by_threshold = cfg
            .extra_thresholds
            .iter()
            .map(|&t| Ok((t, micro_instance_scores(&per_scene, t)?.2)))
            .collect::<Result<Vec<_>>>()?;

        rows.push(DownstreamRow {
            input: kind,
            channels,
            mean_iou: mean_test_iou,
            precision,
            recall,
            f1,
            f1_by_threshold,
            best_val_iou: report.best_val_iou,
            epochs_run: report.epochs_run,
        });
    }
    Ok(DownstreamReport { iou_threshold: cfg.iou_threshold, seed: cfg.seg.seed, rows })
}

/// Render a downstream report as an aligned text table; the header names
/// the instance-match threshold.
pub fn downstream_table(report: &DownstreamReport) -> String {
    let mut out = format!(
        "building detection, instance matching at IoU >= {:.2}, seed {}\n",
        report.iou_threshold, report.seed
    );
    let mut rows = vec![vec![
        "input".to_string(),
        "channels".to_string(),
        "iou".to_string(),
        "precision".to_string(),
        "recall".to_string(),
        "f1".to_string(),
    ]];
    for r in &report.rows {
        rows.push(vec![
            r.input.as_str().to_string(),
            r.channels.to_string(),
            format!("{:.4}", r.mean_iou),
            format!("{:.4}", r.precision),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.f1),
        ]);
    }
    out.push_str(&render_columns(&rows));
    out
}
