//! Training loops: a shared epoch/plateau/checkpoint driver for the three
//! super-resolution objectives, plus supervised shift-regression training on
//! synthetic pairs.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{combined_loss, ColorMatchNet, ConsistencyConfig};
use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::image::bicubic_resize;
use crate::metrics::{psnr, ssim, ReconLoss, SsimParams};
use crate::misr::{reference_frame, HighResNet};
use crate::registration::{apply_shift, registered_loss, Shift, ShiftNet};
use crate::sisr::SrResNet;
use srfuse_autograd::nn::ParamStore;
use srfuse_autograd::optim::{Adam, ReduceLrOnPlateau};
use srfuse_autograd::{Arr, Tape, Var};

// ---------------------------------------------------------------------------
// Configuration and reports
// ---------------------------------------------------------------------------

/// Which super-resolution objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Misr,
    Sisr,
    MisrConsistency,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Misr => "misr",
            ModelKind::Sisr => "sisr",
            ModelKind::MisrConsistency => "misr_consistency",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "misr" => Ok(ModelKind::Misr),
            "sisr" => Ok(ModelKind::Sisr),
            "misr_consistency" => Ok(ModelKind::MisrConsistency),
            other => Err(Error::invalid(format!(
                "unknown model '{other}' (misr|sisr|misr_consistency)"
            ))),
        }
    }
}

/// Optimizer schedule shared by all training loops.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0007,
            plateau_patience: 2,
            lr_decay_factor: 0.5,
            max_epochs: 50,
            batch_size: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::invalid("lr_decay_factor must be in (0, 1)"));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::invalid("max_epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub lr_reduced: bool,
}

/// Outcome of a training run; the parameter store is left holding the
/// best-validation-loss weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// A trainable super-resolution objective over revisit patches.
pub trait SrObjective {
    /// Differentiable mean loss of one batch.
    fn batch_loss(&self, t: &mut Tape, store: &ParamStore, batch: &[&PatchSample]) -> Result<Var>;

    /// HR-comparable prediction for one sample, used for validation metrics.
    fn predict(&self, store: &ParamStore, sample: &PatchSample) -> Result<Array3<f64>>;
}

/// Index of the revisit with the lowest cloud fraction in a patch's mask
/// stack (ties go to the earliest acquisition).
pub fn clearest_frame_index(masks: &ndarray::ArrayView3<'_, bool>) -> usize {
    let t = masks.dim().0;
    (0..t)
        .min_by(|&a, &b| {
            let fa = masks.index_axis(Axis(0), a).iter().filter(|&&m| m).count();
            let fb = masks.index_axis(Axis(0), b).iter().filter(|&&m| m).count();
            fa.cmp(&fb).then(a.cmp(&b))
        })
        .expect("patch must have at least one revisit")
}

fn hr_batch(batch: &[&PatchSample]) -> Arr {
    let (c, hh, hw) = batch[0].hr_target.dim();
    let mut hr = Array4::<f64>::zeros((batch.len(), c, hh, hw));
    for (i, s) in batch.iter().enumerate() {
        hr.index_axis_mut(Axis(0), i).assign(&s.hr_target);
    }
    hr.into_dyn()
}

/// Fusion model trained with the registration-compensated loss.
pub struct MisrObjective {
    pub net: HighResNet,
    pub shiftnet: ShiftNet,
    pub recon: ReconLoss,
}

impl SrObjective for MisrObjective {
    fn batch_loss(&self, t: &mut Tape, store: &ParamStore, batch: &[&PatchSample]) -> Result<Var> {
        let refs: Vec<Array3<f64>> = batch
            .iter()
            .map(|s| reference_frame(&s.lr_stack.view(), &s.lr_masks.view()))
            .collect::<Result<_>>()?;
        let stacks: Vec<_> = batch.iter().map(|s| s.lr_stack.view()).collect();
        let ref_views: Vec<_> = refs.iter().map(|r| r.view()).collect();
        let sr = self.net.forward_batch(t, store, &stacks, &ref_views)?;
        let hr = t.constant(hr_batch(batch));
        Ok(registered_loss(t, store, &self.shiftnet, sr, hr, self.recon))
    }

    fn predict(&self, store: &ParamStore, sample: &PatchSample) -> Result<Array3<f64>> {
        self.net
            .forward_scene(store, &sample.lr_stack.view(), &sample.lr_masks.view())
    }
}

/// Single-image model trained on the clearest revisit.
pub struct SisrObjective {
    pub net: SrResNet,
    pub recon: ReconLoss,
}

impl SisrObjective {
    fn clearest_batch(&self, batch: &[&PatchSample]) -> Arr {
        let (_, c, h, w) = batch[0].lr_stack.dim();
        let mut x = Array4::<f64>::zeros((batch.len(), c, h, w));
        for (i, s) in batch.iter().enumerate() {
            let best = clearest_frame_index(&s.lr_masks.view());
            x.index_axis_mut(Axis(0), i)
                .assign(&s.lr_stack.index_axis(Axis(0), best));
        }
        x.into_dyn()
    }
}

impl SrObjective for SisrObjective {
    fn batch_loss(&self, t: &mut Tape, store: &ParamStore, batch: &[&PatchSample]) -> Result<Var> {
        let x = t.constant(self.clearest_batch(batch));
        let sr = self.net.forward(t, store, x)?;
        let hr = t.constant(hr_batch(batch));
        Ok(self.recon.eval(t, sr, hr))
    }

    fn predict(&self, store: &ParamStore, sample: &PatchSample) -> Result<Array3<f64>> {
        let best = clearest_frame_index(&sample.lr_masks.view());
        let frame = sample.lr_stack.index_axis(Axis(0), best).to_owned();
        self.net.forward_image(store, &frame.view())
    }
}

/// Fusion model trained under the radiometric-consistency objective; the
/// validation prediction is the color-matched (HR-calibrated) output.
pub struct ConsistencyObjective {
    pub net: HighResNet,
    pub color_match: ColorMatchNet,
    pub shiftnet: ShiftNet,
    pub weights: ConsistencyConfig,
}

impl SrObjective for ConsistencyObjective {
    fn batch_loss(&self, t: &mut Tape, store: &ParamStore, batch: &[&PatchSample]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for s in batch {
            let combined = combined_loss(
                t,
                store,
                &self.net,
                &self.color_match,
                &self.shiftnet,
                &self.weights,
                &s.lr_stack.view(),
                &s.lr_masks.view(),
                &s.hr_target.view(),
            )?;
            total = Some(match total {
                None => combined.total,
                Some(acc) => t.add(acc, combined.total),
            });
        }
        let sum = total.ok_or_else(|| Error::invalid("empty batch"))?;
        Ok(t.scale(sum, 1.0 / batch.len() as f64))
    }

    fn predict(&self, store: &ParamStore, sample: &PatchSample) -> Result<Array3<f64>> {
        let sr = self
            .net
            .forward_scene(store, &sample.lr_stack.view(), &sample.lr_masks.view())?;
        let mut t = Tape::new();
        let v = t.constant(sr.insert_axis(Axis(0)).into_dyn());
        let matched = self.color_match.forward(&mut t, store, v);
        let out = t.value(matched);
        Ok(out
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }
}

// ---------------------------------------------------------------------------
// Shared training driver
// ---------------------------------------------------------------------------

fn mean_val_loss(
    objective: &dyn SrObjective,
    store: &ParamStore,
    val: &[PatchSample],
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&PatchSample> = val.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size) {
        let mut t = Tape::new();
        let loss = objective.batch_loss(&mut t, store, chunk)?;
        total += t.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn mean_val_metrics(
    objective: &dyn SrObjective,
    store: &ParamStore,
    val: &[PatchSample],
) -> Result<(f64, f64)> {
    let params = SsimParams::default();
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for sample in val {
        let pred = objective.predict(store, sample)?;
        p_sum += psnr(&sample.hr_target.view(), &pred.view(), 1.0)?;
        s_sum += ssim(&pred.view(), &sample.hr_target.view(), &params)?;
    }
    Ok((p_sum / val.len() as f64, s_sum / val.len() as f64))
}

/// Epoch-driven training with shuffled mini-batches, plateau learning-rate
/// decay on the validation loss, and best-validation checkpointing.  The
/// store is restored to the best-epoch weights before returning — also on
/// divergence, so the last good state survives a non-finite loss.  When
/// `val` is empty the training set doubles as the validation set.
pub fn run_training(
    store: &mut ParamStore,
    objective: &dyn SrObjective,
    train: &[PatchSample],
    val: &[PatchSample],
    optim: &OptimizerConfig,
    seed: u64,
) -> Result<TrainReport> {
    optim.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let val = if val.is_empty() { train } else { val };
    let mut opt = Adam::new(optim.learning_rate);
    let mut plateau = ReduceLrOnPlateau::new(optim.lr_decay_factor, optim.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut snapshot: Vec<(String, Arr)> = Vec::new();
    let mut log = Vec::new();

    let restore = |store: &mut ParamStore, snapshot: &[(String, Arr)]| {
        for (name, value) in snapshot {
            store.set(name, value.clone());
        }
    };

    for epoch in 0..optim.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut t = Tape::new();
            let loss = objective.batch_loss(&mut t, store, &batch)?;
            let loss_val = t.scalar(loss);
            if !loss_val.is_finite() {
                restore(store, &snapshot);
                return Err(Error::Diverged(format!(
                    "non-finite training loss {loss_val} at epoch {epoch}; \
                     best weights (epoch {best_epoch}, val loss {best_val:.6}) restored"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            t.backward(loss);
            let grads = t.param_grads();
            opt.step(store, &grads);
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = mean_val_loss(objective, store, val, optim.batch_size)?;
        if !val_loss.is_finite() {
            restore(store, &snapshot);
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}; \
                 best weights (epoch {best_epoch}) restored"
            )));
        }
        let (val_psnr, val_ssim) = mean_val_metrics(objective, store, val)?;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            snapshot = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        }
        let lr_reduced = plateau.observe(val_loss, &mut opt.lr);
        log.push(EpochLog {
            epoch,
            learning_rate: opt.lr,
            train_loss,
            val_loss,
            val_psnr,
            val_ssim,
            lr_reduced,
        });
    }
    restore(store, &snapshot);
    Ok(TrainReport {
        epochs_run: optim.max_epochs,
        best_epoch,
        best_val_loss: best_val,
        log,
    })
}

// ---------------------------------------------------------------------------
// Shift-regression training
// ---------------------------------------------------------------------------

/// One supervised registration example: `apply_shift(moved, shift)`
/// reproduces `reference` away from the border.
#[derive(Clone, Debug)]
pub struct ShiftPair {
    pub reference: Array3<f64>,
    pub moved: Array3<f64>,
    pub shift: Shift,
}

/// Generate smooth random image pairs with known sub-pixel translations,
/// each pair sharing one random global affine intensity change (so the
/// regressor trains invariant to calibration offsets).
pub fn synthetic_shift_pairs(
    n: usize,
    bands: usize,
    dims: (usize, usize),
    max_shift: f64,
    seed: u64,
) -> Result<Vec<ShiftPair>> {
    let (h, w) = dims;
    if h < 16 || w < 16 {
        return Err(Error::invalid("shift pairs need at least 16x16 images"));
    }
    if !(max_shift > 0.0 && max_shift.is_finite()) {
        return Err(Error::invalid("max_shift must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        // Smooth content: bicubic blow-up of a coarse random grid.
        let coarse = Array3::from_shape_fn((bands, 6, 6), |_| rng.random_range(0.0..1.0));
        let base = bicubic_resize(&coarse, h, w);
        let dx = rng.random_range(-max_shift..=max_shift);
        let dy = rng.random_range(-max_shift..=max_shift);
        // Content moves by (dx, dy); the aligning shift is its inverse image
        // of the resampler, i.e. exactly (dx, dy) under this convention.
        let moved = apply_shift(&base, Shift::new(-dx, -dy))?;
        let gain = rng.random_range(0.5..1.5);
        let bias = rng.random_range(-0.2..0.2);
        let affine = |x: &Array3<f64>| x.mapv(|v| gain * v + bias);
        out.push(ShiftPair {
            reference: affine(&base),
            moved: affine(&moved),
            shift: Shift::new(dx, dy),
        });
    }
    Ok(out)
}

/// Per-epoch log of the shift-regression trainer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftTrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub log: Vec<ShiftEpochLog>,
}

/// Supervised mean-squared-error regression of the aligning shift on known
/// pairs.  Aborts on non-finite loss.
pub fn train_shiftnet(
    store: &mut ParamStore,
    net: &ShiftNet,
    pairs: &[ShiftPair],
    optim: &OptimizerConfig,
    seed: u64,
) -> Result<ShiftTrainReport> {
    optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let (c, h, w) = pairs[0].reference.dim();
    let mut opt = Adam::new(optim.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for epoch in 0..optim.max_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(optim.batch_size) {
            let n = chunk.len();
            let mut refs = Array4::<f64>::zeros((n, c, h, w));
            let mut movs = Array4::<f64>::zeros((n, c, h, w));
            let mut labels = Array2::<f64>::zeros((n, 2));
            for (i, &k) in chunk.iter().enumerate() {
                refs.index_axis_mut(Axis(0), i).assign(&pairs[k].reference);
                movs.index_axis_mut(Axis(0), i).assign(&pairs[k].moved);
                labels[[i, 0]] = pairs[k].shift.dx;
                labels[[i, 1]] = pairs[k].shift.dy;
            }
            let mut t = Tape::new();
            let rv = t.constant(refs.into_dyn());
            let mv = t.constant(movs.into_dyn());
            let pred = net.forward(&mut t, store, rv, mv);
            let target = t.constant(labels.into_dyn());
            let loss = t.mse(pred, target);
            let loss_val = t.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite shift-regression loss at epoch {epoch}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            t.backward(loss);
            let grads = t.param_grads();
            opt.step(store, &grads);
        }
        log.push(ShiftEpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
        });
    }
    let final_loss = log.last().map(|l| l.train_loss).unwrap_or(f64::NAN);
    Ok(ShiftTrainReport {
        epochs_run: optim.max_epochs,
        final_loss,
        log,
    })
}

/// Fraction of pairs whose predicted shift lies within `tolerance_px`
/// (Euclidean) of the true aligning shift.
pub fn shift_recovery_rate(
    store: &ParamStore,
    net: &ShiftNet,
    pairs: &[ShiftPair],
    tolerance_px: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let mut hits = 0usize;
    for p in pairs {
        let est = net.estimate_shift(store, &p.reference, &p.moved)?;
        let err = ((est.dx - p.shift.dx).powi(2) + (est.dy - p.shift.dy).powi(2)).sqrt();
        if err <= tolerance_px {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean bicubic-upsampling baseline prediction for one patch (no learned
/// model): upsample the clearest revisit to the HR grid.
pub fn bicubic_baseline(sample: &PatchSample) -> Array3<f64> {
    let best = clearest_frame_index(&sample.lr_masks.view());
    let frame = sample.lr_stack.index_axis(Axis(0), best);
    let (_, hh, hw) = sample.hr_target.dim();
    bicubic_resize(&frame.to_owned(), hh, hw)
}

/// Score a prediction function over samples: mean PSNR and SSIM against the
/// HR targets.
pub fn score_predictions<F>(samples: &[PatchSample], mut predict: F) -> Result<(f64, f64)>
where
    F: FnMut(&PatchSample) -> Result<Array3<f64>>,
{
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let params = SsimParams::default();
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for s in samples {
        let pred = predict(s)?;
        p_sum += psnr(&s.hr_target.view(), &pred.view(), 1.0)?;
        s_sum += ssim(&pred.view(), &s.hr_target.view(), &params)?;
    }
    Ok((p_sum / samples.len() as f64, s_sum / samples.len() as f64))
}
