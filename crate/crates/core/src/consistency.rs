//! Radiometric-consistency training objective: the super-resolved output is
//! pooled back to the input grid and compared against the low-resolution
//! reference frame, while a small per-pixel color-matching head maps the
//! output toward the high-resolution target's spectra.  The two terms are
//! combined as a convex sum (default 0.9 consistency / 0.1 super-resolution),
//! which keeps the input sensor's color distribution in the fused image while
//! the HR target still drives detail.

use ndarray::{ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ReconLoss;
use crate::misr::{reference_frame, HighResNet};
use crate::registration::{registered_loss, ShiftNet};
use srfuse_autograd::nn::{Conv2d, ParamStore};
use srfuse_autograd::{Tape, Var};

/// Weights of the combined objective and width of the color-matching head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub w_consistency: f64,
    pub w_sr: f64,
    pub cm_hidden: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { w_consistency: 0.9, w_sr: 0.1, cm_hidden: 64 }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_consistency < 0.0 || self.w_sr < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if (self.w_consistency + self.w_sr - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "loss weights must form a convex combination, got {} + {}",
                self.w_consistency, self.w_sr
            )));
        }
        if self.cm_hidden < 1 {
            return Err(Error::invalid("cm_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// MSE between the block-average-pooled SR output and the LR reference
/// frame.  Both are `[N, C, ·, ·]`; the SR dims must be the same integer
/// multiple of the reference dims on both axes.
pub fn consistency_loss(t: &mut Tape, sr: Var, lr_ref: Var) -> Result<Var> {
    let s_shape = t.shape(sr);
    let r_shape = t.shape(lr_ref);
    if s_shape.len() != 4 || r_shape.len() != 4 {
        return Err(Error::shape(format!(
            "consistency_loss expects NCHW inputs, got {s_shape:?} and {r_shape:?}"
        )));
    }
    if s_shape[0] != r_shape[0] || s_shape[1] != r_shape[1] {
        return Err(Error::shape(format!(
            "batch/band mismatch: {s_shape:?} vs {r_shape:?}"
        )));
    }
    let (sh, sw, rh, rw) = (s_shape[2], s_shape[3], r_shape[2], r_shape[3]);
    if rh == 0 || rw == 0 || sh % rh != 0 || sw % rw != 0 || sh / rh != sw / rw {
        return Err(Error::invalid(format!(
            "SR dims {sh}x{sw} are not a uniform integer multiple of reference dims {rh}x{rw}"
        )));
    }
    let factor = sh / rh;
    let pooled = if factor == 1 { sr } else { t.avg_pool(sr, factor) };
    Ok(t.mse(pooled, lr_ref))
}

/// Per-pixel spectral map: 1×1 conv to `cm_hidden` channels, ReLU, 1×1 conv
/// back to the input band count.  Strictly local — output pixel (i, j)
/// depends only on input pixel (i, j).
pub struct ColorMatchNet {
    pub bands: usize,
    pub hidden: usize,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ColorMatchNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        bands: usize,
        hidden: usize,
    ) -> Result<Self> {
        if bands < 1 || hidden < 1 {
            return Err(Error::invalid("color-match net needs bands >= 1 and hidden >= 1"));
        }
        Ok(Self {
            bands,
            hidden,
            conv1: Conv2d::init(store, rng, &format!("{prefix}.conv1"), bands, hidden, 1, 1, 0),
            conv2: Conv2d::init(store, rng, &format!("{prefix}.conv2"), hidden, bands, 1, 1, 0),
        })
    }

    /// Closed-form learnable parameter count.
    pub fn parameter_count(bands: usize, hidden: usize) -> usize {
        (bands * hidden + hidden) + (hidden * bands + bands)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(t, store, x);
        let y = t.relu(y);
        self.conv2.forward(t, store, y)
    }
}

/// The combined objective evaluated on one scene sample, with its two terms
/// exposed for logging.
pub struct CombinedLoss {
    pub total: Var,
    pub consistency: Var,
    pub sr_term: Var,
}

/// Build the full consistency objective for one `[T, C, h, w]` revisit stack:
/// fuse the stack, pool the fused output back against the masked-median
/// reference frame, and score the color-matched output against the HR target
/// through shift registration with an SSIM loss.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    t: &mut Tape,
    store: &ParamStore,
    misr: &HighResNet,
    cm: &ColorMatchNet,
    shiftnet: &ShiftNet,
    cfg: &ConsistencyConfig,
    lr_stack: &ArrayView4<'_, f64>,
    masks: &ArrayView3<'_, bool>,
    hr: &ArrayView3<'_, f64>,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    let reference = reference_frame(lr_stack, masks)?;
    let sr = misr.forward_batch(t, store, &[lr_stack.view()], &[reference.view()])?;

    let ref_var = t.constant(reference.insert_axis(Axis(0)).into_dyn());
    let consistency = consistency_loss(t, sr, ref_var)?;

    let matched = cm.forward(t, store, sr);
    let hr_var = t.constant(hr.to_owned().insert_axis(Axis(0)).into_dyn());
    if t.shape(matched) != t.shape(hr_var) {
        return Err(Error::shape(format!(
            "color-matched SR {:?} vs HR target {:?}",
            t.shape(matched),
            t.shape(hr_var)
        )));
    }
    let sr_term = registered_loss(t, store, shiftnet, matched, hr_var, ReconLoss::Ssim);

    let weighted_c = t.scale(consistency, cfg.w_consistency);
    let weighted_s = t.scale(sr_term, cfg.w_sr);
    let total = t.add(weighted_c, weighted_s);
    Ok(CombinedLoss { total, consistency, sr_term })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::nearest_upsample;
    use crate::misr::HighResNetConfig;
    use crate::registration::ShiftNetConfig;
    use ndarray::{Array3, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use srfuse_autograd::Arr;

    fn rand_nchw(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Arr {
        Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(0.0..1.0)).into_dyn()
    }

    #[test]
    fn consistency_loss_is_zero_for_nearest_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lr = Array3::from_shape_fn((2, 5, 7), |_| rng.random_range(0.0..1.0));
        let up = nearest_upsample(&lr, 3);
        let mut t = Tape::new();
        let sr = t.constant(up.insert_axis(Axis(0)).into_dyn());
        let r = t.constant(lr.insert_axis(Axis(0)).into_dyn());
        let loss = consistency_loss(&mut t, sr, r).unwrap();
        assert!(t.scalar(loss).abs() < 1e-10, "block means recover the reference exactly");
    }

    #[test]
    fn consistency_loss_of_constant_offset_is_its_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lr = Array3::from_shape_fn((1, 6, 6), |_| rng.random_range(0.0..1.0));
        let up = nearest_upsample(&lr, 2) + 0.1;
        let mut t = Tape::new();
        let sr = t.constant(up.insert_axis(Axis(0)).into_dyn());
        let r = t.constant(lr.insert_axis(Axis(0)).into_dyn());
        let loss = consistency_loss(&mut t, sr, r).unwrap();
        assert!(
            (t.scalar(loss) - 0.01).abs() < 1e-9,
            "constant offset c must cost c², got {}",
            t.scalar(loss)
        );
    }

    #[test]
    fn consistency_loss_of_zeros_is_zero() {
        let mut t = Tape::new();
        let sr = t.constant(Array4::<f64>::zeros((1, 3, 8, 8)).into_dyn());
        let r = t.constant(Array4::<f64>::zeros((1, 3, 4, 4)).into_dyn());
        let loss = consistency_loss(&mut t, sr, r).unwrap();
        assert_eq!(t.scalar(loss), 0.0);
    }

    #[test]
    fn consistency_loss_rejects_non_divisible_dims() {
        let mut t = Tape::new();
        let sr = t.constant(Array4::<f64>::zeros((1, 1, 15, 15)).into_dyn());
        let r = t.constant(Array4::<f64>::zeros((1, 1, 8, 8)).into_dyn());
        assert_eq!(
            consistency_loss(&mut t, sr, r).err().unwrap().kind(),
            "invalid-argument"
        );
        // Divisible on both axes but by different factors.
        let sr = t.constant(Array4::<f64>::zeros((1, 1, 16, 24)).into_dyn());
        let r = t.constant(Array4::<f64>::zeros((1, 1, 8, 8)).into_dyn());
        assert_eq!(
            consistency_loss(&mut t, sr, r).err().unwrap().kind(),
            "invalid-argument"
        );
        // Band mismatch.
        let sr = t.constant(Array4::<f64>::zeros((1, 2, 16, 16)).into_dyn());
        let r = t.constant(Array4::<f64>::zeros((1, 1, 8, 8)).into_dyn());
        assert_eq!(consistency_loss(&mut t, sr, r).err().unwrap().kind(), "shape-mismatch");
    }

    #[test]
    fn color_match_is_spatially_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cm = ColorMatchNet::init(&mut store, &mut rng, "cm", 3, 8).unwrap();
        let a = rand_nchw(&mut rng, 1, 3, 6, 6);
        let mut b = a.clone();
        b[[0, 1, 2, 4]] += 0.5;
        let mut t = Tape::new();
        let xa = t.constant(a);
        let xb = t.constant(b);
        let ya = cm.forward(&mut t, &store, xa);
        let yb = cm.forward(&mut t, &store, xb);
        let va = t.value(ya).clone();
        let vb = t.value(yb).clone();
        let mut changed = Vec::new();
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    if (va[[0, c, i, j]] - vb[[0, c, i, j]]).abs() > 0.0 {
                        changed.push((i, j));
                    }
                }
            }
        }
        assert!(!changed.is_empty(), "the perturbed pixel must respond");
        assert!(
            changed.iter().all(|&(i, j)| (i, j) == (2, 4)),
            "1x1 convolutions must not spread a change spatially: {changed:?}"
        );
    }

    #[test]
    fn color_match_with_identity_weights_is_identity_on_non_negative_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let (bands, hidden) = (3, 8);
        let cm = ColorMatchNet::init(&mut store, &mut rng, "cm", bands, hidden).unwrap();
        // First conv embeds the identity into the first `bands` channels;
        // second conv reads it back.  ReLU is transparent for x >= 0.
        let mut w1 = Array4::<f64>::zeros((hidden, bands, 1, 1));
        let mut w2 = Array4::<f64>::zeros((bands, hidden, 1, 1));
        for c in 0..bands {
            w1[[c, c, 0, 0]] = 1.0;
            w2[[c, c, 0, 0]] = 1.0;
        }
        store.set("cm.conv1.weight", w1.into_dyn());
        store.set("cm.conv1.bias", Arr::zeros(ndarray::IxDyn(&[hidden])));
        store.set("cm.conv2.weight", w2.into_dyn());
        store.set("cm.conv2.bias", Arr::zeros(ndarray::IxDyn(&[bands])));
        let x = rand_nchw(&mut rng, 2, bands, 5, 5);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = cm.forward(&mut t, &store, xv);
        for (a, b) in t.value(y).iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn color_match_parameter_count_is_451_for_rgb_and_64_hidden() {
        assert_eq!(ColorMatchNet::parameter_count(3, 64), 451);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        ColorMatchNet::init(&mut store, &mut rng, "cm", 3, 64).unwrap();
        assert_eq!(store.num_params_with_prefix("cm"), 451);
    }

    #[test]
    fn config_validation_requires_a_convex_combination() {
        ConsistencyConfig::default().validate().unwrap();
        let bad = ConsistencyConfig { w_consistency: 0.9, w_sr: 0.2, cm_hidden: 64 };
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");
        let bad = ConsistencyConfig { w_consistency: -0.1, w_sr: 1.1, cm_hidden: 64 };
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");
        let bad = ConsistencyConfig { w_consistency: 0.9, w_sr: 0.1, cm_hidden: 0 };
        assert_eq!(bad.validate().err().unwrap().kind(), "invalid-argument");
    }

    /// Shared tiny fixture: 3 revisits of 1-band 12×12, HR 24×24, reduced
    /// networks.
    struct Fixture {
        store: ParamStore,
        misr: HighResNet,
        cm: ColorMatchNet,
        shiftnet: ShiftNet,
        stack: Array4<f64>,
        masks: Array3<bool>,
        hr: Array3<f64>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let misr = HighResNet::init(
                &mut store,
                &mut rng,
                "misr",
                &HighResNetConfig::reduced(1, 2, 6).unwrap(),
            )
            .unwrap();
            let cm = ColorMatchNet::init(&mut store, &mut rng, "cm", 1, 4).unwrap();
            let shiftnet =
                ShiftNet::init(&mut store, &mut rng, "reg", &ShiftNetConfig::reduced(1, 4));
            let stack = Array4::from_shape_fn((3, 1, 12, 12), |_| rng.random_range(0.2..0.8));
            let masks = Array3::from_elem((3, 12, 12), false);
            let hr = Array3::from_shape_fn((1, 24, 24), |_| rng.random_range(0.2..0.8));
            Self { store, misr, cm, shiftnet, stack, masks, hr }
        }

        fn eval(&self, cfg: &ConsistencyConfig) -> (f64, f64, f64) {
            let mut t = Tape::new();
            let parts = combined_loss(
                &mut t,
                &self.store,
                &self.misr,
                &self.cm,
                &self.shiftnet,
                cfg,
                &self.stack.view(),
                &self.masks.view(),
                &self.hr.view(),
            )
            .unwrap();
            (t.scalar(parts.total), t.scalar(parts.consistency), t.scalar(parts.sr_term))
        }
    }

    #[test]
    fn degenerate_weights_reduce_to_single_terms() {
        let fx = Fixture::new(7);
        let (total_c, cons, _) =
            fx.eval(&ConsistencyConfig { w_consistency: 1.0, w_sr: 0.0, cm_hidden: 4 });
        assert!((total_c - cons).abs() < 1e-12, "{total_c} vs {cons}");
        let (total_s, _, sr) =
            fx.eval(&ConsistencyConfig { w_consistency: 0.0, w_sr: 1.0, cm_hidden: 4 });
        assert!((total_s - sr).abs() < 1e-12, "{total_s} vs {sr}");
    }

    #[test]
    fn default_weights_match_the_hand_computed_sum() {
        let fx = Fixture::new(8);
        let (total, cons, sr) = fx.eval(&ConsistencyConfig::default());
        assert!(cons > 0.0 && sr > 0.0, "both terms should be active on random weights");
        assert!(
            (total - (0.9 * cons + 0.1 * sr)).abs() < 1e-9,
            "weighted sum mismatch: {total} vs 0.9·{cons} + 0.1·{sr}"
        );
        assert!(total >= 0.0, "MSE and 1−SSIM are non-negative here");
    }

    #[test]
    fn raising_the_consistency_weight_never_lowers_the_total() {
        // Direct arithmetic on frozen sub-loss values from a real forward.
        let fx = Fixture::new(9);
        let (_, cons, sr) = fx.eval(&ConsistencyConfig::default());
        let mut prev = f64::NEG_INFINITY;
        for step in 0..=10 {
            let w_c = step as f64 / 10.0;
            let total = w_c * cons + 0.1 * sr;
            assert!(total >= prev, "total must be monotone in w_consistency");
            prev = total;
        }
    }

    #[test]
    fn gradients_reach_all_three_weight_sets() {
        let fx = Fixture::new(10);
        let mut t = Tape::new();
        let parts = combined_loss(
            &mut t,
            &fx.store,
            &fx.misr,
            &fx.cm,
            &fx.shiftnet,
            &ConsistencyConfig::default(),
            &fx.stack.view(),
            &fx.masks.view(),
            &fx.hr.view(),
        )
        .unwrap();
        t.backward(parts.total);
        let grads = t.param_grads();
        let touched = |prefix: &str| {
            grads
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .any(|(_, g)| g.iter().any(|&v| v != 0.0))
        };
        assert!(touched("misr."), "fusion weights must receive gradient");
        assert!(touched("cm."), "color-match weights must receive gradient");
        assert!(touched("reg."), "registration weights must receive gradient");
        for (name, g) in &grads {
            assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient in {name}");
        }
    }

    #[test]
    fn combined_loss_gradient_matches_central_differences() {
        let mut fx = Fixture::new(11);
        let cfg = ConsistencyConfig::default();

        let loss_for = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let parts = combined_loss(
                &mut t,
                store,
                &fx.misr,
                &fx.cm,
                &fx.shiftnet,
                &cfg,
                &fx.stack.view(),
                &fx.masks.view(),
                &fx.hr.view(),
            )
            .unwrap();
            t.scalar(parts.total)
        };

        let mut t = Tape::new();
        let parts = combined_loss(
            &mut t,
            &fx.store,
            &fx.misr,
            &fx.cm,
            &fx.shiftnet,
            &cfg,
            &fx.stack.view(),
            &fx.masks.view(),
            &fx.hr.view(),
        )
        .unwrap();
        t.backward(parts.total);
        let grads: std::collections::HashMap<String, Arr> =
            t.param_grads().into_iter().map(|(n, g)| (n.to_string(), g.clone())).collect();

        let eps = 1e-5;
        for name in ["cm.conv1.weight", "misr.enc.conv_in.weight"] {
            let analytic = grads.get(name).expect("gradient missing").clone();
            let base = fx.store.get(name).clone();
            let mut numeric = base.mapv(|_| 0.0);
            for idx in 0..base.len() {
                let mut plus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += eps;
                fx.store.set(name, plus);
                let lp = loss_for(&fx.store);
                let mut minus = base.clone();
                minus.as_slice_mut().unwrap()[idx] -= eps;
                fx.store.set(name, minus);
                let lm = loss_for(&fx.store);
                numeric.as_slice_mut().unwrap()[idx] = (lp - lm) / (2.0 * eps);
            }
            fx.store.set(name, base);
            let rel = srfuse_autograd::check::max_rel_diff(&analytic, &numeric);
            assert!(rel < 1e-4, "{name}: rel diff {rel}");
        }
    }
}
