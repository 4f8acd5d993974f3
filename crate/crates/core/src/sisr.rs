//! Single-image super-resolution baseline: a residual convolutional network
//! with pixel-shuffle upsampling, fed the clearest available revisit.

use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Revisit, Scene};
use crate::error::{Error, Result};
use crate::ingest::rank_revisits;
use srfuse_autograd::nn::{Conv2d, PRelu, ParamStore};
use srfuse_autograd::{Tape, Var};

/// Baseline-network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrResNetConfig {
    pub in_bands: usize,
    /// Trunk channel width.
    pub hidden: usize,
    pub residual_blocks: usize,
    /// Power of two (stacked ×2 pixel-shuffle stages) or exactly 3.
    pub sr_factor: usize,
}

impl SrResNetConfig {
    pub fn new(in_bands: usize, sr_factor: usize) -> Self {
        Self { in_bands, hidden: 64, residual_blocks: 16, sr_factor }
    }

    /// Narrow variant for fast experiments and tests.
    pub fn reduced(
        in_bands: usize,
        sr_factor: usize,
        hidden: usize,
        residual_blocks: usize,
    ) -> Self {
        Self { in_bands, hidden, residual_blocks, sr_factor }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands < 1 {
            return Err(Error::invalid("in_bands must be >= 1"));
        }
        if self.hidden < 1 {
            return Err(Error::invalid("hidden width must be >= 1"));
        }
        if self.residual_blocks < 1 {
            return Err(Error::invalid("residual_blocks must be >= 1"));
        }
        if !(self.sr_factor.is_power_of_two() || self.sr_factor == 3) {
            return Err(Error::invalid(format!(
                "sr_factor {} must be a power of two or 3",
                self.sr_factor
            )));
        }
        Ok(())
    }

    /// Pixel-shuffle factors of the upsampling stages, in order.
    fn upsample_stages(&self) -> Vec<usize> {
        if self.sr_factor == 3 {
            vec![3]
        } else {
            let stages = self.sr_factor.trailing_zeros() as usize;
            vec![2; stages]
        }
    }

    /// Closed-form learnable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (c, h) = (self.in_bands, self.hidden);
        let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
        let mut total = conv(c, h, 9) + 1; // stem + activation slope
        total += self.residual_blocks * (2 * conv(h, h, 3) + 1);
        total += conv(h, h, 3); // trunk
        for r in self.upsample_stages() {
            total += conv(h, h * r * r, 3) + 1;
        }
        total + conv(h, c, 9)
    }
}

/// One residual block: two 3×3 convolutions with a mid-block activation and
/// an additive skip.  No normalization layers.
struct Block {
    conv1: Conv2d,
    act: PRelu,
    conv2: Conv2d,
}

impl Block {
    fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, ch: usize) -> Self {
        Self {
            conv1: Conv2d::init(store, rng, &format!("{prefix}.conv1"), ch, ch, 3, 1, 1),
            act: PRelu::init(store, &format!("{prefix}.act")),
            conv2: Conv2d::init(store, rng, &format!("{prefix}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(t, store, x);
        let y = self.act.forward(t, store, y);
        let y = self.conv2.forward(t, store, y);
        t.add(x, y)
    }
}

/// The single-image network: 9×9 stem, residual trunk with a global skip,
/// pixel-shuffle upsampling, 9×9 output head.
pub struct SrResNet {
    pub cfg: SrResNetConfig,
    stem: Conv2d,
    stem_act: PRelu,
    blocks: Vec<Block>,
    trunk: Conv2d,
    upsample: Vec<(Conv2d, PRelu, usize)>,
    out: Conv2d,
}

impl SrResNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: SrResNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.in_bands, cfg.hidden);
        let stem = Conv2d::init(store, rng, &format!("{prefix}.stem.conv"), c, h, 9, 1, 4);
        let stem_act = PRelu::init(store, &format!("{prefix}.stem.act"));
        let blocks = (0..cfg.residual_blocks)
            .map(|i| Block::init(store, rng, &format!("{prefix}.block{i}"), h))
            .collect();
        let trunk = Conv2d::init(store, rng, &format!("{prefix}.trunk.conv"), h, h, 3, 1, 1);
        let upsample = cfg
            .upsample_stages()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    Conv2d::init(store, rng, &format!("{prefix}.up{i}.conv"), h, h * r * r, 3, 1, 1),
                    PRelu::init(store, &format!("{prefix}.up{i}.act")),
                    r,
                )
            })
            .collect();
        let out = Conv2d::init(store, rng, &format!("{prefix}.out.conv"), h, c, 9, 1, 4);
        Ok(Self { cfg, stem, stem_act, blocks, trunk, upsample, out })
    }

    /// `x` is `[N, C, h, w]`; returns `[N, C, s·h, s·w]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = t.shape(x);
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected NCHW input, got {shape:?}")));
        }
        if shape[1] != self.cfg.in_bands {
            return Err(Error::shape(format!(
                "input has {} bands, network expects {}",
                shape[1], self.cfg.in_bands
            )));
        }
        let stem = self.stem.forward(t, store, x);
        let stem = self.stem_act.forward(t, store, stem);
        let mut y = stem;
        for block in &self.blocks {
            y = block.forward(t, store, y);
        }
        y = self.trunk.forward(t, store, y);
        y = t.add(y, stem);
        for (conv, act, r) in &self.upsample {
            y = conv.forward(t, store, y);
            y = t.pixel_shuffle(y, *r);
            y = act.forward(t, store, y);
        }
        Ok(self.out.forward(t, store, y))
    }

    /// Inference on one `[C, h, w]` image.
    pub fn forward_image(&self, store: &ParamStore, lr: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut t = Tape::new();
        let x = t.constant(lr.to_owned().insert_axis(Axis(0)).into_dyn());
        let y = self.forward(&mut t, store, x)?;
        let v = t.value(y).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        Ok(v.index_axis(Axis(0), 0).to_owned())
    }
}

/// The revisit the baseline trains and predicts on: the top-ranked one
/// (fewest clouds, earliest date on ties).
pub fn select_input(scene: &Scene) -> &Revisit {
    &scene.revisits[rank_revisits(scene)[0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Raster;
    use crate::metrics::ReconLoss;
    use ndarray::{Array2, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use srfuse_autograd::optim::Adam;
    use srfuse_autograd::Arr;
    use std::collections::BTreeSet;

    fn rand_nchw(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Arr {
        Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(0.0..1.0)).into_dyn()
    }

    #[test]
    fn pixel_shuffle_matches_index_arithmetic_oracle() {
        // 1×4×2×2, r=2: output (0, 0, 2i+di, 2j+dj) must equal input
        // (0, 2·di+dj, i, j).
        let mut t = Tape::new();
        let input = Array4::from_shape_fn((1, 4, 2, 2), |(_, c, i, j)| {
            (c * 100 + i * 10 + j) as f64
        });
        let x = t.constant(input.clone().into_dyn());
        let y = t.pixel_shuffle(x, 2);
        let out = t.value(y).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        assert_eq!(out.dim(), (1, 1, 4, 4));
        for i in 0..2 {
            for j in 0..2 {
                for di in 0..2 {
                    for dj in 0..2 {
                        let got = out[[0, 0, 2 * i + di, 2 * j + dj]];
                        let want = input[[0, 2 * di + dj, i, j]];
                        assert_eq!(got, want, "at i={i} j={j} di={di} dj={dj}");
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_is_a_bijection_on_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_nchw(&mut rng, 2, 12, 3, 5);
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let y = t.pixel_shuffle(x, 2);
        let mut before: Vec<f64> = input.iter().copied().collect();
        let mut after: Vec<f64> = t.value(y).iter().copied().collect();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        assert_eq!(before, after, "multiset of values must be preserved exactly");
    }

    #[test]
    fn forward_shapes_for_all_supported_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (c, hw, s, expect) in
            [(3, 32, 2, 64), (1, 8, 4, 32), (2, 16, 3, 48), (1, 9, 1, 9)]
        {
            let mut store = ParamStore::new();
            let cfg = SrResNetConfig::reduced(c, s, 6, 2);
            let net = SrResNet::init(&mut store, &mut rng, "sisr", cfg).unwrap();
            let mut t = Tape::new();
            let x = t.constant(rand_nchw(&mut rng, 2, c, hw, hw));
            let y = net.forward(&mut t, &store, x).unwrap();
            assert_eq!(t.shape(y), vec![2, c, expect, expect]);
            assert!(t.value(y).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_rejects_wrong_band_count_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let net =
            SrResNet::init(&mut store, &mut rng, "sisr", SrResNetConfig::reduced(3, 2, 4, 1))
                .unwrap();
        let mut t = Tape::new();
        let x = t.constant(rand_nchw(&mut rng, 1, 2, 8, 8));
        assert_eq!(net.forward(&mut t, &store, x).err().unwrap().kind(), "shape-mismatch");
        let x3 = t.constant(Array3::<f64>::zeros((2, 8, 8)).into_dyn());
        assert_eq!(net.forward(&mut t, &store, x3).err().unwrap().kind(), "shape-mismatch");
    }

    #[test]
    fn config_validation_rejects_unsupported_factors() {
        assert!(SrResNetConfig::new(3, 2).validate().is_ok());
        assert!(SrResNetConfig::new(3, 8).validate().is_ok());
        assert!(SrResNetConfig::new(3, 3).validate().is_ok());
        for bad in [0, 5, 6, 7, 9] {
            assert_eq!(
                SrResNetConfig::new(3, bad).validate().err().unwrap().kind(),
                "invalid-argument",
                "sr_factor {bad}"
            );
        }
        assert!(SrResNetConfig::reduced(3, 2, 0, 1).validate().is_err());
        assert!(SrResNetConfig::reduced(3, 2, 4, 0).validate().is_err());
        assert!(SrResNetConfig::reduced(0, 2, 4, 1).validate().is_err());
    }

    #[test]
    fn store_parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for cfg in [
            SrResNetConfig::new(3, 2),
            SrResNetConfig::new(1, 3),
            SrResNetConfig::reduced(2, 4, 10, 5),
        ] {
            let mut store = ParamStore::new();
            SrResNet::init(&mut store, &mut rng, "sisr", cfg.clone()).unwrap();
            assert_eq!(store.num_params_with_prefix("sisr"), cfg.parameter_count(), "{cfg:?}");
        }
    }

    /// With every residual-block parameter zeroed, blocks are exact
    /// identities, so networks that differ only in block count compute the
    /// same function once their shared layers hold identical weights.
    #[test]
    fn zeroed_residual_blocks_are_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store_a = ParamStore::new();
        let net_a =
            SrResNet::init(&mut store_a, &mut rng, "n", SrResNetConfig::reduced(1, 2, 5, 4))
                .unwrap();
        let mut store_b = ParamStore::new();
        let net_b =
            SrResNet::init(&mut store_b, &mut rng, "n", SrResNetConfig::reduced(1, 2, 5, 1))
                .unwrap();
        for store in [&mut store_a, &mut store_b] {
            let block_params: Vec<String> =
                store.names().filter(|n| n.contains(".block")).map(str::to_string).collect();
            for name in block_params {
                let zero = Arr::zeros(store.get(&name).raw_dim());
                store.set(&name, zero);
            }
        }
        // Copy the shared (non-block) layers from A into B.
        let shared: Vec<String> =
            store_b.names().filter(|n| !n.contains(".block")).map(str::to_string).collect();
        for name in &shared {
            store_b.set(name, store_a.get(name).clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let input = rand_nchw(&mut rng, 1, 1, 10, 10);
        let mut ta = Tape::new();
        let xa = ta.constant(input.clone());
        let ya = net_a.forward(&mut ta, &store_a, xa).unwrap();
        let mut tb = Tape::new();
        let xb = tb.constant(input);
        let yb = net_b.forward(&mut tb, &store_b, xb).unwrap();
        assert_eq!(t_vals(&ta, ya), t_vals(&tb, yb), "block count must not matter");
    }

    fn t_vals(t: &Tape, v: Var) -> Vec<f64> {
        t.value(v).iter().copied().collect()
    }

    #[test]
    fn finite_difference_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let net =
            SrResNet::init(&mut store, &mut rng, "sisr", SrResNetConfig::reduced(1, 2, 3, 1))
                .unwrap();
        let input = rand_nchw(&mut rng, 1, 1, 6, 6);
        let target = rand_nchw(&mut rng, 1, 1, 12, 12);

        let loss_for = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let y = net.forward(&mut t, store, x).unwrap();
            let tgt = t.constant(target.clone());
            let l = t.mse(y, tgt);
            t.scalar(l)
        };

        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let y = net.forward(&mut t, &store, x).unwrap();
        let tgt = t.constant(target.clone());
        let l = t.mse(y, tgt);
        t.backward(l);
        let grads: std::collections::HashMap<String, Arr> =
            t.param_grads().into_iter().map(|(n, g)| (n.to_string(), g.clone())).collect();

        let eps = 1e-5;
        for name in ["sisr.stem.conv.weight", "sisr.block0.conv1.weight", "sisr.out.conv.bias"] {
            let analytic = grads.get(name).expect("gradient must reach every layer");
            let base = store.get(name).clone();
            let mut numeric = base.mapv(|_| 0.0);
            for idx in 0..base.len() {
                let mut plus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += eps;
                store.set(name, plus);
                let lp = loss_for(&store);
                let mut minus = base.clone();
                minus.as_slice_mut().unwrap()[idx] -= eps;
                store.set(name, minus);
                let lm = loss_for(&store);
                numeric.as_slice_mut().unwrap()[idx] = (lp - lm) / (2.0 * eps);
            }
            store.set(name, base);
            let rel = srfuse_autograd::check::max_rel_diff(analytic, &numeric);
            assert!(rel < 1e-4, "{name}: rel diff {rel}");
        }
    }

    #[test]
    fn overfitting_one_batch_halves_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut store = ParamStore::new();
        let net =
            SrResNet::init(&mut store, &mut rng, "sisr", SrResNetConfig::reduced(1, 2, 8, 2))
                .unwrap();
        let input = rand_nchw(&mut rng, 1, 1, 8, 8);
        // A smooth target correlated with the input's bicubic upsample.
        let up = {
            let x3 = input.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let img = x3.index_axis(Axis(0), 0).to_owned();
            crate::image::bicubic_resize(&img, 16, 16).insert_axis(Axis(0)).into_dyn()
        };
        let mut opt = Adam::new(1e-3);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let y = net.forward(&mut t, &store, x).unwrap();
            let tgt = t.constant(up.clone());
            let loss = ReconLoss::Ssim.eval(&mut t, y, tgt);
            last = t.scalar(loss);
            first.get_or_insert(last);
            t.backward(loss);
            let grads = t.param_grads();
            opt.step(&mut store, &grads);
        }
        let first = first.unwrap();
        assert!(
            last <= 0.5 * first,
            "SSIM loss must at least halve when overfitting one batch: {first} -> {last}"
        );
    }

    #[test]
    fn select_input_takes_the_top_ranked_revisit() {
        let make = |entries: &[(f64, &str)]| {
            let w = 10usize;
            let revisits: Vec<Revisit> = entries
                .iter()
                .map(|&(frac, date)| {
                    let raster = Raster::new(
                        Array3::from_elem((1, 1, w), 0.5),
                        10.0,
                        [0.0, 10.0, 0.0, 10.0, 0.0, -10.0],
                    )
                    .unwrap();
                    let cloudy = (frac * w as f64).round() as usize;
                    let mask = Array2::from_shape_fn((1, w), |(_, j)| j < cloudy);
                    Revisit::new(raster, date.to_string(), mask).unwrap()
                })
                .collect();
            Scene {
                scene_id: "s".into(),
                revisits,
                hr_reference: Raster::new(
                    Array3::from_elem((1, 2, 2 * w), 0.5),
                    5.0,
                    [0.0, 5.0, 0.0, 10.0, 0.0, -5.0],
                )
                .unwrap(),
                terrain_tags: BTreeSet::new(),
                truth: None,
            }
        };
        let scene = make(&[(0.2, "2020-01-01"), (0.0, "2020-01-02")]);
        assert_eq!(select_input(&scene).acquired_at, "2020-01-02");
        let tie = make(&[(0.1, "2020-05-01"), (0.1, "2020-02-01")]);
        assert_eq!(select_input(&tie).acquired_at, "2020-02-01");
        let single = make(&[(0.9, "2020-03-01")]);
        assert_eq!(select_input(&single).acquired_at, "2020-03-01");
    }

    #[test]
    fn forward_image_matches_batched_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let net =
            SrResNet::init(&mut store, &mut rng, "sisr", SrResNetConfig::reduced(2, 2, 4, 1))
                .unwrap();
        let img = Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(0.0..1.0));
        let single = net.forward_image(&store, &img.view()).unwrap();
        assert_eq!(single.dim(), (2, 16, 16));
        let mut t = Tape::new();
        let x = t.constant(img.insert_axis(Axis(0)).into_dyn());
        let y = net.forward(&mut t, &store, x).unwrap();
        let batched = t.value(y).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        for (a, b) in single.iter().zip(batched.index_axis(Axis(0), 0).iter()) {
            assert_eq!(a, b, "inference wrapper must agree with the batched path");
        }
    }
}
