//! Learned two-parameter translation registration: a convolutional shift
//! regressor, differentiable shift application, and a registration-aware
//! reconstruction loss.  A non-learned phase-correlation estimator serves
//! as an independent cross-check.

use ndarray::{Array3, ArrayView2, Axis};
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ReconLoss;
use srfuse_autograd::nn::{Conv2d, Linear, ParamStore};
use srfuse_autograd::{Tape, Var};

/// A sub-pixel translation in pixels: `dx` rightward, `dy` downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub dx: f64,
    pub dy: f64,
}

impl Shift {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    /// Euclidean distance to another shift.
    pub fn distance(&self, other: &Shift) -> f64 {
        ((self.dx - other.dx).powi(2) + (self.dy - other.dy).powi(2)).sqrt()
    }
}

/// Shift-regressor hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftNetConfig {
    /// Bands per image; the network sees the two images stacked (2·bands).
    pub bands: usize,
    /// Channel width of the first four blocks; the last four use twice this.
    pub width: usize,
    /// Width of the hidden fully connected layer.
    pub fc_dim: usize,
    /// Predictions are squashed into `[-shift_bound, shift_bound]`.
    pub shift_bound: f64,
}

impl ShiftNetConfig {
    pub fn new(bands: usize) -> Self {
        Self { bands, width: 64, fc_dim: 64, shift_bound: 8.0 }
    }

    /// A narrow variant for budgeted experiments.
    pub fn reduced(bands: usize, width: usize) -> Self {
        Self { bands, width, fc_dim: width, shift_bound: 8.0 }
    }
}

/// Eight 3×3 convolution blocks (stride 2 on every second block), global
/// average pooling and two fully connected layers regressing `(dx, dy)`.
/// The output head is zero-initialised so an untrained network predicts
/// exactly `(0, 0)`, and the result is squashed by `bound·tanh`.
pub struct ShiftNet {
    cfg: ShiftNetConfig,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl ShiftNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &ShiftNetConfig,
    ) -> Self {
        let w1 = cfg.width;
        let w2 = cfg.width * 2;
        let plan: [(usize, usize, usize); 8] = [
            (2 * cfg.bands, w1, 1),
            (w1, w1, 2),
            (w1, w1, 1),
            (w1, w1, 2),
            (w1, w2, 1),
            (w2, w2, 2),
            (w2, w2, 1),
            (w2, w2, 2),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::init(store, rng, &format!("{prefix}.conv{}", i + 1), cin, cout, 3, stride, 1)
            })
            .collect();
        let fc1 = Linear::init(store, rng, &format!("{prefix}.fc1"), w2, cfg.fc_dim);
        let fc2 = Linear::init_zeroed(store, &format!("{prefix}.fc2"), cfg.fc_dim, 2);
        Self { cfg: cfg.clone(), convs, fc1, fc2 }
    }

    pub fn config(&self) -> &ShiftNetConfig {
        &self.cfg
    }

    /// Predicted shifts `[N, 2]` (columns `dx, dy`) aligning each image in
    /// `moving` to the matching image in `reference`.  Both are `[N, C, H, W]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, reference: Var, moving: Var) -> Var {
        let mut x = t.concat_channels(&[reference, moving]);
        for conv in &self.convs {
            x = conv.forward(t, store, x);
            x = t.relu(x);
        }
        let pooled = t.spatial_mean(x);
        let h = self.fc1.forward(t, store, pooled);
        let h = t.relu(h);
        let raw = self.fc2.forward(t, store, h);
        let squashed = t.tanh(raw);
        t.scale(squashed, self.cfg.shift_bound)
    }

    /// Estimate the shift aligning `moving` to `reference` for one `[C, H, W]`
    /// pair, outside any training tape.
    pub fn estimate_shift(
        &self,
        store: &ParamStore,
        reference: &Array3<f64>,
        moving: &Array3<f64>,
    ) -> Result<Shift> {
        if reference.dim() != moving.dim() {
            return Err(Error::shape(format!(
                "estimate_shift: {:?} vs {:?}",
                reference.dim(),
                moving.dim()
            )));
        }
        let (c, h, w) = reference.dim();
        if c != self.cfg.bands {
            return Err(Error::invalid(format!(
                "estimate_shift: expected {} bands, got {c}",
                self.cfg.bands
            )));
        }
        if h < 16 || w < 16 {
            return Err(Error::invalid(format!("estimate_shift: {h}x{w} below minimum 16x16")));
        }
        let mut t = Tape::new();
        let to4 = |x: &Array3<f64>| x.clone().insert_axis(Axis(0)).into_dyn();
        let a = t.constant(to4(reference));
        let b = t.constant(to4(moving));
        let out = self.forward(&mut t, store, a, b);
        let v = t.value(out);
        Ok(Shift::new(v[[0, 0]], v[[0, 1]]))
    }
}

/// Resample a `[C, H, W]` image by `(dx, dy)` with bilinear interpolation and
/// edge replication: output pixel `(i, j)` reads input `(i + dy, j + dx)`.
/// This undoes a content motion of `(dx, dy)`, so
/// `apply_shift(moved, estimate_shift(reference, moved)) ≈ reference`.
pub fn apply_shift(image: &Array3<f64>, shift: Shift) -> Result<Array3<f64>> {
    if !(shift.dx.is_finite() && shift.dy.is_finite()) {
        return Err(Error::invalid("apply_shift: non-finite shift"));
    }
    let out = srfuse_autograd::ops::translate_arr(&image.clone().into_dyn(), shift.dx, shift.dy);
    Ok(out.into_dimensionality::<ndarray::Ix3>().unwrap())
}

/// `base_loss(apply_shift(sr, estimate_shift(hr, sr)), hr)` as a
/// differentiable scalar; gradients flow into `sr` and the shift network.
/// `sr` and `hr` are `[N, C, H, W]` tape nodes of equal shape.
pub fn registered_loss(
    t: &mut Tape,
    store: &ParamStore,
    net: &ShiftNet,
    sr: Var,
    hr: Var,
    base: ReconLoss,
) -> Var {
    assert_eq!(t.shape(sr), t.shape(hr), "registered_loss: shape mismatch");
    let shifts = net.forward(t, store, hr, sr);
    let aligned = t.translate(sr, shifts);
    base.eval(t, aligned, hr)
}

/// Integer-resolution translation estimate via phase correlation, refined to
/// sub-pixel precision by a three-point parabolic fit around the peak.
/// Returns the `(dx, dy)` such that `b`'s content is `a`'s moved by `(dx, dy)`
/// — the same quantity `ShiftNet` is trained to regress.
pub fn phase_correlate(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<Shift> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("phase_correlate: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < 4 || w < 4 {
        return Err(Error::invalid("phase_correlate: images too small"));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fa = dft2(a, &mut planner);
    let fb = dft2(b, &mut planner);
    // Normalised cross-power spectrum Fa · conj(Fb) / |Fa · conj(Fb)|.
    // Bins carrying no real energy (numerical dust) are zeroed rather than
    // whitened, otherwise their random phases drown narrow-band content.
    let raw: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let max_mag = raw.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    let floor = max_mag * 1e-9;
    let mut cross: Vec<Complex<f64>> = raw
        .into_iter()
        .map(|p| {
            let m = p.norm();
            if m > floor {
                p / m
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    idft2_inplace(&mut cross, h, w, &mut planner);
    // The correlation surface peaks at (-dy, -dx) modulo the image size.
    let (mut pi, mut pj, mut best) = (0usize, 0usize, f64::NEG_INFINITY);
    let real = |i: usize, j: usize| cross[i * w + j].re;
    for i in 0..h {
        for j in 0..w {
            if real(i, j) > best {
                best = real(i, j);
                pi = i;
                pj = j;
            }
        }
    }
    let sub = |m1: f64, p0: f64, p1: f64| {
        let den = m1 - 2.0 * p0 + p1;
        if den.abs() < 1e-12 {
            0.0
        } else {
            (0.5 * (m1 - p1) / den).clamp(-0.5, 0.5)
        }
    };
    let fy = sub(real((pi + h - 1) % h, pj), real(pi, pj), real((pi + 1) % h, pj));
    let fx = sub(real(pi, (pj + w - 1) % w), real(pi, pj), real(pi, (pj + 1) % w));
    let signed = |p: usize, n: usize| {
        if p > n / 2 {
            p as f64 - n as f64
        } else {
            p as f64
        }
    };
    Ok(Shift::new(-(signed(pj, w) + fx), -(signed(pi, h) + fy)))
}

fn dft2(x: &ArrayView2<'_, f64>, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let (h, w) = x.dim();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft_w = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        fft_w.process(row);
    }
    let fft_h = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for (i, c) in col.iter_mut().enumerate() {
            *c = buf[i * w + j];
        }
        fft_h.process(&mut col);
        for (i, c) in col.iter().enumerate() {
            buf[i * w + j] = *c;
        }
    }
    buf
}

fn idft2_inplace(buf: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>) {
    let fft_w = planner.plan_fft_inverse(w);
    for row in buf.chunks_exact_mut(w) {
        fft_w.process(row);
    }
    let fft_h = planner.plan_fft_inverse(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for (i, c) in col.iter_mut().enumerate() {
            *c = buf[i * w + j];
        }
        fft_h.process(&mut col);
        for (i, c) in col.iter().enumerate() {
            buf[i * w + j] = *c;
        }
    }
    let scale = 1.0 / (h * w) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}
