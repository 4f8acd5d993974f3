//! Image-fidelity and spectral-diagnostic metrics: PSNR, SSIM (one
//! implementation serving both metric evaluation and differentiable loss),
//! radially averaged Fourier power spectra and per-band histograms.

use ndarray::{Array2, ArrayView3, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use srfuse_autograd::{Arr, Tape, Var};

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB: `10·log10(i_max² / MSE)`.
/// Returns `f64::INFINITY` when the images are identical (MSE = 0).
pub fn psnr(hr: &ArrayView3<'_, f64>, sr: &ArrayView3<'_, f64>, i_max: f64) -> Result<f64> {
    if hr.dim() != sr.dim() {
        return Err(Error::shape(format!("psnr: {:?} vs {:?}", hr.dim(), sr.dim())));
    }
    if !(i_max > 0.0) {
        return Err(Error::invalid("psnr: i_max must be positive"));
    }
    let n = hr.len() as f64;
    let mse = hr
        .iter()
        .zip(sr.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (i_max * i_max / mse).log10())
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// SSIM hyper-parameters (the conventional constants).
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

/// Sum-normalised 2-D Gaussian window.
fn gaussian_window(window: usize, sigma: f64) -> Array2<f64> {
    let r = (window as f64 - 1.0) / 2.0;
    let mut k = Array2::<f64>::zeros((window, window));
    for i in 0..window {
        for j in 0..window {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            k[[i, j]] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s = k.sum();
    k / s
}

/// Mean SSIM between two `[N, C, H, W]` tensors already on a tape, as a
/// differentiable scalar node.  This is the single SSIM implementation;
/// the plain-array entry point wraps it.
pub fn ssim_on_tape(t: &mut Tape, a: Var, b: Var, p: &SsimParams) -> Var {
    let shape = t.shape(a).to_vec();
    assert_eq!(shape, t.shape(b), "ssim: shape mismatch");
    assert!(shape.len() == 4, "ssim expects NCHW");
    assert!(
        shape[2] >= p.window && shape[3] >= p.window,
        "ssim: image {}x{} smaller than window {}",
        shape[2],
        shape[3],
        p.window
    );
    let win = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);

    let mu_a = t.filter2d_valid(a, &win);
    let mu_b = t.filter2d_valid(b, &win);
    let aa = t.mul(a, a);
    let bb = t.mul(b, b);
    let ab = t.mul(a, b);
    let e_aa = t.filter2d_valid(aa, &win);
    let e_bb = t.filter2d_valid(bb, &win);
    let e_ab = t.filter2d_valid(ab, &win);

    let mu_aa = t.mul(mu_a, mu_a);
    let mu_bb = t.mul(mu_b, mu_b);
    let mu_ab = t.mul(mu_a, mu_b);
    let var_a = t.sub(e_aa, mu_aa);
    let var_b = t.sub(e_bb, mu_bb);
    let cov = t.sub(e_ab, mu_ab);

    // ((2 μaμb + C1)(2 σab + C2)) / ((μa² + μb² + C1)(σa² + σb² + C2))
    let two_mu = t.scale(mu_ab, 2.0);
    let num1 = t.add_scalar(two_mu, c1);
    let two_cov = t.scale(cov, 2.0);
    let num2 = t.add_scalar(two_cov, c2);
    let num = t.mul(num1, num2);

    let mu_sum = t.add(mu_aa, mu_bb);
    let den1 = t.add_scalar(mu_sum, c1);
    let var_sum = t.add(var_a, var_b);
    let den2 = t.add_scalar(var_sum, c2);
    let den = t.mul(den1, den2);

    let map = t.div(num, den);
    t.mean_all(map)
}

/// SSIM loss `1 − mean SSIM` as a differentiable scalar node.
pub fn ssim_loss_on_tape(t: &mut Tape, a: Var, b: Var, p: &SsimParams) -> Var {
    let s = ssim_on_tape(t, a, b, p);
    let neg = t.scale(s, -1.0);
    t.add_scalar(neg, 1.0)
}

/// Selectable reconstruction objective shared by all training paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReconLoss {
    Mse,
    Mae,
    Ssim,
}

impl ReconLoss {
    /// Evaluate the loss between prediction `a` and target `b` (both NCHW)
    /// as a differentiable scalar.
    pub fn eval(self, t: &mut Tape, a: Var, b: Var) -> Var {
        match self {
            ReconLoss::Mse => t.mse(a, b),
            ReconLoss::Mae => t.mae(a, b),
            ReconLoss::Ssim => ssim_loss_on_tape(t, a, b, &SsimParams::default()),
        }
    }
}

impl std::str::FromStr for ReconLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ReconLoss::Mse),
            "mae" => Ok(ReconLoss::Mae),
            "ssim" => Ok(ReconLoss::Ssim),
            other => Err(Error::invalid(format!("unknown loss '{other}' (mse|mae|ssim)"))),
        }
    }
}

/// Mean SSIM of two `[C, H, W]` images (plain arrays).
pub fn ssim(a: &ArrayView3<'_, f64>, b: &ArrayView3<'_, f64>, p: &SsimParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("ssim: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (_, h, w) = a.dim();
    if h < p.window || w < p.window {
        return Err(Error::invalid(format!(
            "ssim: image {h}x{w} smaller than window {}",
            p.window
        )));
    }
    let mut t = Tape::new();
    let to4 = |x: &ArrayView3<'_, f64>| -> Arr { x.to_owned().insert_axis(Axis(0)).into_dyn() };
    let av = t.constant(to4(a));
    let bv = t.constant(to4(b));
    let s = ssim_on_tape(&mut t, av, bv, p);
    Ok(t.scalar(s))
}

// ---------------------------------------------------------------------------
// Radially averaged power spectrum
// ---------------------------------------------------------------------------

/// Radially averaged log power spectrum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumCurve {
    /// Ring centers in cycles/pixel, strictly increasing, within (0, √2/2].
    pub radial_freq: Vec<f64>,
    /// Mean of `10·log10(ring-mean power)` over bands and images.
    pub power_db: Vec<f64>,
}

const POWER_FLOOR: f64 = 1e-12; // −120 dB

/// Unnormalised 2-D DFT power `|X(u,v)|²` of one band.
fn dft_power(plane: &ndarray::ArrayView2<'_, f64>, planner: &mut FftPlanner<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut buf: Vec<Complex<f64>> =
        plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    // Rows.
    let fft_w = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        fft_w.process(row);
    }
    // Columns (transpose, transform, transpose back).
    let fft_h = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut out = Array2::<f64>::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        fft_h.process(&mut col);
        for i in 0..h {
            out[[i, j]] = col[i].norm_sqr();
        }
    }
    out
}

/// Verify Parseval's identity for one band: `Σ x² = (1/N²) Σ |X|²`.
/// Returns the relative error.
pub fn parseval_residual(plane: &ndarray::ArrayView2<'_, f64>) -> f64 {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::new();
    let power = dft_power(plane, &mut planner);
    let spatial: f64 = plane.iter().map(|&v| v * v).sum();
    let spectral: f64 = power.sum() / (h * w) as f64;
    (spatial - spectral).abs() / spatial.abs().max(1e-300)
}

/// Radially averaged DFT power spectrum of square `[C, N, N]` images.
///
/// Per image and band: 2-D DFT → squared magnitude → radial binning into
/// N/2 uniform rings over (0, √2/2] cycles/pixel → `10·log10` of each ring
/// mean → averaged over bands and images.  The DC term is excluded.
pub fn power_spectrum(images: &[ArrayView3<'_, f64>]) -> Result<SpectrumCurve> {
    if images.is_empty() {
        return Err(Error::invalid("power_spectrum: empty image list"));
    }
    let (_, n, n2) = images[0].dim();
    if n != n2 {
        return Err(Error::invalid(format!("power_spectrum: non-square image {n}x{n2}")));
    }
    if n % 2 != 0 || n < 4 {
        return Err(Error::invalid(format!("power_spectrum: side {n} must be even and >= 4")));
    }
    let bins = n / 2;
    let max_f = 0.5 * std::f64::consts::SQRT_2;
    let step = max_f / bins as f64;

    let mut planner = FftPlanner::new();
    let mut db_acc = vec![0.0f64; bins];
    let mut curves = 0usize;
    for img in images {
        let (c, h, w) = img.dim();
        if (h, w) != (n, n) {
            return Err(Error::shape("power_spectrum: images disagree in size"));
        }
        for ci in 0..c {
            let plane = img.index_axis(ndarray::Axis(0), ci);
            let power = dft_power(&plane, &mut planner);
            let mut ring_sum = vec![0.0f64; bins];
            let mut ring_cnt = vec![0usize; bins];
            for u in 0..n {
                for v in 0..n {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let fu = u.min(n - u) as f64 / n as f64;
                    let fv = v.min(n - v) as f64 / n as f64;
                    let r = (fu * fu + fv * fv).sqrt();
                    // Ring k covers (k·step, (k+1)·step]; r > 0 here.
                    let k = ((r / step).ceil() as usize - 1).min(bins - 1);
                    ring_sum[k] += power[[u, v]];
                    ring_cnt[k] += 1;
                }
            }
            for k in 0..bins {
                let mean = if ring_cnt[k] > 0 {
                    ring_sum[k] / ring_cnt[k] as f64
                } else {
                    0.0
                };
                db_acc[k] += 10.0 * mean.max(POWER_FLOOR).log10();
            }
            curves += 1;
        }
    }
    let power_db: Vec<f64> = db_acc.iter().map(|&v| v / curves as f64).collect();
    let radial_freq: Vec<f64> = (0..bins).map(|k| (k as f64 + 0.5) * step).collect();
    Ok(SpectrumCurve { radial_freq, power_db })
}

impl SpectrumCurve {
    /// Integral of the *linear* ring power above a frequency cutoff
    /// (trapezoid-free simple sum of 10^(dB/10) · bin width).
    pub fn integrated_power_above(&self, cutoff: f64) -> f64 {
        let step = if self.radial_freq.len() >= 2 {
            self.radial_freq[1] - self.radial_freq[0]
        } else {
            1.0
        };
        self.radial_freq
            .iter()
            .zip(&self.power_db)
            .filter(|(f, _)| **f > cutoff)
            .map(|(_, db)| 10f64.powf(db / 10.0) * step)
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Per-band histograms
// ---------------------------------------------------------------------------

/// Normalised per-band histograms over a clip range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandHistograms {
    pub bins: usize,
    pub range: (f64, f64),
    /// One normalised histogram per band; each sums to 1.
    pub histograms: Vec<Vec<f64>>,
    /// Count of values that fell outside the range and were clipped.
    pub clipped: usize,
}

/// Histogram every band of a set of images.  All images must share a band
/// count.  Out-of-range values clip into the edge bins and are counted.
pub fn band_histograms(
    images: &[ArrayView3<'_, f64>],
    bins: usize,
    range: (f64, f64),
) -> Result<BandHistograms> {
    if images.is_empty() {
        return Err(Error::invalid("band_histograms: empty image list"));
    }
    if bins == 0 || !(range.1 > range.0) {
        return Err(Error::invalid("band_histograms: bad bins/range"));
    }
    let c = images[0].dim().0;
    let mut counts = vec![vec![0u64; bins]; c];
    let mut totals = vec![0u64; c];
    let mut clipped = 0usize;
    let width = (range.1 - range.0) / bins as f64;
    for img in images {
        if img.dim().0 != c {
            return Err(Error::shape("band_histograms: band counts disagree"));
        }
        for ci in 0..c {
            for &v in img.index_axis(Axis(0), ci).iter() {
                if v < range.0 || v > range.1 {
                    clipped += 1;
                }
                let idx = (((v - range.0) / width).floor() as isize)
                    .clamp(0, bins as isize - 1) as usize;
                counts[ci][idx] += 1;
                totals[ci] += 1;
            }
        }
    }
    let histograms = counts
        .iter()
        .zip(&totals)
        .map(|(cs, &tot)| cs.iter().map(|&n| n as f64 / tot as f64).collect())
        .collect();
    Ok(BandHistograms { bins, range, histograms, clipped })
}

/// Mean over bands of the per-band histogram L1 distance.
pub fn histogram_l1(a: &BandHistograms, b: &BandHistograms) -> Result<f64> {
    if a.bins != b.bins || a.histograms.len() != b.histograms.len() {
        return Err(Error::shape("histogram_l1: incompatible histograms"));
    }
    let c = a.histograms.len();
    let mut acc = 0.0;
    for (ha, hb) in a.histograms.iter().zip(&b.histograms) {
        acc += ha.iter().zip(hb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(acc / c as f64)
}

// ---------------------------------------------------------------------------
// Aggregated metric rows
// ---------------------------------------------------------------------------

/// One row of a method-comparison table: mean PSNR and SSIM of a method over
/// one dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub split: Split,
    /// Mean PSNR in dB over the samples with finite PSNR.  When
    /// `psnr_infinite` is set at least one sample reproduced its target
    /// exactly, so the true mean is unbounded; this field then reports the
    /// mean of the remaining samples (0.0 if there are none).
    pub psnr_db: f64,
    /// True when any sample hit the zero-error PSNR sentinel.
    pub psnr_infinite: bool,
    /// Mean SSIM, in [-1, 1].
    pub ssim: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::invalid("MetricReport: n_samples must be >= 1"));
        }
        if !self.psnr_db.is_finite() {
            return Err(Error::invalid(
                "MetricReport: psnr_db must be finite (unbounded means are flagged via psnr_infinite)",
            ));
        }
        if !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::invalid(format!(
                "MetricReport: ssim {} outside [-1, 1]",
                self.ssim
            )));
        }
        Ok(())
    }
}
