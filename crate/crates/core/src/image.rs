//! Plain-array image helpers shared across the pipeline: Gaussian blur,
//! area-average downsampling, sub-pixel translation and bicubic resizing of
//! `[C, H, W]` rasters.  All routines are pure; differentiable counterparts
//! live in the autodiff engine.

use ndarray::{Array1, Array3, ArrayView3, Axis};
use srfuse_autograd::ops::{bicubic_resize_arr, translate_arr};

/// Sum-normalised 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Array1<f64> {
    assert!(sigma > 0.0, "gaussian kernel needs sigma > 0");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Array1::<f64>::zeros(2 * radius + 1);
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - radius as f64;
        *v = (-0.5 * (d / sigma).powi(2)).exp();
    }
    let s = k.sum();
    k / s
}

/// Separable Gaussian blur with edge replication.  `sigma <= 0` is identity.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel_1d(sigma);
    let radius = kernel.len() / 2;
    let (c, h, w) = img.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sj = clamp(j as isize + t as isize - radius as isize, w);
                    acc += kv * img[[ci, i, sj]];
                }
                tmp[[ci, i, j]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let si = clamp(i as isize + t as isize - radius as isize, h);
                    acc += kv * tmp[[ci, si, j]];
                }
                out[[ci, i, j]] = acc;
            }
        }
    }
    out
}

/// Area-average downsample by an integer factor (exact block means).
pub fn block_downsample(img: &Array3<f64>, factor: usize) -> Array3<f64> {
    assert!(factor >= 1, "downsample factor must be >= 1");
    if factor == 1 {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    assert!(
        h % factor == 0 && w % factor == 0,
        "dims {h}x{w} not divisible by factor {factor}"
    );
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += img[[ci, oi * factor + di, oj * factor + dj]];
                    }
                }
                out[[ci, oi, oj]] = acc * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour upsample by an integer factor (each pixel becomes an
/// s×s block).  Exact inverse of [`block_downsample`] up to block averaging.
pub fn nearest_upsample(img: &Array3<f64>, factor: usize) -> Array3<f64> {
    assert!(factor >= 1);
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, h * factor, w * factor));
    for ci in 0..c {
        for i in 0..h * factor {
            for j in 0..w * factor {
                out[[ci, i, j]] = img[[ci, i / factor, j / factor]];
            }
        }
    }
    out
}

/// Bicubic resize of a `[C, H, W]` raster.
pub fn bicubic_resize(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let four = img
        .view()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous raster")
        .into_dyn()
        .to_owned();
    bicubic_resize_arr(&four, out_h, out_w)
        .into_shape_with_order((c, out_h, out_w))
        .unwrap()
}

/// Move image *content* by `(dx, dy)` pixels (rightward/downward positive):
/// `out(p) = img(p - (dx, dy))`, bilinear, edge replication.
///
/// This is the generator-side convention; the registration module's
/// `apply_shift(img, s)` samples at `p + s` and therefore inverts it:
/// `apply_shift(translate_content(x, v), v) ≈ x`.
pub fn translate_content(img: &Array3<f64>, dx: f64, dy: f64) -> Array3<f64> {
    let dynimg = img.clone().into_dyn();
    translate_arr(&dynimg, -dx, -dy)
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned()
}

/// Mean over every element of a `[C, H, W]` raster.
pub fn mean_all(img: &ArrayView3<'_, f64>) -> f64 {
    img.mean().expect("mean of empty raster")
}

/// Per-band means of a `[C, H, W]` raster.
pub fn band_means(img: &Array3<f64>) -> Vec<f64> {
    img.axis_iter(Axis(0)).map(|b| b.mean().unwrap_or(0.0)).collect()
}
