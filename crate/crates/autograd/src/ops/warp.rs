//! Sub-pixel translation by bilinear resampling, differentiable both in the
//! image and in the real-valued shift.
//!
//! Convention: `translate(x, s)` with `s = (dx, dy)` produces
//! `out(i, j) = x(i + dy, j + dx)` — it *samples* the input at positions
//! displaced by the shift, i.e. image content moves by `-s`.  Out-of-bounds
//! samples replicate the nearest edge pixel.

use ndarray::{Ix2, Ix4, IxDyn};

use crate::tape::{Arr, BackwardCtx, BackwardOp, Tape, Var};

#[inline]
fn clampi(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

/// Translate one `[C, H, W]` image by `(dx, dy)` (plain array, no tape).
pub fn translate_arr(x: &Arr, dx: f64, dy: f64) -> Arr {
    let xv = x.view().into_dimensionality::<ndarray::Ix3>().expect("translate_arr input must be CHW");
    let (c, h, w) = xv.dim();
    let mut out = Arr::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for i in 0..h {
            let sy = i as f64 + dy;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0i = clampi(y0 as isize, h);
            let y1i = clampi(y0 as isize + 1, h);
            for j in 0..w {
                let sx = j as f64 + dx;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0i = clampi(x0 as isize, w);
                let x1i = clampi(x0 as isize + 1, w);
                let p00 = xv[[ci, y0i, x0i]];
                let p01 = xv[[ci, y0i, x1i]];
                let p10 = xv[[ci, y1i, x0i]];
                let p11 = xv[[ci, y1i, x1i]];
                out[[ci, i, j]] = (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01)
                    + fy * ((1.0 - fx) * p10 + fx * p11);
            }
        }
    }
    out
}

struct TranslateOp;

impl BackwardOp for TranslateOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
        let s = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
        let dy_out = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();

        let mut dx_img = ctx.wants[0].then(|| Arr::zeros(IxDyn(x.shape())));
        let mut dshift = ctx.wants[1].then(|| Arr::zeros(IxDyn(s.shape())));

        for ni in 0..n {
            let (sdx, sdy) = (s[[ni, 0]], s[[ni, 1]]);
            for ci in 0..c {
                for i in 0..h {
                    let sy = i as f64 + sdy;
                    let y0 = sy.floor();
                    let fy = sy - y0;
                    let y0i = clampi(y0 as isize, h);
                    let y1i = clampi(y0 as isize + 1, h);
                    for j in 0..w {
                        let g = dy_out[[ni, ci, i, j]];
                        if g == 0.0 {
                            continue;
                        }
                        let sx = j as f64 + sdx;
                        let x0 = sx.floor();
                        let fx = sx - x0;
                        let x0i = clampi(x0 as isize, w);
                        let x1i = clampi(x0 as isize + 1, w);
                        let p00 = x[[ni, ci, y0i, x0i]];
                        let p01 = x[[ni, ci, y0i, x1i]];
                        let p10 = x[[ni, ci, y1i, x0i]];
                        let p11 = x[[ni, ci, y1i, x1i]];
                        if let Some(dximg) = dx_img.as_mut() {
                            dximg[[ni, ci, y0i, x0i]] += g * (1.0 - fy) * (1.0 - fx);
                            dximg[[ni, ci, y0i, x1i]] += g * (1.0 - fy) * fx;
                            dximg[[ni, ci, y1i, x0i]] += g * fy * (1.0 - fx);
                            dximg[[ni, ci, y1i, x1i]] += g * fy * fx;
                        }
                        if let Some(ds) = dshift.as_mut() {
                            // d out / d sx and d out / d sy of the bilinear form.
                            let ddx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10);
                            let ddy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01);
                            ds[[ni, 0]] += g * ddx;
                            ds[[ni, 1]] += g * ddy;
                        }
                    }
                }
            }
        }
        vec![dx_img, dshift]
    }
}

impl Tape {
    /// Differentiable sub-pixel translation.  `x` is `[N, C, H, W]`; `shift`
    /// is `[N, 2]` holding `(dx, dy)` per batch item.  Gradients flow into
    /// both the image and the shift.
    pub fn translate(&mut self, x: Var, shift: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("translate input must be NCHW");
        let sv = self.value(shift).view().into_dimensionality::<Ix2>().expect("translate shift must be [N, 2]");
        let (n, c, h, w) = xv.dim();
        assert_eq!(sv.dim(), (n, 2), "translate shift must be [N, 2]");
        let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
        for ni in 0..n {
            let plane = xv.index_axis(ndarray::Axis(0), ni).to_owned().into_dyn();
            let shifted = translate_arr(&plane, sv[[ni, 0]], sv[[ni, 1]]);
            out.index_axis_mut(ndarray::Axis(0), ni).assign(&shifted);
        }
        self.push(out, vec![x, shift], Box::new(TranslateOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{assert_grads_close, central_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integer_shift_moves_samples_exactly() {
        // x has value j along columns; shifting by dx=1 samples column j+1.
        let x = Arr::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| ix[2] as f64);
        let y = translate_arr(&x, 1.0, 0.0);
        assert_eq!(y[[0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 2]], 3.0);
        // Edge replication: last column samples out of bounds.
        assert_eq!(y[[0, 0, 3]], 3.0);
    }

    #[test]
    fn zero_shift_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = Arr::from_shape_fn(IxDyn(&[2, 5, 5]), |_| rng.random_range(-1.0..1.0));
        let y = translate_arr(&x, 0.0, 0.0);
        assert_eq!(y, x);
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let x = Arr::from_shape_vec(IxDyn(&[1, 1, 4]), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = translate_arr(&x, 0.5, 0.0);
        assert!((y[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((y[[0, 0, 1]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_shifts_invert_exactly_on_a_plane() {
        // Bilinear interpolation reproduces a + b·i + c·j exactly, so a
        // shift/unshift round trip on a plane is lossless in the interior.
        // Any error in the sampling convention or sign breaks this hard.
        let x = Arr::from_shape_fn(IxDyn(&[1, 16, 16]), |ix| {
            2.0 + 0.7 * ix[1] as f64 - 0.4 * ix[2] as f64
        });
        let fwd = translate_arr(&x, 0.4, -0.3);
        // The shift really moved content: sampled at (i - 0.3, j + 0.4).
        let expect = 2.0 + 0.7 * (5.0 - 0.3) - 0.4 * (5.0 + 0.4);
        assert!((fwd[[0, 5, 5]] - expect).abs() < 1e-12);
        let back = translate_arr(&fwd, -0.4, 0.3);
        for i in 3..13 {
            for j in 3..13 {
                assert!(
                    (back[[0, i, j]] - x[[0, i, j]]).abs() < 1e-12,
                    "round trip drifted at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn translate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x0 = Arr::from_shape_fn(IxDyn(&[2, 1, 5, 5]), |_| rng.random_range(-1.0..1.0));
        let s0 = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, -0.6, -1.2, 0.45]).unwrap();

        let run = |x: &Arr, s: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let sv = t.leaf(s.clone());
            let y = t.translate(xv, sv);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };

        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let sv = t.leaf(s0.clone());
        let y = t.translate(xv, sv);
        let sq = t.square(y);
        let l = t.mean_all(sq);
        t.backward(l);
        assert_grads_close(t.grad(xv).unwrap(), &central_diff(&x0, 1e-6, |x| run(x, &s0)), 1e-6);
        assert_grads_close(t.grad(sv).unwrap(), &central_diff(&s0, 1e-6, |s| run(&x0, s)), 1e-6);
    }
}
