//! Bicubic resampling (Catmull-Rom family kernel, a = −0.75) with the
//! half-pixel-centre coordinate convention and replicated edges.
//!
//! The resampling weights depend only on geometry, never on the data, so the
//! operation is linear in its input and the backward pass is the exact
//! transpose scatter of the forward gather.

use ndarray::{Array2, ArrayView2, Ix4, IxDyn};

use crate::tape::{Arr, BackwardCtx, BackwardOp, Tape, Var};

const A: f64 = -0.75;

fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-position taps along one axis: four clamped source indices and
/// their kernel weights.  Weights sum to 1 for every fractional phase.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    assert!(in_len > 0 && out_len > 0, "resize axis of zero length");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for (k, (i, w)) in idx.iter_mut().zip(wts.iter_mut()).enumerate() {
                let tap = base - 1 + k as isize;
                *i = tap.clamp(0, in_len as isize - 1) as usize;
                *w = cubic_kernel(frac + 1.0 - k as f64);
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resize of a single 2-D plane.
pub fn bicubic_resize_plane(x: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let row_taps = axis_taps(h, out_h);
    let col_taps = axis_taps(w, out_w);
    // Separable: resample columns first into [h, out_w], then rows.
    let mut mid = Array2::<f64>::zeros((h, out_w));
    for i in 0..h {
        for (j, (ti, tw)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += tw[k] * x[[i, ti[k]]];
            }
            mid[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (i, (ti, tw)) in row_taps.iter().enumerate() {
        for j in 0..out_w {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += tw[k] * mid[[ti[k], j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Bicubic resize of every plane of an NCHW tensor (plain array, no tape).
pub fn bicubic_resize_arr(x: &Arr, out_h: usize, out_w: usize) -> Arr {
    let xv = x.view().into_dimensionality::<Ix4>().expect("bicubic_resize_arr input must be NCHW");
    let (n, c, _, _) = xv.dim();
    let mut out = Arr::zeros(IxDyn(&[n, c, out_h, out_w]));
    for ni in 0..n {
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), ni);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let resized = bicubic_resize_plane(plane, out_h, out_w);
            out.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), ci)
                .assign(&resized);
        }
    }
    out
}

struct BicubicResizeOp {
    in_h: usize,
    in_w: usize,
}

impl BackwardOp for BicubicResizeOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, out_h, out_w) = dy.dim();
        let row_taps = axis_taps(self.in_h, out_h);
        let col_taps = axis_taps(self.in_w, out_w);
        let mut dx = Arr::zeros(IxDyn(&[n, c, self.in_h, self.in_w]));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..out_h {
                    let (ri, rw) = &row_taps[oi];
                    for oj in 0..out_w {
                        let g = dy[[ni, ci, oi, oj]];
                        if g == 0.0 {
                            continue;
                        }
                        let (cj, cw) = &col_taps[oj];
                        for u in 0..4 {
                            let gr = g * rw[u];
                            for v in 0..4 {
                                dx[[ni, ci, ri[u], cj[v]]] += gr * cw[v];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    /// Differentiable bicubic resize of an NCHW tensor to `out_h` × `out_w`.
    pub fn bicubic_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "bicubic_resize input must be NCHW");
        let out = bicubic_resize_arr(self.value(x), out_h, out_w);
        self.push(out, vec![x], Box::new(BicubicResizeOp { in_h: shape[2], in_w: shape[3] }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{assert_grads_close, central_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_weights_partition_unity() {
        for phase in [0.0, 0.1, 0.25, 0.5, 0.77, 0.999] {
            let s: f64 = (0..4).map(|k| cubic_kernel(phase + 1.0 - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12, "phase {phase}: weight sum {s}");
        }
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let x = Arr::from_elem(IxDyn(&[1, 1, 5, 7]), 3.25);
        let y = bicubic_resize_arr(&x, 12, 10);
        for &v in y.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Arr::from_shape_fn(IxDyn(&[1, 2, 6, 6]), |_| rng.random_range(0.0..1.0));
        let y = bicubic_resize_arr(&x, 6, 6);
        let diff = (&y - &x).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn separable_pass_matches_direct_sixteen_tap_evaluation() {
        // Oracle: evaluate the 2-D interpolant directly as a double sum of
        // row/column kernel weights; the separable implementation must agree
        // to machine precision.
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let x = Arr::from_shape_fn(IxDyn(&[1, 1, 5, 6]), |_| rng.random_range(-1.0..1.0));
        let (out_h, out_w) = (8, 9);
        let y = bicubic_resize_arr(&x, out_h, out_w);
        let rt = axis_taps(5, out_h);
        let ct = axis_taps(6, out_w);
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = 0.0;
                for u in 0..4 {
                    for v in 0..4 {
                        acc += rt[i].1[u] * ct[j].1[v] * x[[0, 0, rt[i].0[u], ct[j].0[v]]];
                    }
                }
                assert!(
                    (y[[0, 0, i, j]] - acc).abs() < 1e-12,
                    "({i},{j}): {} vs {acc}",
                    y[[0, 0, i, j]]
                );
            }
        }
    }

    #[test]
    fn upsampled_ramp_stays_close_to_the_ideal_ramp() {
        // The a = -0.75 kernel does not reproduce degree-1 polynomials
        // exactly (only a = -0.5 does), but it must stay within a few percent
        // of the ideal ramp away from the clamped edges.
        let x = Arr::from_shape_fn(IxDyn(&[1, 1, 1, 16]), |ix| ix[3] as f64);
        let y = bicubic_resize_arr(&x, 1, 32);
        for j in 4..28 {
            let ideal = (j as f64 + 0.5) / 2.0 - 0.5;
            assert!(
                (y[[0, 0, 0, j]] - ideal).abs() < 0.06,
                "j={j}: {} vs {ideal}",
                y[[0, 0, 0, j]]
            );
        }
    }

    #[test]
    fn resize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x0 = Arr::from_shape_fn(IxDyn(&[1, 1, 4, 5]), |_| rng.random_range(-1.0..1.0));
        let run = |x: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = t.bicubic_resize(xv, 6, 8);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let y = t.bicubic_resize(xv, 6, 8);
        let sq = t.square(y);
        let l = t.mean_all(sq);
        t.backward(l);
        assert_grads_close(t.grad(xv).unwrap(), &central_diff(&x0, 1e-6, run), 1e-7);
    }
}
