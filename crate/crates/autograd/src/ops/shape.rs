//! Layout-changing operations: concatenation, batch gathering, pixel
//! shuffle, pooling and the dense (linear) layer.

use ndarray::{Axis, Ix2, Ix4, IxDyn};

use crate::tape::{Arr, BackwardCtx, BackwardOp, Tape, Var};

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let mut grads = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &len in &self.sizes {
            let slice = ctx
                .grad
                .slice_axis(Axis(self.axis), ndarray::Slice::from(start..start + len));
            grads.push(Some(slice.to_owned()));
            start += len;
        }
        grads
    }
}

struct GatherBatchOp {
    indices: Vec<usize>,
    input_batch: usize,
}

impl BackwardOp for GatherBatchOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let mut shape = ctx.grad.shape().to_vec();
        shape[0] = self.input_batch;
        let mut dx = Arr::zeros(IxDyn(&shape));
        for (row, &src) in self.indices.iter().enumerate() {
            let g = ctx.grad.index_axis(Axis(0), row);
            let mut acc = dx.index_axis_mut(Axis(0), src);
            acc += &g;
        }
        vec![Some(dx)]
    }
}

struct PixelShuffleOp {
    r: usize,
}

impl BackwardOp for PixelShuffleOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, oh, ow) = dy.dim();
        let r = self.r;
        let (h, w) = (oh / r, ow / r);
        let mut dx = Arr::zeros(IxDyn(&[n, c * r * r, h, w]));
        for ni in 0..n {
            for co in 0..c {
                for dh in 0..r {
                    for dw in 0..r {
                        let ci = co * r * r + dh * r + dw;
                        for i in 0..h {
                            for j in 0..w {
                                dx[[ni, ci, i, j]] = dy[[ni, co, i * r + dh, j * r + dw]];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct AvgPoolOp {
    k: usize,
}

impl BackwardOp for AvgPoolOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, oh, ow) = dy.dim();
        let k = self.k;
        let inv = 1.0 / (k * k) as f64;
        let mut dx = Arr::zeros(IxDyn(&[n, c, oh * k, ow * k]));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let g = dy[[ni, ci, oi, oj]] * inv;
                        for di in 0..k {
                            for dj in 0..k {
                                dx[[ni, ci, oi * k + di, oj * k + dj]] = g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct SpatialMeanOp;

impl BackwardOp for SpatialMeanOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
        let dy = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
        let (n, c, h, w) = x.dim();
        let inv = 1.0 / (h * w) as f64;
        let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[[ni, ci]] * inv;
                dx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        vec![Some(dx)]
    }
}

struct LinearOp;

impl BackwardOp for LinearOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
        let w = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
        let dy = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
        let dx = dy.dot(&w).into_dyn();
        let dw = dy.t().dot(&x).into_dyn();
        let db = ctx.parents.get(2).map(|_| dy.sum_axis(Axis(0)).into_dyn());
        let mut grads = vec![Some(dx), Some(dw)];
        if ctx.parents.len() == 3 {
            grads.push(db);
        }
        grads
    }
}

impl Tape {
    /// Concatenate along the channel axis (axis 1 of NCHW tensors).
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Var {
        self.concat(inputs, 1)
    }

    /// Concatenate along an arbitrary axis; all other dims must match.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let views: Vec<_> = inputs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes = inputs.iter().map(|v| self.value(*v).shape()[axis]).collect();
        self.push(out, inputs.to_vec(), Box::new(ConcatOp { axis, sizes }))
    }

    /// Select rows along the batch axis; `indices` may repeat (gradients from
    /// repeated rows accumulate onto their shared source).
    pub fn gather_batch(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let batch = xv.shape()[0];
        for &i in indices {
            assert!(i < batch, "gather_batch index {i} out of range (batch {batch})");
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        let mut out = Arr::zeros(IxDyn(&shape));
        for (row, &src) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&xv.index_axis(Axis(0), src));
        }
        self.push(
            out,
            vec![x],
            Box::new(GatherBatchOp { indices: indices.to_vec(), input_batch: batch }),
        )
    }

    /// Rearrange `[N, C·r², H, W]` into `[N, C, r·H, r·W]`, taking the r²
    /// sub-channels of each output channel as its r×r sub-pixel grid.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pixel_shuffle input must be NCHW");
        let (n, c_in, h, w) = xv.dim();
        assert!(r >= 1 && c_in % (r * r) == 0, "pixel_shuffle: channels {c_in} not divisible by r²={}", r * r);
        let c = c_in / (r * r);
        let mut out = Arr::zeros(IxDyn(&[n, c, h * r, w * r]));
        for ni in 0..n {
            for co in 0..c {
                for dh in 0..r {
                    for dw in 0..r {
                        let ci = co * r * r + dh * r + dw;
                        for i in 0..h {
                            for j in 0..w {
                                out[[ni, co, i * r + dh, j * r + dw]] = xv[[ni, ci, i, j]];
                            }
                        }
                    }
                }
            }
        }
        self.push(out, vec![x], Box::new(PixelShuffleOp { r }))
    }

    /// Non-overlapping k×k block average ("area" downsampling by factor k).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("avg_pool input must be NCHW");
        let (n, c, h, w) = xv.dim();
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by block {k}");
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = Arr::zeros(IxDyn(&[n, c, oh, ow]));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                acc += xv[[ni, ci, oi * k + di, oj * k + dj]];
                            }
                        }
                        out[[ni, ci, oi, oj]] = acc * inv;
                    }
                }
            }
        }
        self.push(out, vec![x], Box::new(AvgPoolOp { k }))
    }

    /// Global average over the spatial dims: `[N, C, H, W]` → `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("spatial_mean input must be NCHW");
        let (n, c, h, w) = xv.dim();
        let inv = 1.0 / (h * w) as f64;
        let mut out = Arr::zeros(IxDyn(&[n, c]));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] = xv
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .sum()
                    * inv;
            }
        }
        self.push(out, vec![x], Box::new(SpatialMeanOp))
    }

    /// Dense layer: `x` is `[N, F]`, `w` is `[O, F]`, optional `b` is `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("linear input must be [N, F]");
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("linear weight must be [O, F]");
        assert_eq!(xv.dim().1, wv.dim().1, "linear feature mismatch");
        let mut y = xv.dot(&wv.t());
        if let Some(bv) = b {
            let bb = self.value(bv);
            assert_eq!(bb.shape(), [wv.dim().0], "linear bias must be [O]");
            let b1 = bb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b1;
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.push(y.into_dyn(), parents, Box::new(LinearOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{assert_grads_close, central_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn concat_channels_roundtrips_gradient_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a0 = randn(&mut rng, &[1, 2, 3, 3]);
        let b0 = randn(&mut rng, &[1, 1, 3, 3]);
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let c = t.concat_channels(&[a, b]);
        assert_eq!(t.shape(c), &[1, 3, 3, 3]);
        let sq = t.square(c);
        let l = t.mean_all(sq);
        t.backward(l);
        let n = 27.0;
        assert_grads_close(t.grad(a).unwrap(), &(2.0 * &a0 / n), 1e-12);
        assert_grads_close(t.grad(b).unwrap(), &(2.0 * &b0 / n), 1e-12);
    }

    #[test]
    fn gather_batch_accumulates_repeated_rows() {
        let mut t = Tape::new();
        let x0 = Arr::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![1.0, 10.0]).unwrap();
        let x = t.leaf(x0);
        let g = t.gather_batch(x, &[0, 0, 1, 0]);
        assert_eq!(t.shape(g), &[4, 1, 1, 1]);
        let l = t.sum_all(g);
        t.backward(l);
        let expect = Arr::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![3.0, 1.0]).unwrap();
        assert_eq!(t.grad(x).unwrap(), &expect);
    }

    #[test]
    fn pixel_shuffle_places_subchannels_on_subpixel_grid() {
        // One output channel, r=2: channels (0,1,2,3) land at offsets
        // (0,0), (0,1), (1,0), (1,1).
        let mut t = Tape::new();
        let x0 = Arr::from_shape_vec(IxDyn(&[1, 4, 1, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = t.leaf(x0);
        let y = t.pixel_shuffle(x, 2);
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y)[[0, 0, 0, 0]], 1.0);
        assert_eq!(t.value(y)[[0, 0, 0, 1]], 2.0);
        assert_eq!(t.value(y)[[0, 0, 1, 0]], 3.0);
        assert_eq!(t.value(y)[[0, 0, 1, 1]], 4.0);
        let l = t.sum_all(y);
        t.backward(l);
        assert_eq!(t.grad(x).unwrap().sum(), 4.0);
    }

    #[test]
    fn avg_pool_and_spatial_mean_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x0 = randn(&mut rng, &[1, 2, 4, 4]);

        let run_pool = |x: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = t.avg_pool(xv, 2);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let y = t.avg_pool(xv, 2);
        assert_eq!(t.shape(y), &[1, 2, 2, 2]);
        let sq = t.square(y);
        let l = t.mean_all(sq);
        t.backward(l);
        assert_grads_close(t.grad(xv).unwrap(), &central_diff(&x0, 1e-6, run_pool), 1e-7);

        let run_mean = |x: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = t.spatial_mean(xv);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let y = t.spatial_mean(xv);
        assert_eq!(t.shape(y), &[1, 2]);
        let sq = t.square(y);
        let l = t.mean_all(sq);
        t.backward(l);
        assert_grads_close(t.grad(xv).unwrap(), &central_diff(&x0, 1e-6, run_mean), 1e-7);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x0 = randn(&mut rng, &[3, 5]);
        let w0 = randn(&mut rng, &[2, 5]);
        let b0 = randn(&mut rng, &[2]);
        let run = |x: &Arr, w: &Arr, b: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.linear(xv, wv, Some(bv));
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let wv = t.leaf(w0.clone());
        let bv = t.leaf(b0.clone());
        let y = t.linear(xv, wv, Some(bv));
        let sq = t.square(y);
        let l = t.mean_all(sq);
        t.backward(l);
        assert_grads_close(t.grad(xv).unwrap(), &central_diff(&x0, 1e-6, |x| run(x, &w0, &b0)), 1e-7);
        assert_grads_close(t.grad(wv).unwrap(), &central_diff(&w0, 1e-6, |w| run(&x0, w, &b0)), 1e-7);
        assert_grads_close(t.grad(bv).unwrap(), &central_diff(&b0, 1e-6, |b| run(&x0, &w0, b)), 1e-7);
    }
}
