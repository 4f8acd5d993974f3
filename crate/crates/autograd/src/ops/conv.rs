//! 2-D convolution, transposed convolution and fixed-kernel filtering,
//! lowered to im2col / col2im plus GEMM.
//!
//! Geometry conventions follow the usual deep-learning definitions:
//!
//! * convolution: `out = (in + 2*pad - k) / stride + 1` (must divide exactly),
//! * transposed convolution: `out = (in - 1) * stride - 2*pad + k + out_pad`.
//!
//! Both map between a "grid" of positions (the convolution output for the
//! forward direction) and k×k patches of a spatial plane.  `im2col` gathers
//! patches into a `[C*k*k, grid_h*grid_w]` matrix; `col2im` scatter-adds such
//! a matrix back.  The same two kernels serve conv forward/backward and
//! transposed-conv forward/backward with roles swapped.

use ndarray::{Array2, ArrayView3, ArrayViewMut3, Ix4, IxDyn};

use crate::tape::{Arr, BackwardCtx, BackwardOp, Tape, Var};

/// Patch geometry shared by the im2col/col2im pair.
#[derive(Clone, Copy, Debug)]
struct PatchGeom {
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

/// Gather k×k patches of `x` (one per grid position) into a
/// `[C*k*k, grid_h*grid_w]` matrix.  Out-of-bounds taps read zero.
fn im2col(x: ArrayView3<'_, f64>, g: PatchGeom) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let cols_len = g.grid_h * g.grid_w;
    let mut cols = Array2::<f64>::zeros((c * g.k * g.k, cols_len));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row_idx = (ci * g.k + ki) * g.k + kj;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().expect("cols row is contiguous");
                for gi in 0..g.grid_h {
                    let si = (gi * g.stride + ki) as isize - g.pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = plane.row(si as usize);
                    let src = src_row.as_slice().expect("input plane row is contiguous");
                    let base = gi * g.grid_w;
                    if g.stride == 1 {
                        // Contiguous run: sj = gj + kj - pad for gj in 0..grid_w.
                        let off = kj as isize - g.pad as isize;
                        let gj_lo = (-off).max(0) as usize;
                        let gj_hi = ((w as isize - off).min(g.grid_w as isize)).max(0) as usize;
                        if gj_lo < gj_hi {
                            let s_lo = (gj_lo as isize + off) as usize;
                            row[base + gj_lo..base + gj_hi]
                                .copy_from_slice(&src[s_lo..s_lo + (gj_hi - gj_lo)]);
                        }
                    } else {
                        for gj in 0..g.grid_w {
                            let sj = (gj * g.stride + kj) as isize - g.pad as isize;
                            if sj >= 0 && sj < w as isize {
                                row[base + gj] = src[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns of a `[C*k*k, grid_h*grid_w]` matrix back onto a
/// `[C, H, W]` plane stack (exact adjoint of [`im2col`]).
fn col2im(cols: &Array2<f64>, mut out: ArrayViewMut3<'_, f64>, g: PatchGeom) {
    let (c, h, w) = out.dim();
    debug_assert_eq!(cols.dim(), (c * g.k * g.k, g.grid_h * g.grid_w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ci);
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row_idx = (ci * g.k + ki) * g.k + kj;
                let row = cols.row(row_idx);
                let row = row.as_slice().expect("cols row is contiguous");
                for gi in 0..g.grid_h {
                    let si = (gi * g.stride + ki) as isize - g.pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let mut dst_row = plane.row_mut(si as usize);
                    let dst = dst_row.as_slice_mut().expect("output plane row is contiguous");
                    let base = gi * g.grid_w;
                    for gj in 0..g.grid_w {
                        let sj = (gj * g.stride + kj) as isize - g.pad as isize;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += row[base + gj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = input + 2 * pad;
    assert!(span >= k, "convolution kernel larger than padded input");
    // Floor division: trailing positions that do not fit a full stride are
    // dropped, matching the usual deep-learning convention.
    (span - k) / stride + 1
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl BackwardOp for Conv2dOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
        let w = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c_in, _, _) = x.dim();
        let (c_out, _, k, _) = w.dim();
        let (_, _, oh, ow) = dy.dim();
        let g = PatchGeom { k, stride: self.stride, pad: self.pad, grid_h: oh, grid_w: ow };

        let w_mat = w
            .to_shape((c_out, c_in * k * k))
            .expect("weight reshape")
            .to_owned();

        let mut dx = (ctx.wants[0]).then(|| Arr::zeros(IxDyn(x.shape())));
        let mut dw_mat = (ctx.wants[1]).then(|| Array2::<f64>::zeros((c_out, c_in * k * k)));

        for ni in 0..n {
            let dy_n = dy.index_axis(ndarray::Axis(0), ni);
            let dy_mat = dy_n.to_shape((c_out, oh * ow)).expect("grad reshape");
            if let Some(dw) = dw_mat.as_mut() {
                let cols = im2col(x.index_axis(ndarray::Axis(0), ni), g);
                *dw += &dy_mat.dot(&cols.t());
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = w_mat.t().dot(&dy_mat);
                let mut dx_n = dx
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                col2im(&dcols, dx_n.view_mut(), g);
            }
        }

        let dw = dw_mat.map(|m| m.into_shape_with_order(IxDyn(w.shape())).unwrap());
        let db = ctx.parents.get(2).map(|_| {
            let mut db = Arr::zeros(IxDyn(&[c_out]));
            for ni in 0..n {
                for co in 0..c_out {
                    db[[co]] += dy.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), co).sum();
                }
            }
            db
        });

        let mut grads = vec![dx, dw];
        if ctx.parents.len() == 3 {
            grads.push(db);
        }
        grads
    }
}

struct ConvTranspose2dOp {
    stride: usize,
    pad: usize,
}

impl BackwardOp for ConvTranspose2dOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
        let w = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c_in, h, wd) = x.dim();
        let (_, c_out, k, _) = w.dim();
        let g = PatchGeom { k, stride: self.stride, pad: self.pad, grid_h: h, grid_w: wd };

        let w_mat = w
            .to_shape((c_in, c_out * k * k))
            .expect("weight reshape")
            .to_owned();

        let mut dx = (ctx.wants[0]).then(|| Arr::zeros(IxDyn(x.shape())));
        let mut dw_mat = (ctx.wants[1]).then(|| Array2::<f64>::zeros((c_in, c_out * k * k)));

        for ni in 0..n {
            // Gradient flows through the scatter: gather patches of dy.
            let dy_cols = im2col(dy.index_axis(ndarray::Axis(0), ni), g); // [C_out*k*k, h*w]
            if let Some(dx) = dx.as_mut() {
                let dx_mat = w_mat.dot(&dy_cols); // [C_in, h*w]
                let mut dx_n = dx
                    .index_axis_mut(ndarray::Axis(0), ni)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                for ci in 0..c_in {
                    let mut row = dx_n.index_axis_mut(ndarray::Axis(0), ci);
                    let dst = row.as_slice_mut().unwrap();
                    dst.copy_from_slice(dx_mat.row(ci).as_slice().unwrap());
                }
            }
            if let Some(dw) = dw_mat.as_mut() {
                let x_n = x.index_axis(ndarray::Axis(0), ni);
                let x_mat = x_n.to_shape((c_in, h * wd)).expect("input reshape");
                *dw += &x_mat.dot(&dy_cols.t());
            }
        }

        let dw = dw_mat.map(|m| m.into_shape_with_order(IxDyn(w.shape())).unwrap());
        let db = ctx.parents.get(2).map(|_| {
            let mut db = Arr::zeros(IxDyn(&[c_out]));
            for ni in 0..n {
                for co in 0..c_out {
                    db[[co]] += dy.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), co).sum();
                }
            }
            db
        });

        let mut grads = vec![dx, dw];
        if ctx.parents.len() == 3 {
            grads.push(db);
        }
        grads
    }
}

/// Cross-correlation with a fixed (non-trainable) 2-D kernel, valid padding,
/// applied independently to every channel of every batch item.
struct Filter2dValidOp {
    kernel: Array2<f64>,
}

impl BackwardOp for Filter2dValidOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
        let dy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let (kh, kw) = self.kernel.dim();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        // dx = full correlation of dy with the flipped kernel; expressed as a
        // scatter: each dy tap adds kernel * g into its source window.
        let mut dx = Arr::zeros(IxDyn(x.shape()));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let g = dy[[ni, ci, oi, oj]];
                        if g == 0.0 {
                            continue;
                        }
                        for ki in 0..kh {
                            for kj in 0..kw {
                                dx[[ni, ci, oi + ki, oj + kj]] += g * self.kernel[[ki, kj]];
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
    /// 2-D convolution: `x` is `[N, C_in, H, W]`, `w` is `[C_out, C_in, k, k]`,
    /// optional `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d input must be NCHW");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d weight must be 4-D");
        let (n, c_in, h, wd) = xv.dim();
        let (c_out, wc_in, k, k2) = wv.dim();
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert_eq!(c_in, wc_in, "conv2d channel mismatch: input {c_in}, weight {wc_in}");
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wd, k, stride, pad);
        let g = PatchGeom { k, stride, pad, grid_h: oh, grid_w: ow };

        let w_mat = wv.to_shape((c_out, c_in * k * k)).expect("weight reshape").to_owned();
        let bias: Option<Vec<f64>> = b.map(|bv| {
            let bb = self.value(bv);
            assert_eq!(bb.shape(), [c_out], "conv2d bias must be [C_out]");
            bb.iter().copied().collect()
        });

        let mut out = Arr::zeros(IxDyn(&[n, c_out, oh, ow]));
        for ni in 0..n {
            let cols = im2col(
                xv.index_axis(ndarray::Axis(0), ni),
                g,
            );
            let y = w_mat.dot(&cols); // [C_out, oh*ow]
            let mut out_n = out.index_axis_mut(ndarray::Axis(0), ni);
            for co in 0..c_out {
                let add = bias.as_ref().map_or(0.0, |bv| bv[co]);
                let mut plane = out_n.index_axis_mut(ndarray::Axis(0), co);
                let dst = plane.as_slice_mut().unwrap();
                let src = y.row(co);
                let src = src.as_slice().unwrap();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + add;
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.push(out, parents, Box::new(Conv2dOp { stride, pad }))
    }

    /// Transposed 2-D convolution: `x` is `[N, C_in, H, W]`, `w` is
    /// `[C_in, C_out, k, k]`, optional `b` is `[C_out]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv_transpose2d input must be NCHW");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv_transpose2d weight must be 4-D");
        let (n, c_in, h, wd) = xv.dim();
        let (wc_in, c_out, k, k2) = wv.dim();
        assert_eq!(k, k2, "conv_transpose2d kernel must be square");
        assert_eq!(c_in, wc_in, "conv_transpose2d channel mismatch");
        assert!(out_pad < stride, "output padding must be smaller than stride");
        let oh = (h - 1) * stride + k + out_pad;
        let ow = (wd - 1) * stride + k + out_pad;
        assert!(oh > 2 * pad && ow > 2 * pad, "transposed convolution output collapsed");
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let g = PatchGeom { k, stride, pad, grid_h: h, grid_w: wd };

        let w_mat = wv.to_shape((c_in, c_out * k * k)).expect("weight reshape").to_owned();
        let mut out = Arr::zeros(IxDyn(&[n, c_out, oh, ow]));
        for ni in 0..n {
            let x_n = xv.index_axis(ndarray::Axis(0), ni);
            let x_mat = x_n.to_shape((c_in, h * wd)).expect("input reshape");
            let cols = w_mat.t().dot(&x_mat); // [C_out*k*k, h*w]
            let mut out_n = out
                .index_axis_mut(ndarray::Axis(0), ni)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            col2im(&cols, out_n.view_mut(), g);
        }
        if let Some(bv) = b {
            let bb = self.value(bv);
            assert_eq!(bb.shape(), [c_out], "conv_transpose2d bias must be [C_out]");
            let bias: Vec<f64> = bb.iter().copied().collect();
            for ni in 0..n {
                for co in 0..c_out {
                    out.index_axis_mut(ndarray::Axis(0), ni)
                        .index_axis_mut(ndarray::Axis(0), co)
                        .mapv_inplace(|v| v + bias[co]);
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.push(out, parents, Box::new(ConvTranspose2dOp { stride, pad }))
    }

    /// Correlate every channel with a fixed 2-D kernel, valid padding.
    /// The kernel is data, not a parameter: no gradient flows into it.
    pub fn filter2d_valid(&mut self, x: Var, kernel: &Array2<f64>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("filter2d_valid input must be NCHW");
        let (n, c, h, w) = xv.dim();
        let (kh, kw) = kernel.dim();
        assert!(h >= kh && w >= kw, "filter2d_valid: kernel larger than input");
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = Arr::zeros(IxDyn(&[n, c, oh, ow]));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                acc += xv[[ni, ci, oi + ki, oj + kj]] * kernel[[ki, kj]];
                            }
                        }
                        out[[ni, ci, oi, oj]] = acc;
                    }
                }
            }
        }
        self.push(out, vec![x], Box::new(Filter2dValidOp { kernel: kernel.clone() }))
    }
}
