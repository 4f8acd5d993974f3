//! Fused loss heads that need numerically careful forward/backward rules.

use ndarray::{IxDyn, Zip};

use crate::tape::{Arr, BackwardCtx, BackwardOp, Tape, Var};

/// Numerically stable binary cross-entropy on logits, averaged over all
/// elements:  `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
struct BceWithLogitsOp {
    target: Arr,
}

impl BackwardOp for BceWithLogitsOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0];
        let scale = ctx.grad[[0]] / x.len() as f64;
        let mut dx = Arr::zeros(IxDyn(x.shape()));
        Zip::from(&mut dx).and(x).and(&self.target).for_each(|d, &x, &t| {
            let sig = 1.0 / (1.0 + (-x).exp());
            *d = (sig - t) * scale;
        });
        vec![Some(dx)]
    }
}

impl Tape {
    /// Mean binary cross-entropy between logits `x` and a constant target in
    /// `[0, 1]` of the same shape.  Returns a `[1]`-shaped scalar node.
    pub fn bce_with_logits(&mut self, x: Var, target: &Arr) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "bce_with_logits shape mismatch");
        let mut total = 0.0;
        Zip::from(xv).and(target).for_each(|&x, &t| {
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        });
        let v = Arr::from_elem(IxDyn(&[1]), total / xv.len() as f64);
        self.push(v, vec![x], Box::new(BceWithLogitsOp { target: target.clone() }))
    }
}
