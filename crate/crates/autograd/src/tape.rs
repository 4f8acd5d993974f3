//! The tape itself plus scalar/elementwise operations.
//!
//! Structural operations (convolution, resampling, warping, reshaping) live
//! in [`crate::ops`]; they all bottom out in [`Tape::push`].

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn, Zip};

/// Dense dynamic-dimension tensor of `f64`.
pub type Arr = ArrayD<f64>;

/// Handle to a value on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Context handed to backward closures.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Arr,
    /// Values of the node's parents, in the order they were registered.
    pub parents: &'a [&'a Arr],
    /// The node's own forward value.
    pub output: &'a Arr,
    /// `wants[i]` is false when parent `i` does not require a gradient;
    /// expensive closures may skip computing that entry.
    pub wants: &'a [bool],
}

/// Backward rule of one operation: produces one optional gradient per parent.
pub trait BackwardOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>>;
}

enum Node {
    Leaf,
    Op {
        parents: Vec<Var>,
        back: Box<dyn BackwardOp>,
    },
}

/// Wengert tape: values, gradients and backward rules for one forward pass.
///
/// A tape is cheap to create and is intended to be discarded after each
/// optimisation step.  Trainable parameters live outside the tape (see
/// [`crate::nn::ParamStore`]) and are registered per-pass with
/// [`Tape::param`].
#[derive(Default)]
pub struct Tape {
    values: Vec<Arr>,
    grads: Vec<Option<Arr>>,
    nodes: Vec<Node>,
    needs_grad: Vec<bool>,
    params: Vec<(String, Var)>,
    param_vars: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.values.push(value);
        self.grads.push(None);
        self.nodes.push(Node::Leaf);
        self.needs_grad.push(needs_grad);
        Var(id)
    }

    /// Insert an input that does not require a gradient.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push_leaf(value, false)
    }

    /// Insert a trainable leaf (gradient will be accumulated).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push_leaf(value, true)
    }

    /// Insert a named trainable parameter; its gradient can later be
    /// collected with [`Tape::param_grads`].  Feeding the same name twice
    /// returns the Var created the first time, so layers that are applied
    /// repeatedly share one leaf (and accumulate one gradient).
    pub fn param(&mut self, name: &str, value: Arr) -> Var {
        if let Some(v) = self.param_vars.get(name) {
            return *v;
        }
        let v = self.push_leaf(value, true);
        self.params.push((name.to_string(), v));
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// Append an operation node.  `value` is the forward result, `parents`
    /// the inputs it was computed from, `back` its backward rule.
    pub fn push(&mut self, value: Arr, parents: Vec<Var>, back: Box<dyn BackwardOp>) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad[p.0]);
        let id = self.nodes.len();
        self.values.push(value);
        self.grads.push(None);
        self.nodes.push(Node::Op { parents, back });
        self.needs_grad.push(needs);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Extract a scalar value; panics if the node holds more than one element.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        assert_eq!(a.len(), 1, "scalar() called on non-scalar of shape {:?}", a.shape());
        a.iter().copied().next().unwrap()
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    /// Named parameter gradients registered via [`Tape::param`].
    pub fn param_grads(&self) -> Vec<(&str, &Arr)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
            .collect()
    }

    /// Reverse sweep from a scalar root.  Gradients of all antecedent nodes
    /// that require one are accumulated; intermediate gradients are freed as
    /// soon as they have been propagated.
    pub fn backward(&mut self, root: Var) {
        let root_val = &self.values[root.0];
        assert_eq!(root_val.len(), 1, "backward() needs a scalar root, got shape {:?}", root_val.shape());
        self.grads[root.0] = Some(Arr::ones(IxDyn(root_val.shape())));

        for i in (0..=root.0).rev() {
            let Node::Op { parents, back } = &self.nodes[i] else {
                continue;
            };
            // Keep leaf/param gradients; op gradients are consumed here.
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Arr> = parents.iter().map(|p| &self.values[p.0]).collect();
            let wants: Vec<bool> = parents.iter().map(|p| self.needs_grad[p.0]).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                parents: &parent_vals,
                output: &self.values[i],
                wants: &wants,
            };
            let parent_grads = back.backward(&ctx);
            assert_eq!(parent_grads.len(), parents.len(), "backward rule returned wrong arity");
            let parents = parents.clone();
            for (p, pg) in parents.iter().zip(parent_grads) {
                if !self.needs_grad[p.0] {
                    continue;
                }
                let Some(pg) = pg else {
                    panic!("backward rule omitted a required gradient for parent {}", p.0);
                };
                assert_eq!(
                    pg.shape(),
                    self.values[p.0].shape(),
                    "gradient shape mismatch for parent {}",
                    p.0
                );
                match &mut self.grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar operations
// ---------------------------------------------------------------------------

struct AddOp;
impl BackwardOp for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct SubOp;
impl BackwardOp for SubOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(ctx.grad.clone()), Some(-ctx.grad)]
    }
}

struct MulOp;
impl BackwardOp for MulOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(ctx.grad * ctx.parents[1]), Some(ctx.grad * ctx.parents[0])]
    }
}

struct DivOp;
impl BackwardOp for DivOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let b = ctx.parents[1];
        let da = ctx.grad / b;
        let db = -(ctx.grad * ctx.parents[0]) / (b * b);
        vec![Some(da), Some(db)]
    }
}

struct ScaleOp(f64);
impl BackwardOp for ScaleOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(ctx.grad * self.0)]
    }
}

struct AddScalarOp;
impl BackwardOp for AddScalarOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(ctx.grad.clone())]
    }
}

struct ReluOp;
impl BackwardOp for ReluOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let mut g = ctx.grad.clone();
        Zip::from(&mut g).and(ctx.parents[0]).for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0;
            }
        });
        vec![Some(g)]
    }
}

/// PReLU with a single shared slope: `y = max(0,x) + a * min(0,x)`.
struct PreluOp;
impl BackwardOp for PreluOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let x = ctx.parents[0];
        let a = ctx.parents[1][[0]];
        let mut gx = ctx.grad.clone();
        Zip::from(&mut gx).and(x).for_each(|g, &v| {
            if v < 0.0 {
                *g *= a;
            }
        });
        let mut ga = 0.0;
        Zip::from(ctx.grad).and(x).for_each(|&g, &v| {
            if v < 0.0 {
                ga += g * v;
            }
        });
        vec![Some(gx), Some(Arr::from_elem(IxDyn(&[1]), ga))]
    }
}

struct TanhOp;
impl BackwardOp for TanhOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let mut g = ctx.grad.clone();
        Zip::from(&mut g).and(ctx.output).for_each(|g, &y| *g *= 1.0 - y * y);
        vec![Some(g)]
    }
}

struct AbsOp;
impl BackwardOp for AbsOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let mut g = ctx.grad.clone();
        Zip::from(&mut g).and(ctx.parents[0]).for_each(|g, &x| {
            // Subgradient 0 at the kink keeps the check symmetric.
            *g *= if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
        });
        vec![Some(g)]
    }
}

struct SquareOp;
impl BackwardOp for SquareOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        vec![Some(2.0 * &(ctx.grad * ctx.parents[0]))]
    }
}

struct MeanAllOp;
impl BackwardOp for MeanAllOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let n = ctx.parents[0].len() as f64;
        let g = ctx.grad[[0]] / n;
        vec![Some(Arr::from_elem(IxDyn(ctx.parents[0].shape()), g))]
    }
}

struct SumAllOp;
impl BackwardOp for SumAllOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Arr>> {
        let g = ctx.grad[[0]];
        vec![Some(Arr::from_elem(IxDyn(ctx.parents[0].shape()), g))]
    }
}

impl Tape {
    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, vec![a, b], Box::new(AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, vec![a, b], Box::new(SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, vec![a, b], Box::new(MulOp))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let v = &self.values[a.0] / &self.values[b.0];
        self.push(v, vec![a, b], Box::new(DivOp))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = &self.values[a.0] * s;
        self.push(v, vec![a], Box::new(ScaleOp(s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = &self.values[a.0] + s;
        self.push(v, vec![a], Box::new(AddScalarOp))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, vec![a], Box::new(ReluOp))
    }

    /// Parametric ReLU with one learned slope shared across all elements.
    /// `alpha` must hold exactly one element.
    pub fn prelu(&mut self, a: Var, alpha: Var) -> Var {
        assert_eq!(self.values[alpha.0].len(), 1, "prelu: alpha must be a single shared slope");
        let s = self.values[alpha.0][[0]];
        let v = self.values[a.0].mapv(|x| if x >= 0.0 { x } else { s * x });
        self.push(v, vec![a, alpha], Box::new(PreluOp))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, vec![a], Box::new(TanhOp))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        self.push(v, vec![a], Box::new(AbsOp))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * x);
        self.push(v, vec![a], Box::new(SquareOp))
    }

    /// Mean over all elements, producing a `[1]`-shaped scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.values[a.0].mean().expect("mean_all on empty tensor");
        let v = Arr::from_elem(IxDyn(&[1]), m);
        self.push(v, vec![a], Box::new(MeanAllOp))
    }

    /// Sum over all elements, producing a `[1]`-shaped scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let v = Arr::from_elem(IxDyn(&[1]), s);
        self.push(v, vec![a], Box::new(SumAllOp))
    }

    /// Mean squared error between two same-shaped tensors (scalar node).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    /// Mean absolute error between two same-shaped tensors (scalar node).
    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.abs(d);
        self.mean_all(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(vals: &[f64]) -> Arr {
        Arr::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn add_backward_accumulates_to_both_parents() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[1.0, 2.0]));
        let b = t.leaf(arr(&[3.0, 4.0]));
        let c = t.add(a, b);
        let l = t.sum_all(c);
        t.backward(l);
        assert_eq!(t.grad(a).unwrap(), &arr(&[1.0, 1.0]));
        assert_eq!(t.grad(b).unwrap(), &arr(&[1.0, 1.0]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2.0]));
        let c = t.constant(arr(&[5.0]));
        let y = t.mul(a, c);
        let l = t.sum_all(y);
        t.backward(l);
        assert_eq!(t.grad(a).unwrap(), &arr(&[5.0]));
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // l = sum(a*a + a) => dl/da = 2a + 1
        let mut t = Tape::new();
        let a = t.leaf(arr(&[3.0]));
        let sq = t.mul(a, a);
        let s = t.add(sq, a);
        let l = t.sum_all(s);
        t.backward(l);
        assert_eq!(t.grad(a).unwrap(), &arr(&[7.0]));
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[1.0, -2.0, 3.0]));
        let b = t.constant(arr(&[1.0, -2.0, 3.0]));
        let l = t.mse(a, b);
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn prelu_matches_definition_on_both_sides() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[-2.0, 3.0]));
        let a = t.leaf(Arr::from_elem(IxDyn(&[1]), 0.25));
        let y = t.prelu(x, a);
        assert_eq!(t.value(y), &arr(&[-0.5, 3.0]));
        let l = t.sum_all(y);
        t.backward(l);
        assert_eq!(t.grad(x).unwrap(), &arr(&[0.25, 1.0]));
        // d/da = sum over negative inputs of x = -2
        assert_eq!(t.grad(a).unwrap()[[0]], -2.0);
    }
}
