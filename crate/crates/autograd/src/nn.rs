//! Parameter storage, weight initialisation and thin layer wrappers.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`"model.encode.conv_in.weight"`).  Layers are lightweight structs that
//! remember only their parameter names and hyper-parameters; at forward time
//! they feed the current parameter values onto the tape (cached per name, so
//! repeated application shares weights).

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng;

use crate::tape::{Arr, Tape, Var};

/// Ordered, named collection of trainable tensors.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter.  Panics on duplicate names: that is always
    /// a wiring bug.
    pub fn insert(&mut self, name: &str, value: Arr) {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} registered twice"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Arr {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.values[i]
    }

    /// Replace the value of an existing parameter (shape must be preserved).
    pub fn set(&mut self, name: &str, value: Arr) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(
            self.values[i].shape(),
            value.shape(),
            "parameter {name:?} shape changed"
        );
        self.values[i] = value;
    }

    /// Parameter names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.values.iter().map(|a| a.len()).sum()
    }

    /// Number of scalars among parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Feed a parameter onto a tape (cached per tape, see [`Tape::param`]).
    pub fn feed(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, self.get(name).clone())
    }
}

/// Uniform init on `±1/sqrt(fan_in)` — the standard default for conv and
/// dense layers trained with Adam at these scales.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// 2-D convolution layer (square kernel, bias always present).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        store.insert(&format!("{name}.weight"), fan_in_uniform(rng, &[c_out, c_in, k, k], fan_in));
        store.insert(&format!("{name}.bias"), fan_in_uniform(rng, &[c_out], fan_in));
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.feed(t, &self.weight);
        let b = store.feed(t, &self.bias);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed 2-D convolution layer (square kernel, bias always present).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        // Matches the common convention: fan_in of the equivalent forward
        // convolution, i.e. per-output-channel tap count.
        let fan_in = c_in * k * k;
        store.insert(&format!("{name}.weight"), fan_in_uniform(rng, &[c_in, c_out, k, k], fan_in));
        store.insert(&format!("{name}.bias"), fan_in_uniform(rng, &[c_out], fan_in));
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.feed(t, &self.weight);
        let b = store.feed(t, &self.bias);
        t.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

/// Dense layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        store.insert(
            &format!("{name}.weight"),
            fan_in_uniform(rng, &[out_features, in_features], in_features),
        );
        store.insert(&format!("{name}.bias"), fan_in_uniform(rng, &[out_features], in_features));
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    /// All-zero initialisation: the layer outputs exactly zero until trained.
    /// Used for regression heads that must start at the identity estimate.
    pub fn init_zeroed(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        store.insert(&format!("{name}.weight"), Arr::zeros(IxDyn(&[out_features, in_features])));
        store.insert(&format!("{name}.bias"), Arr::zeros(IxDyn(&[out_features])));
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.feed(t, &self.weight);
        let b = store.feed(t, &self.bias);
        t.linear(x, w, Some(b))
    }
}

/// Parametric ReLU with a single learned slope shared over all elements.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: String,
}

impl PRelu {
    pub fn init(store: &mut ParamStore, name: &str) -> Self {
        store.insert(&format!("{name}.alpha"), Arr::from_elem(IxDyn(&[1]), 0.25));
        Self { alpha: format!("{name}.alpha") }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = store.feed(t, &self.alpha);
        t.prelu(x, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_store_counts_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let _ = Conv2d::init(&mut store, &mut rng, "net.c1", 2, 64, 3, 1, 1);
        // 64*2*3*3 + 64 = 1216
        assert_eq!(store.num_params(), 1216);
        let _ = PRelu::init(&mut store, "net.act");
        assert_eq!(store.num_params(), 1217);
        assert_eq!(store.num_params_with_prefix("net.c1."), 1216);
    }

    #[test]
    fn feeding_a_param_twice_shares_one_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, &mut rng, "m.fc", 3, 3);
        let mut t = Tape::new();
        let x = t.constant(Arr::from_shape_fn(IxDyn(&[1, 3]), |ix| ix[1] as f64));
        let y1 = lin.forward(&mut t, &store, x);
        let y2 = lin.forward(&mut t, &store, y1); // same weights applied twice
        let l = t.mean_all(y2);
        t.backward(l);
        let grads = t.param_grads();
        // One gradient entry per parameter, not per application.
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn zeroed_linear_outputs_zero() {
        let mut store = ParamStore::new();
        let lin = Linear::init_zeroed(&mut store, "head", 4, 2);
        let mut t = Tape::new();
        let x = t.constant(Arr::from_elem(IxDyn(&[3, 4]), 1.7));
        let y = lin.forward(&mut t, &store, x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }
}
