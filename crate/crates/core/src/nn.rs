//! Named parameters and the small layer vocabulary the model is built from.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Var};
use crate::data::stable_hash;
use crate::ops::conv2d;
use crate::tensor::Tensor;

/// Slope of every leaky ReLU in the model.
pub const LRELU_SLOPE: f64 = 0.1;

/// All trainable tensors of a model, keyed by hierarchical name
/// (`sr_fwd.fuse.block0.conv1.weight`). Ordered, so iteration and
/// serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(name))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    /// Uniform He-style init scaled by `gain`; each tensor draws from its
    /// own stream derived from the store seed and its name, so the values
    /// do not depend on construction order.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let mut rng = self.rng_for(name);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }
}

/// Per-forward view of a [`ParamStore`]: hands out one [`Var`] per
/// parameter so that reuse across time steps accumulates gradients.
pub struct Ctx<'a> {
    store: &'a ParamStore,
    track: bool,
    cache: RefCell<HashMap<String, Var>>,
}

impl<'a> Ctx<'a> {
    /// Inference context: parameters are constants and no graph is kept.
    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx {
            store,
            track: false,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Training context: parameters are gradient-tracked leaves.
    pub fn training(store: &'a ParamStore) -> Self {
        Ctx {
            store,
            track: true,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_training(&self) -> bool {
        self.track
    }

    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.cache.borrow().get(name) {
            return v.clone();
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.track { Var::leaf(t) } else { Var::constant(t) };
        self.cache.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Gradients for every parameter touched in this context, zeros for
    /// the rest, in store order.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let cache = self.cache.borrow();
        self.store
            .iter()
            .map(|(name, t)| {
                let g = cache
                    .get(name)
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert_uniform(&weight, &[cout, cin, k, k], cin * k * k, gain);
        store.insert(&bias, Tensor::zeros(&[cout]));
        Conv2d {
            weight,
            bias: Some(bias),
            cin,
            cout,
            k,
        }
    }

    /// A convolution whose weights start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, Tensor::zeros(&[cout, cin, k, k]));
        store.insert(&bias, Tensor::zeros(&[cout]));
        Conv2d {
            weight,
            bias: Some(bias),
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        conv2d(x, &w, b.as_ref())
    }
}

/// `x + conv2(lrelu(conv1(x)))`, without normalization.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Gain of the second conv in each residual block; small so a fresh stack
/// starts close to the identity.
const RES_GAIN: f64 = 0.1;

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1.0),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, RES_GAIN),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let y = self.conv1.forward(ctx, x).leaky_relu(LRELU_SLOPE);
        x.add(&self.conv2.forward(ctx, &y))
    }
}

/// `conv_out(blocks(lrelu(conv_in(x))))`: maps `cin` to `cout` channels
/// through `n` residual blocks at width `c`.
#[derive(Clone, Debug)]
pub struct ResStack {
    pub conv_in: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub conv_out: Conv2d,
}

impl ResStack {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, c: usize, cout: usize, n: usize) -> Self {
        Self::with_out_gain(store, name, cin, c, cout, n, 1.0)
    }

    /// As [`ResStack::new`] with the output conv scaled by `out_gain`; a
    /// small gain keeps recurrent updates from amplifying the state.
    pub fn with_out_gain(store: &mut ParamStore, name: &str, cin: usize, c: usize, cout: usize, n: usize, out_gain: f64) -> Self {
        ResStack {
            conv_in: Conv2d::new(store, &format!("{name}.conv_in"), cin, c, 3, 1.0),
            blocks: (0..n).map(|i| ResBlock::new(store, &format!("{name}.block{i}"), c)).collect(),
            conv_out: Conv2d::new(store, &format!("{name}.conv_out"), c, cout, 3, out_gain),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let mut h = self.conv_in.forward(ctx, x).leaky_relu(LRELU_SLOPE);
        for b in &self.blocks {
            h = b.forward(ctx, &h);
        }
        self.conv_out.forward(ctx, &h)
    }
}
