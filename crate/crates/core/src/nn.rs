//! Named parameters, deterministic initialization, and the binding that
//! places parameters on a [`Tape`] for one forward pass.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// He-normal over fan-in, for weights feeding a GELU/ReLU.
    He,
    /// Normal with std `1/sqrt(fan_in)`.
    Lecun,
    Zeros,
}

/// FNV-1a, stable across platforms and releases.
struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
}

/// Seed derived from a base seed and a name; independent of call order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    seed.hash(&mut h);
    name.hash(&mut h);
    h.finish()
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter initialized from a seed derived from `(seed, name)`,
    /// so a parameter's initial value never depends on which other
    /// parameters exist.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun => (1.0 / fan_in as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let n: usize = shape.iter().product();
        let data = if std == 0.0 { vec![0.0; n] } else { (0..n).map(|_| std * standard_normal(&mut rng)).collect() };
        self.params.insert(name.to_string(), Tensor::from_vec(shape, data).expect("init shape"));
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| prefix.map_or(true, |p| k.starts_with(p)))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Keeps only parameters whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    /// Per-name shapes, for structural comparisons.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }
}

/// A forward-pass context: a tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// `trainable` controls whether parameter leaves require gradients.
    pub fn new(params: &'a ParamStore, trainable: bool) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new(), trainable }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`")).clone();
        let v = self.tape.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Conv layer `name` with weights `name.w` and optional bias `name.b`.
    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.params.contains(&bname).then(|| self.param(&bname));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.param(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.params.contains(&bname).then(|| self.param(&bname));
        self.tape.linear(x, w, b)
    }

    /// Gradients of every bound parameter; parameters untouched by the
    /// graph get zero gradients.
    pub fn param_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Registers conv weights `[out, in, k, k]` and a zero bias.
pub fn add_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, seed: u64) {
    store.init(&format!("{name}.w"), &[cout, cin, k, k], Init::He, seed);
    store.init(&format!("{name}.b"), &[cout], Init::Zeros, seed);
}

pub fn add_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, init: Init, seed: u64) {
    store.init(&format!("{name}.w"), &[dout, din], init, seed);
    store.init(&format!("{name}.b"), &[dout], Init::Zeros, seed);
}
