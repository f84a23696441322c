//! Named parameter tensors shared by the encoders, optimizer and checkpoints.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

/// Parameters placed on a [`Graph`] for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn normal(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut Rng) {
        let dist = Normal::new(0.0, std).expect("std must be positive");
        let data = Array2::from_shape_simple_fn(shape, || dist.sample(rng));
        self.insert(name, data);
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Array2::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Array2::ones(shape));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Places every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Gradient of every bound tensor, zero where no path reached it.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|var| grads.get(*var))
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(v.raw_dim()));
                (k.clone(), g)
            })
            .collect()
    }

    /// `self ← μ·self + (1−μ)·other`
    pub fn blend_from(&mut self, other: &ParamSet, momentum: f64) {
        for (k, t) in self.tensors.iter_mut() {
            let o = other.get(k);
            ndarray::Zip::from(t)
                .and(o)
                .for_each(|a, &b| *a = momentum * *a + (1.0 - momentum) * b);
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let o = other.get(k);
                t.iter()
                    .zip(o.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let o = other.get(k);
                t.iter().zip(o.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
