//! Named parameter arrays and their gradients.
//!
//! Parameter names are dotted paths whose first segment is the component
//! namespace (`encoder.`, `adapter.`, `decoder.`, `aed_decoder.`). Freeze
//! accounting in the trainer works entirely on these prefixes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.arrays.get_mut(name)
    }

    pub fn get_key_value(&self, name: &str) -> Option<(&String, &Mat)> {
        self.arrays.get_key_value(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.arrays.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count across all arrays.
    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Mat::len).sum()
    }

    /// Scalar count restricted to names accepted by `filter`.
    pub fn scalar_count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.arrays
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Copies every array whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts or replaces every array from `other`.
    pub fn extend(&mut self, other: ParamStore) {
        self.arrays.extend(other.arrays);
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Mat::is_finite)
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &Mat) {
        match self.grads.get_mut(name) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(name.to_owned(), grad.clone());
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.grads {
            match self.grads.get_mut(&k) {
                Some(g) => g.add_assign(&v),
                None => {
                    self.grads.insert(k, v);
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.grads.iter()
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.grads.keys().map(String::as_str).collect()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Weight init scaled by fan-in, the usual choice for pre-norm stacks.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Mat::randn(d_in, d_out, std, rng));
    store.insert(format!("{prefix}.bias"), Mat::zeros(1, d_out));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Mat::filled(1, dim, 1.0));
    store.insert(format!("{prefix}.beta"), Mat::zeros(1, dim));
}
