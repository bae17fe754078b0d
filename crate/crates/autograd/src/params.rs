use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{AutogradError, Result};
use crate::rng::named_stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors, ordered by canonical name.
///
/// Every tensor is initialized from its own rng stream keyed by
/// `(seed, name)`, so adding or removing a module never perturbs the
/// initial values of the others.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Gaussian init with the given standard deviation.
    pub fn init_normal(&mut self, seed: u64, name: &str, rows: usize, cols: usize, std: f64) {
        let mut rng: ChaCha8Rng = named_stream(seed, name);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64_lossy(z * std)
            })
            .collect();
        self.insert(name, Tensor::new(rows, cols, data).expect("sized buffer"));
    }

    /// Weight of a dense `fan_in -> fan_out` layer, scaled by `1/sqrt(fan_in)`.
    pub fn init_linear(&mut self, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
        self.init_normal(seed, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn init_full(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::full(rows, cols, T::from_f64_lossy(value)));
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `g` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, g: &Tensor<T>) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore<T>) {
        for (k, g) in other.iter() {
            self.accumulate(k, g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// L2 norm of all gradients whose names start with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, g)| g.sq_norm().to_f64_lossy())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_insertion_order() {
        let mut a = ParamStore::<f32>::new();
        a.init_linear(3, "x.w", 4, 5);
        a.init_linear(3, "y.w", 4, 5);
        let mut b = ParamStore::<f32>::new();
        b.init_linear(3, "y.w", 4, 5);
        b.init_linear(3, "z.w", 2, 2);
        b.init_linear(3, "x.w", 4, 5);
        assert_eq!(a.get("x.w").unwrap(), b.get("x.w").unwrap());
        assert_eq!(a.get("y.w").unwrap(), b.get("y.w").unwrap());
        assert_ne!(a.get("x.w").unwrap(), a.get("y.w").unwrap());
    }

    #[test]
    fn unknown_names_are_errors() {
        let s = ParamStore::<f64>::new();
        assert!(matches!(s.get("nope"), Err(AutogradError::UnknownParam(_))));
    }
}
