//! Named trainable parameters with gradient slots.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// A tagged collection of parameters. The tag routes gradients from a
/// [`Tape`](crate::autodiff::Tape) back to the right store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tag: String,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = tag.into();
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Panics if `name` is absent; parameter names are fixed at construction.
    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).expect("unknown parameter").value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries[name].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("no parameter {name} in {}", self.tag)))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name}: {:?} vs {:?}",
                p.grad.shape(),
                grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_squared_norm(&self) -> f64 {
        self.entries.values().map(|p| p.grad.squared_norm()).sum()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Overwrites every value with the matching entry of `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Shape(format!("source lacks {name}")))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("copy of {name}")));
            }
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Weight `[fan_in, fan_out]` uniform in ±1/√fan_in, bias zero.
    pub fn init_affine(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) {
        self.insert(
            format!("{prefix}.w"),
            uniform(&[fan_in, fan_out], fan_in, rng),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Global-norm gradient clipping over several stores. Returns the norm
/// before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores
        .iter()
        .map(|s| s.grad_squared_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for store in stores.iter_mut() {
            store.scale_grads(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grads_is_idempotent() {
        let mut s = ParamStore::new("t");
        s.insert("a", Tensor::vector(vec![1.0, 2.0]));
        s.accumulate_grad("a", &Tensor::vector(vec![3.0, -1.0])).unwrap();
        s.zero_grads();
        s.zero_grads();
        assert!(s.grad("a").data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let mut a = ParamStore::new("t");
        let mut b = ParamStore::new("t");
        a.init_affine("fc", 16, 4, &mut ChaCha8Rng::seed_from_u64(5));
        b.init_affine("fc", 16, 4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.value("fc.w").data().iter().all(|v| v.abs() <= 0.25));
        assert!(a.value("fc.b").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = ParamStore::new("t");
        s.insert("a", Tensor::vector(vec![0.0; 2]));
        s.accumulate_grad("a", &Tensor::vector(vec![30.0, 40.0])).unwrap();
        let before = clip_grad_norm(&mut [&mut s], 10.0);
        assert_eq!(before, 50.0);
        assert!((s.grad_squared_norm().sqrt() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatched_grad_is_rejected() {
        let mut s = ParamStore::new("t");
        s.insert("a", Tensor::vector(vec![0.0; 2]));
        assert!(s.accumulate_grad("a", &Tensor::vector(vec![1.0])).is_err());
    }
}
