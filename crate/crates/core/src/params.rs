//! Named trainable parameters and their binding onto a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Regularization class of a parameter: feature-weighting masks get L1,
/// everything else gets L2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureWeighting,
    Architecture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry { name, group, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Record every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.param(e.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Record every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Read the gradient of every parameter back from a tape after `backward`.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        bound
            .vars
            .iter()
            .zip(&self.entries)
            .map(|(&v, e)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); e.value.len()])
            })
            .collect()
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::dim(format!(
                "parameter count {} differs from {}",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::dim(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Copy every parameter whose name and shape also exist in `other`; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for dst in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|s| s.name == dst.name) {
                if src.value.shape() == dst.value.shape() {
                    dst.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Seeded parameter initializer.
///
/// Each tensor draws from its own stream keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which other parameters the
/// model happens to contain.
#[derive(Debug, Clone, Copy)]
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a, stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h.rotate_left(17))
    }

    /// Entries i.i.d. `U(-half_width, +half_width)`.
    pub fn uniform<T: Scalar>(&self, name: &str, shape: &[usize], half_width: f64) -> Result<Tensor<T>> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::config(format!(
                "uniform init half-width must be positive, got {half_width}"
            )));
        }
        let mut rng = self.rng_for(name);
        let dist = Uniform::new_inclusive(-half_width, half_width);
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::from_f64(shape, &values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ParamGroup::Architecture, Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", ParamGroup::Architecture, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn init_streams_are_keyed_by_name() {
        let init = Initializer::new(3);
        let a: Tensor<f64> = init.uniform("x", &[8], 0.5).unwrap();
        let b: Tensor<f64> = init.uniform("x", &[8], 0.5).unwrap();
        let c: Tensor<f64> = init.uniform("y", &[8], 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        assert!(init.uniform::<f64>("x", &[2], 0.0).is_err());
    }
}
