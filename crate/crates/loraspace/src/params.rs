//! Named parameter store shared by every learned component.
//!
//! Parameters are addressed by fully-qualified names (`denoiser.block0.self.wq`,
//! `hypernet.id.latents`, ...) which double as archive keys. Iteration order is
//! always name order, so hashing, serialization, and optimizer traversal are
//! deterministic.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Array, Graph, Node, Scalar};

pub type GradMap<T> = BTreeMap<String, Array<T>>;

#[derive(Clone, Debug, Default)]
pub struct Params<T: Scalar> {
    entries: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.entries.get(name).ok_or_else(|| Error::MissingParameter {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter {
                name: name.to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params<T>) {
        self.entries.extend(other.entries);
    }

    /// SHA-256 over names, shapes, and little-endian element bytes of the
    /// parameters selected by `pred`. Used for freeze contracts.
    pub fn hash_subset(&self, pred: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            if !pred(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in value.data() {
                hasher.update(x.as_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn hash_all(&self) -> [u8; 32] {
        self.hash_subset(|_| true)
    }
}

impl<T: Scalar> FromIterator<(String, Array<T>)> for Params<T> {
    fn from_iter<I: IntoIterator<Item = (String, Array<T>)>>(iter: I) -> Self {
        Params {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Parameters bound into a graph as leaves, addressable by name.
pub struct Binding {
    map: BTreeMap<String, Node>,
}

impl Binding {
    /// Bind every parameter; `trainable` decides which leaves track gradients.
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        params: &Params<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut map = BTreeMap::new();
        for (name, value) in params.iter() {
            let node = g.leaf(value.clone(), trainable(name));
            map.insert(name.to_string(), node);
        }
        Binding { map }
    }

    pub fn node(&self, name: &str) -> Node {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_node(&self, name: &str) -> Result<Node> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter {
                name: name.to_string(),
            })
    }

    /// Collect gradients for every bound parameter that received one.
    pub fn collect_grads<T: Scalar>(
        &self,
        g: &Graph<T>,
        grads: &mut crate::numerics::Grads<T>,
    ) -> GradMap<T> {
        let _ = g;
        let mut out = GradMap::new();
        for (name, node) in &self.map {
            if let Some(grad) = grads.take(*node) {
                out.insert(name.clone(), grad);
            }
        }
        out
    }
}

/// `acc += delta`, inserting zeros-shaped entries as needed.
pub fn grad_map_add<T: Scalar>(acc: &mut GradMap<T>, delta: &GradMap<T>) {
    for (name, g) in delta {
        match acc.get_mut(name) {
            Some(existing) => existing.axpy(T::one(), g).expect("gradient shapes agree"),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

pub fn grad_map_scale<T: Scalar>(map: &mut GradMap<T>, c: T) {
    for g in map.values_mut() {
        *g = g.scale(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_detects_single_element_change() {
        let mut p: Params<f32> = Params::new();
        p.insert("a.w", Array::filled(vec![2, 2], 1.0));
        p.insert("b.w", Array::filled(vec![3], 0.5));
        let h0 = p.hash_all();
        p.get_mut("a.w").unwrap().data_mut()[3] = 1.0 + 1e-6;
        assert_ne!(h0, p.hash_all());
    }

    #[test]
    fn hash_subset_ignores_other_params() {
        let mut p: Params<f32> = Params::new();
        p.insert("a.w", Array::filled(vec![2], 1.0));
        p.insert("b.w", Array::filled(vec![2], 2.0));
        let h0 = p.hash_subset(|n| n.starts_with("a."));
        p.get_mut("b.w").unwrap().data_mut()[0] = -5.0;
        assert_eq!(h0, p.hash_subset(|n| n.starts_with("a.")));
    }
}
