use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` contains non-finite values")]
    NonFinite(String),
}

/// Ordered collection of named arrays.
///
/// Insertion order is preserved so that serialization and optimizer state
/// line up across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Check that every array is finite and shaped as in `reference`.
    pub fn check_against(&self, reference: &ParamStore) -> Result<(), ParamError> {
        for (name, t) in reference.iter() {
            let found = self.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(ParamError::Shape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        for (name, t) in self.iter() {
            if reference.get(name).is_none() {
                return Err(ParamError::Unknown(name.to_string()));
            }
            if !t.is_finite() {
                return Err(ParamError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    /// Put every array on the graph, as gradient leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a registered [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"));
        self.vars[*i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store order, zeros where unreachable.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
            .collect()
    }
}

/// He-uniform weights for a layer with `fan_in` inputs.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

pub fn gaussian(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    )
}
