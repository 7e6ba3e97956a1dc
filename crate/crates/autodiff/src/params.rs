use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::matrix::Matrix;
use crate::tape::{Gradients, Tape, Var};
use crate::Result;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub value: Matrix,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

/// Tape handles for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-parameter gradients; `None` for frozen entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }

    /// Euclidean norm over all trainable gradients.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|m| m.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for m in self.grads.iter_mut().flatten() {
            for x in m.data_mut() {
                *x *= factor;
            }
        }
    }

    /// First offending parameter name, if any gradient is non-finite.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.grads
            .iter()
            .zip(store.names())
            .find(|(g, _)| g.as_ref().is_some_and(|m| !m.all_finite()))
            .map(|(_, n)| n)
    }
}

fn shape_to_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Rank-1 shapes are stored as a single row.
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ParamSize {
                name: name.to_string(),
                expected,
                got: data.len(),
            });
        }
        let (r, c) = shape_to_matrix(shape);
        let (idx, _) = self.entries.insert_full(
            name.to_string(),
            ParamEntry {
                shape: shape.to_vec(),
                trainable,
                value: Matrix::new(r, c, data),
            },
        );
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
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

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let (name, entry) = self.entries.get_index_mut(id.0).expect("param id from this store");
        if entry.value.len() != data.len() {
            return Err(AutodiffError::ParamSize {
                name: name.clone(),
                expected: entry.value.len(),
                got: data.len(),
            });
        }
        entry.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total number of scalar values, trainable or not.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.entries.values().map(|e| tape.leaf(e.value.clone())).collect(),
        }
    }

    /// Collects parameter adjoints from a backward pass. Parameters that did
    /// not influence the output receive zero gradients.
    pub fn gradients(&self, binding: &Binding, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .entries
                .values()
                .zip(binding.vars())
                .map(|(e, &v)| {
                    e.trainable.then(|| {
                        grads
                            .wrt(v)
                            .cloned()
                            .unwrap_or_else(|| Matrix::zeros(e.value.rows(), e.value.cols()))
                    })
                })
                .collect(),
        }
    }

    /// All trainable values concatenated in store order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(AutodiffError::ParamSize {
                name: "<flat>".into(),
                expected: self.trainable_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Gradients flattened in the same order as [`ParamStore::flat_trainable`].
    pub fn flat_gradients(&self, grads: &ParamGrads) -> Vec<f64> {
        grads.grads.iter().flatten().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.all_finite())
    }
}
