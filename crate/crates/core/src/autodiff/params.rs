use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense row-major matrix; vectors are `rows x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// Named parameter tensors. Names are `model.layer.kind`, so a prefix selects
/// one model's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Overwrites values from `(name, tensor)` pairs, checking every shape.
    pub fn load<'a>(&mut self, items: impl IntoIterator<Item = (&'a str, Tensor<F>)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in items {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let cur = &mut self.tensors[id.0];
            if cur.shape() != t.shape() || t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    cur.shape(),
                    t.shape()
                )));
            }
            *cur = t;
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {seen}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Gradient accumulators with the same layout as a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub(crate) grads: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Gradients {
            grads: store.tensors.iter().map(|t| vec![F::zero(); t.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn norm_sq(&self, ids: impl IntoIterator<Item = ParamId>) -> F {
        ids.into_iter()
            .map(|id| self.grads[id.0].iter().map(|&g| g * g).sum::<F>())
            .sum()
    }
}
