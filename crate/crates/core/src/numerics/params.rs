use std::collections::HashMap;

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

/// One learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

/// Named, ordered collection of learnable tensors.
///
/// Order is insertion order; it fixes the initialization sequence and the
/// serialization layout.
#[derive(Debug, Clone)]
pub struct ParameterSet<T = f32> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    grads_ready: bool,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PartialEq for ParameterSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
            grads_ready: false,
        }
    }

    /// Adds a tensor and returns its index. Re-inserting a name is a usage error.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter {name}")));
        }
        let (r, c) = value.shape();
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(Parameter {
            name,
            value,
            grad: Matrix::zeros(r, c),
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn value(&self, idx: usize) -> &Matrix<T> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Matrix<T> {
        &mut self.entries[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.value.cast()).unwrap();
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.as_mut_slice().fill(T::zero());
        }
        self.grads_ready = false;
    }

    /// Adds `scale * grads` into the stored gradients and marks them fresh.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (idx, g) in &grads.entries {
            let target = &mut self.entries[*idx].grad;
            match g {
                GradValue::Dense(m) => target.add_scaled(m, scale),
                GradValue::Rows(rows) => {
                    for (r, values) in rows {
                        for (t, &v) in target.row_mut(*r).iter_mut().zip(values) {
                            *t = *t + v * scale;
                        }
                    }
                }
            }
        }
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn consume_grads(&mut self) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::Usage(
                "stale gradients: optimizer step without a preceding backward pass".into(),
            ));
        }
        self.grads_ready = false;
        Ok(())
    }
}

/// Gradient contribution for one parameter.
#[derive(Debug, Clone)]
pub enum GradValue<T> {
    Dense(Matrix<T>),
    /// Sparse row updates, used for embedding lookups.
    Rows(Vec<(usize, Vec<T>)>),
}

/// Gradients of one loss with respect to the parameters it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub(crate) entries: Vec<(usize, GradValue<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Dense gradient for parameter `idx`, or zeros of `shape` if untouched.
    pub fn dense(&self, idx: usize, shape: (usize, usize)) -> Matrix<T> {
        let mut out = Matrix::zeros(shape.0, shape.1);
        for (i, g) in &self.entries {
            if *i != idx {
                continue;
            }
            match g {
                GradValue::Dense(m) => out.add_assign(m),
                GradValue::Rows(rows) => {
                    for (r, values) in rows {
                        for (t, &v) in out.row_mut(*r).iter_mut().zip(values) {
                            *t = *t + v;
                        }
                    }
                }
            }
        }
        out
    }
}
