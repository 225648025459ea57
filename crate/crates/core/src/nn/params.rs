use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Location of one named parameter buffer inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    #[inline]
    pub fn slice<'a, T>(&self, all: &'a [T]) -> &'a [T] {
        &all[self.range()]
    }

    #[inline]
    pub fn slice_mut<'a, T>(&self, all: &'a mut [T]) -> &'a mut [T] {
        &mut all[self.range()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub id: ParamId,
    pub shape: Vec<usize>,
}

/// All trainable values of a network in one flat buffer, addressed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub data: Vec<T>,
    pub entries: Vec<ParamEntry>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Flat indices of every buffer whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .flat_map(|e| e.id.range())
            .collect()
    }

    pub fn fill_prefix(&mut self, prefix: &str, v: T) {
        for i in self.indices_with_prefix(prefix) {
            self.data[i] = v;
        }
    }

    /// Copies buffers from `named`, matching by name and length.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a [T])>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, values) in named {
            let pos = self
                .entries
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name:?}")))?;
            let id = self.entries[pos].id;
            if values.len() != id.len {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: expected {} values, got {}",
                    id.len,
                    values.len()
                )));
            }
            self.data[id.range()].copy_from_slice(values);
            seen[pos] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("missing parameter {:?}", self.entries[i].name)));
        }
        Ok(())
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / fan_in)` scaled by `gain`.
    HeUniform { fan_in: usize, gain: f64 },
}

/// Allocates parameters in declaration order.
pub struct ParamBuilder<'r, T, R: Rng> {
    set: ParamSet<T>,
    prefix: Vec<String>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { set: ParamSet { data: Vec::new(), entries: Vec::new() }, prefix: Vec::new(), rng }
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let len: usize = shape.iter().product();
        let id = ParamId { offset: self.set.data.len(), len };
        match init {
            Init::Zeros => self.set.data.extend(std::iter::repeat(T::zero()).take(len)),
            Init::HeUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                for _ in 0..len {
                    let v: f64 = self.rng.gen_range(-bound..=bound);
                    self.set.data.push(T::from_f64c(v));
                }
            }
        }
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.set.entries.push(ParamEntry { name: full, id, shape: shape.to_vec() });
        id
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}
