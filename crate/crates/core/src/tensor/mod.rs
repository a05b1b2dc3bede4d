//! Dense named tensors with an explicit storage precision, and the ordered
//! bundles that checkpoints and ensembles are made of.

mod io;

use std::collections::BTreeMap;
use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_bundle, read_bundle_file, write_bundle, write_bundle_file, BUNDLE_MAGIC, BUNDLE_VERSION};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    /// IEEE-754 binary32.
    Single,
    /// IEEE-754 binary16.
    Half,
}

impl Precision {
    pub const fn bytes_per_element(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Half => 2,
        }
    }

    pub(crate) const fn tag(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Half => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Single),
            1 => Some(Precision::Half),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => f.write_str("f32"),
            Precision::Half => f.write_str("f16"),
        }
    }
}

/// Element buffer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Single(Vec<f32>),
    Half(Vec<f16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Single(v) => v.len(),
            TensorData::Half(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            TensorData::Single(_) => Precision::Single,
            TensorData::Half(_) => Precision::Half,
        }
    }
}

/// A named dense tensor.
///
/// Equality is bitwise on the payload, so two tensors holding NaNs with the
/// same bit pattern compare equal and `0.0` differs from `-0.0`.
#[derive(Debug, Clone)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && match (&self.data, &other.data) {
                (TensorData::Single(a), TensorData::Single(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (TensorData::Half(a), TensorData::Half(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

/// Number of elements implied by a shape; rank 0 holds one element.
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Validation("tensor name must not be empty".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("tensor `{name}` has a zero dimension in {shape:?}")));
        }
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {shape:?} ({expected} elements) but {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn single(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::Single(values))
    }

    pub fn half(name: impl Into<String>, shape: Vec<usize>, values: Vec<f16>) -> Result<Self> {
        Self::new(name, shape, TensorData::Half(values))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.data.precision()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Payload size in bytes.
    pub fn size_bytes(&self) -> usize {
        self.len() * self.precision().bytes_per_element()
    }

    /// Values widened to single precision. Widening from half is exact.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::Single(v) => v.clone(),
            TensorData::Half(v) => v.iter().map(|h| h.to_f32()).collect(),
        }
    }

    pub fn as_f32_slice(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::Single(v) => Some(v),
            TensorData::Half(_) => None,
        }
    }

    #[cfg(test)]
    pub(crate) fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Result of [`cast_precision`].
#[derive(Debug, Clone, PartialEq)]
pub struct CastOutcome {
    pub tensor: Tensor,
    /// Finite inputs that became infinite.
    pub overflows: usize,
}

/// Converts a tensor to `target` precision with round-to-nearest-even.
///
/// Down-casting keeps subnormals and sends finite values beyond the half
/// range to ±∞; those are counted in [`CastOutcome::overflows`]. Widening is
/// exact and casting to the current precision is the identity.
pub fn cast_precision(t: &Tensor, target: Precision) -> CastOutcome {
    let (data, overflows) = match (&t.data, target) {
        (TensorData::Single(v), Precision::Half) => {
            let mut overflows = 0;
            let out = v
                .iter()
                .map(|&x| {
                    let h = f16::from_f32(x);
                    if x.is_finite() && h.is_infinite() {
                        overflows += 1;
                    }
                    h
                })
                .collect();
            (TensorData::Half(out), overflows)
        }
        (TensorData::Half(v), Precision::Single) => {
            (TensorData::Single(v.iter().map(|h| h.to_f32()).collect()), 0)
        }
        (data, _) => (data.clone(), 0),
    };
    CastOutcome {
        tensor: Tensor { name: t.name.clone(), shape: t.shape.clone(), data },
        overflows,
    }
}

/// Ordered collection of uniquely named tensors plus string metadata.
///
/// Iteration is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; a second tensor with the same name is rejected.
    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(tensor.name()) {
            return Err(Error::Validation(format!("duplicate tensor name `{}`", tensor.name())));
        }
        self.entries.insert(tensor.name().to_owned(), tensor);
        Ok(())
    }

    /// Adds or replaces a tensor.
    pub fn replace(&mut self, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(tensor.name().to_owned(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
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

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn take_metadata(&mut self) -> BTreeMap<String, String> {
        std::mem::take(&mut self.metadata)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}

/// Payload bytes of every tensor in the bundle. Header and metadata bytes
/// are not counted.
pub fn bundle_size_bytes(b: &TensorBundle) -> u64 {
    b.tensors().map(|t| t.size_bytes() as u64).sum()
}
