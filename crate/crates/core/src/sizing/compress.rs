use serde::{Deserialize, Serialize};

use super::MB;
use crate::error::{Error, Result};
use crate::model::BIG4;
use crate::tensor::{bundle_size_bytes, cast_precision, Precision, TensorBundle};

/// Which tensors to store in half precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Names(Vec<String>),
    /// The `n` largest tensors by byte size, name order breaking ties.
    TopBySize(usize),
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Names(BIG4.iter().map(|s| (*s).to_owned()).collect())
    }
}

impl Selection {
    pub fn resolve(&self, bundle: &TensorBundle) -> Result<Vec<String>> {
        match self {
            Selection::Names(names) => {
                for n in names {
                    if !bundle.contains(n) {
                        return Err(Error::Selection(format!("no tensor named `{n}`")));
                    }
                }
                Ok(names.clone())
            }
            Selection::TopBySize(n) => {
                let mut all: Vec<_> = bundle.tensors().map(|t| (t.size_bytes(), t.name())).collect();
                all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
                Ok(all.into_iter().take(*n).map(|(_, name)| name.to_owned()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub original_mb: f64,
    pub compressed_mb: f64,
    pub rate: f64,
    pub cast_tensor_names: Vec<String>,
    /// Finite values that became infinite when cast.
    pub overflow_count: u64,
}

/// Casts the selected tensors to half precision and leaves the rest alone.
/// With `strict`, any overflow is an error instead of a reported count.
pub fn float16_compress(bundle: &TensorBundle, selection: &Selection, strict: bool) -> Result<(TensorBundle, CompressionReport)> {
    let names = selection.resolve(bundle)?;
    let mut out = bundle.clone();
    let mut overflow_count = 0u64;
    for name in &names {
        let t = bundle.get(name).expect("selection resolved against this bundle");
        let cast = cast_precision(t, Precision::Half);
        overflow_count += cast.overflows as u64;
        out.replace(cast.tensor);
    }
    if strict && overflow_count > 0 {
        return Err(Error::Overflow { count: overflow_count as usize });
    }
    let original_bytes = bundle_size_bytes(bundle);
    let compressed_bytes = bundle_size_bytes(&out);
    let rate = if original_bytes == 0 { 0.0 } else { 1.0 - compressed_bytes as f64 / original_bytes as f64 };
    let report = CompressionReport {
        original_bytes,
        compressed_bytes,
        original_mb: original_bytes as f64 / MB,
        compressed_mb: compressed_bytes as f64 / MB,
        rate,
        cast_tensor_names: names,
        overflow_count,
    };
    Ok((out, report))
}
