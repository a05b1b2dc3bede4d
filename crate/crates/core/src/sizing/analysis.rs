//! Closed-form storage rates for pruning masks and low-bit quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the surviving entries of a pruned tensor are located.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SparseScheme {
    /// Each nonzero stores `indices_per_nonzero` indices of `index_bits` each.
    Coordinate { index_bits: u32, indices_per_nonzero: u32 },
    /// Every entry carries a flag of `bits_per_flag` bits.
    Bitmask { bits_per_flag: u32 },
}

/// `1 - stored_bits / dense_bits`. Negative when the index overhead exceeds
/// the savings.
pub fn sparse_compression_rate(param_count: u64, sparsity: f64, value_bits: u32, scheme: SparseScheme) -> f64 {
    let n = param_count as f64;
    let kept = (1.0 - sparsity) * n;
    let vb = value_bits as f64;
    let stored = match scheme {
        SparseScheme::Coordinate { index_bits, indices_per_nonzero } => {
            kept * (vb + indices_per_nonzero as f64 * index_bits as f64)
        }
        SparseScheme::Bitmask { bits_per_flag } => kept * vb + n * bits_per_flag as f64,
    };
    1.0 - stored / (n * vb)
}

/// `1 - to / from`, ignoring codebook overhead.
pub fn quantization_rate(from_bits: u32, to_bits: u32) -> Result<f64> {
    if to_bits == 0 || to_bits >= from_bits {
        return Err(Error::Validation(format!("cannot quantize {from_bits}-bit values to {to_bits} bits")));
    }
    Ok(1.0 - to_bits as f64 / from_bits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const COO: SparseScheme = SparseScheme::Coordinate { index_bits: 32, indices_per_nonzero: 2 };

    #[test]
    fn coordinate_examples() {
        assert_eq!(sparse_compression_rate(1024 * 100_000, 0.75, 32, COO), 0.25);
        assert_eq!(sparse_compression_rate(1000, 0.0, 32, COO), -2.0);
    }

    #[test]
    fn byte_mask() {
        assert_eq!(sparse_compression_rate(4096, 0.75, 32, SparseScheme::Bitmask { bits_per_flag: 8 }), 0.5);
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantization_rate(32, 8).unwrap(), 0.75);
        assert_eq!(quantization_rate(32, 16).unwrap(), 0.5);
        assert_eq!(quantization_rate(32, 4).unwrap(), 0.875);
        assert!(quantization_rate(8, 8).is_err());
        assert!(quantization_rate(8, 16).is_err());
    }

    proptest! {
        #[test]
        fn coordinate_rate_monotone(s in 0.0f64..0.99, ds in 0.001f64..0.01, ipn in 1u32..4) {
            let at = |s: f64, ipn| sparse_compression_rate(10_000, s, 32, SparseScheme::Coordinate { index_bits: 32, indices_per_nonzero: ipn });
            prop_assert!(at(s, ipn + 1) < at(s, ipn));
            prop_assert!(at(s + ds, ipn) > at(s, ipn));
        }
    }
}
