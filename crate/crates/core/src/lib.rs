//! Desk-scale Gated NetVLAD video classification under a hard model-size budget.
//!
//! The crate covers the whole workflow: a synthetic frame-level dataset
//! ([`datagen`]), the Gated NetVLAD model with analytic gradients
//! ([`model`]), multi-label training with checkpoint averaging
//! ([`training`]), GAP@k evaluation ([`metrics`]), half-precision
//! compression and byte-exact size accounting ([`sizing`]), and
//! coefficient-weighted ensembling under a size budget ([`ensemble`]).
//! Everything is stored through the `.tb` tensor bundle format in
//! [`tensor`].

pub mod datagen;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sizing;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
