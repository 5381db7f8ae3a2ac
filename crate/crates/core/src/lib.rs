//! Localized in-context inference for imbalanced regression.

pub mod analysis;
pub mod bench;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod icl;
pub mod par;
pub mod plot;
pub mod predict;
pub mod resample;
pub mod retrieval;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
