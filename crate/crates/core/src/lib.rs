//! Laboratory for non-contrastive self-supervised learning on synthetic
//! patch data.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod net;
pub mod population;
pub mod rng;
pub mod tpm;

pub use error::{Error, Result};
