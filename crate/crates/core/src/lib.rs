//! Time-guided high-order attention for irregular, multimodal visit
//! sequences.
//!
//! The pipeline: diagnosis embeddings and per-indicator 1-D CNN features
//! ([`features`]) are scored by three attention units driven by a
//! time-decayed memory query ([`attention`]), pooled into an LSTM over visits
//! and classified ([`sequence`]). [`trainer`] fits the model with RMSProp and
//! computes the evaluation metrics; [`data`] loads, validates, generates and
//! batches patient records. Gradients come from the tape in [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod features;
pub mod params;
pub mod sequence;
pub mod trainer;

pub use error::{Error, Result};
