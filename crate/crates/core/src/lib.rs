//! Self-supervised log template extraction.
//!
//! A small transformer encoder is trained to predict a masked token of each
//! log message from its `CLS` summary. At parse time every token is masked in
//! turn; tokens the model ranks within its top-ε predictions are kept as
//! constant template text, the rest become `⟨*⟩` variables. The same
//! `CLS` embedding feeds the anomaly-detection studies in [`anomaly`].
//!
//! Pipeline: [`ingest`] → [`tokenizer`] → [`sampler`] → [`model`] (built on
//! [`numerics`]) → [`extraction`] → [`evaluation`], with [`persistence`] for
//! model archives.

pub mod anomaly;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod sampler;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};
