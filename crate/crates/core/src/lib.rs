//! Spatio-temporal crash graphs and graph neural network classifiers for
//! binary injury-severity prediction.
//!
//! The pipeline runs: [`records`] (ingest, balance) → [`features`] (time
//! encodings, narrative embeddings) → [`graph`] (fine per-crash graph or
//! coarse hexagon-cell graph, via [`geo`]) → [`models`] trained by
//! [`training`] on the [`autodiff`] tape → [`eval`] metrics. [`synth`]
//! produces seeded synthetic records with planted signal.

pub mod autodiff;
pub mod codec;
pub mod error;
pub mod eval;
pub mod features;
pub mod geo;
pub mod graph;
pub mod models;
pub mod par;
pub mod records;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
