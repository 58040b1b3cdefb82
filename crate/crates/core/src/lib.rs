//! Next-search-term recommendation from EHR encounter codes and clinician
//! search logs, by factorizing a time-decayed code/term co-occurrence matrix.

pub mod cooccurrence;
pub mod data_model;
pub mod evaluation;
pub mod error;
pub mod factorization;
pub mod ingestion;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod recommenders;
pub mod sessionization;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
