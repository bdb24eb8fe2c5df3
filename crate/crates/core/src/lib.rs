//! Hyper-relational knowledge graph completion.
//!
//! Statements (a base triple plus qualifier pairs) are embedded by a two-stage
//! graph encoder: a base aggregator that folds encoded qualifiers into base
//! entity messages, and a qualifier aggregator that pushes projected base
//! triples into qualifier entities. A masked transformer decodes each
//! statement and scores every entity for the masked slot.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
