//! Statements, vocabularies, dataset files and synthetic graphs.

mod dataset;
mod io;
mod statement;
mod stats;
mod synthetic;
mod vocab;

pub use dataset::{Dataset, Split, SPLIT_FILES};
pub use io::{
    add_inverses, format_statement, inverse_statement, parse_statements, parse_statements_str,
    write_statements,
};
pub use statement::{EntityId, Qualifier, RelationId, Statement};
pub use stats::{dataset_stats, DatasetStats};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{Vocab, VocabBuilder, ENTITY_FILE, RELATION_FILE};
