use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::Statement;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub statements: usize,
    /// Distinct entities used anywhere in the statements.
    pub entities: usize,
    /// Distinct relations used as base or qualifier relation.
    pub relations: usize,
    pub qualifier_fraction: f64,
    /// Statement arity (entities per fact) to statement count.
    pub arity_histogram: BTreeMap<usize, usize>,
    pub max_qualifiers: usize,
}

pub fn dataset_stats<'a>(statements: impl IntoIterator<Item = &'a Statement>) -> DatasetStats {
    let mut entities = BTreeSet::new();
    let mut relations = BTreeSet::new();
    let mut arity_histogram = BTreeMap::new();
    let (mut count, mut qualified, mut max_qualifiers) = (0, 0, 0);
    for s in statements {
        count += 1;
        entities.extend(s.entities());
        relations.extend(s.relations());
        *arity_histogram.entry(s.arity()).or_insert(0) += 1;
        if !s.qualifiers.is_empty() {
            qualified += 1;
        }
        max_qualifiers = max_qualifiers.max(s.qualifiers.len());
    }
    DatasetStats {
        statements: count,
        entities: entities.len(),
        relations: relations.len(),
        qualifier_fraction: if count == 0 {
            0.0
        } else {
            qualified as f64 / count as f64
        },
        arity_histogram,
        max_qualifiers,
    }
}
