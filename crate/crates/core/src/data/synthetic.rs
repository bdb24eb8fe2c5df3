//! Seeded generator for small hyper-relational graphs in which part of the
//! answer structure is reachable only through qualifiers.
//!
//! Every person `p` owns an alias `a_p` and a set of attribute values. Alias
//! and person never share a base triple: the link between them is the
//! qualifier `(underPseudonym, a_p)` on `p`'s authorship statements. Each
//! attribute fact `(p, attr_k, x)` is mirrored by `(a_p, attr_k, x)`, so
//! alias queries are answerable by carrying person context into the alias
//! through the qualifier link. Context qualifiers name works the person
//! wrote, so predicting them from an alias statement also needs that link.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, Qualifier, Statement, VocabBuilder};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub relations: usize,
    pub statements: usize,
    /// Probability that a statement carries qualifiers.
    pub qualifier_fraction: f64,
    pub max_qualifiers: usize,
    pub values_per_attribute: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 50,
            relations: 10,
            statements: 400,
            qualifier_fraction: 1.0,
            max_qualifiers: 2,
            values_per_attribute: 3,
        }
    }
}

struct Layout {
    persons: Vec<EntityId>,
    aliases: Vec<EntityId>,
    works: Vec<EntityId>,
    values: Vec<EntityId>,
    author_of: usize,
    under_pseudonym: usize,
    context: usize,
    attributes: Vec<usize>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.qualifier_fraction) {
            return bad(format!("qualifier fraction {} outside [0, 1]", self.qualifier_fraction));
        }
        if self.qualifier_fraction > 0.0 && self.max_qualifiers == 0 {
            return bad("qualifier fraction > 0 needs max qualifiers >= 1".into());
        }
        if self.relations < 4 {
            return bad(format!("need at least 4 relations, got {}", self.relations));
        }
        if self.values_per_attribute == 0 {
            return bad("values per attribute must be >= 1".into());
        }
        if self.statements < 10 {
            return bad(format!("need at least 10 statements, got {}", self.statements));
        }
        Ok(())
    }

    fn layout(&self, vocab: &mut VocabBuilder) -> Result<Layout> {
        let persons = (self.entities / 5).max(2);
        let rest = self.entities.saturating_sub(2 * persons);
        let works = (rest / 3).max(1);
        let values = rest.saturating_sub(works);
        if values < self.values_per_attribute {
            return Err(Error::Config(format!(
                "{} entities leave {values} attribute values, fewer than {} per attribute",
                self.entities, self.values_per_attribute
            )));
        }
        let mut ids = |prefix: &str, n: usize| -> Vec<EntityId> {
            (0..n).map(|i| vocab.entity(&format!("{prefix}{i}"))).collect()
        };
        let persons = ids("person", persons);
        let aliases = ids("alias", persons.len());
        let works = ids("work", works);
        let values = ids("value", values);
        let author_of = vocab.relation("authorOf");
        let under_pseudonym = vocab.relation("underPseudonym");
        let context = vocab.relation("context");
        let attributes = (0..self.relations - 3)
            .map(|k| vocab.relation(&format!("attr{k}")))
            .collect();
        Ok(Layout {
            persons,
            aliases,
            works,
            values,
            author_of,
            under_pseudonym,
            context,
            attributes,
        })
    }
}

/// Up to `count` distinct works written by the statement's person.
fn context_qualifiers(
    rng: &mut ChaCha8Rng,
    layout: &Layout,
    works: &[EntityId],
    count: usize,
    into: &mut Vec<Qualifier>,
) {
    let picks: Vec<_> = works.choose_multiple(rng, count).copied().collect();
    into.extend(picks.into_iter().map(|w| Qualifier::new(layout.context, w)));
}

/// Builds an 80/10/10 split; deterministic for a given `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = VocabBuilder::new();
    let layout = config.layout(&mut vocab)?;
    let n_persons = layout.persons.len();

    // Candidate base triples: (person index, kind, relation, object).
    let works_per_person = layout.works.len().div_ceil(2).max(1);
    let mut links = Vec::new();
    let mut written = vec![Vec::new(); n_persons];
    for (p, mine) in written.iter_mut().enumerate() {
        for &w in layout.works.choose_multiple(&mut rng, works_per_person) {
            links.push((p, w));
            mine.push(w);
        }
    }
    let mut facts = Vec::new();
    for p in 0..n_persons {
        for &attr in &layout.attributes {
            for &x in layout.values.choose_multiple(&mut rng, config.values_per_attribute) {
                facts.push((p, attr, x));
            }
        }
    }
    let capacity = links.len() + 2 * facts.len();
    if config.statements > capacity {
        return Err(Error::Config(format!(
            "{} statements requested but the layout admits at most {capacity}",
            config.statements
        )));
    }
    links.shuffle(&mut rng);
    facts.shuffle(&mut rng);
    let mut n_links = (config.statements / 5).min(links.len());
    let mut n_facts = (config.statements - n_links) / 2;
    if n_facts > facts.len() {
        n_facts = facts.len();
        n_links = config.statements - 2 * n_facts;
    }
    let odd = config.statements - n_links - 2 * n_facts;
    if odd > 0 && n_links + odd <= links.len() {
        n_links += odd;
    }

    let qualified = |rng: &mut ChaCha8Rng| rng.gen_bool(config.qualifier_fraction);
    let mut statements = Vec::with_capacity(config.statements);
    for &(p, w) in &links[..n_links] {
        let mut q = Vec::new();
        if qualified(&mut rng) {
            q.push(Qualifier::new(layout.under_pseudonym, layout.aliases[p]));
            let extra = rng.gen_range(0..config.max_qualifiers);
            let others: Vec<_> = written[p].iter().copied().filter(|&o| o != w).collect();
            context_qualifiers(&mut rng, &layout, &others, extra, &mut q);
        }
        statements.push(Statement::new(layout.persons[p], layout.author_of, w).with_qualifiers(q));
    }
    let mut attribute = |rng: &mut ChaCha8Rng, p: usize, subject: EntityId, attr: usize, x: EntityId| {
        let mut q = Vec::new();
        if qualified(rng) {
            let count = rng.gen_range(1..=config.max_qualifiers);
            context_qualifiers(rng, &layout, &written[p], count, &mut q);
        }
        statements.push(Statement::new(subject, attr, x).with_qualifiers(q));
    };
    for &(p, attr, x) in &facts[..n_facts] {
        attribute(&mut rng, p, layout.persons[p], attr, x);
        attribute(&mut rng, p, layout.aliases[p], attr, x);
    }
    if n_links + 2 * n_facts < config.statements {
        let (p, attr, x) = facts[n_facts];
        attribute(&mut rng, p, layout.persons[p], attr, x);
    }
    debug_assert_eq!(statements.len(), config.statements);

    statements.shuffle(&mut rng);
    let n = statements.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_valid = (n as f64 * 0.1).round() as usize;
    let mut train = statements[..n_train].to_vec();
    let mut held = Vec::new();
    let mut seen_e: HashSet<EntityId> = train.iter().flat_map(|s| s.entities()).collect();
    let mut seen_r: HashSet<usize> = train.iter().flat_map(|s| s.relations()).collect();
    for (i, s) in statements[n_train..].iter().enumerate() {
        let known = s.entities().all(|e| seen_e.contains(&e))
            && s.relations().all(|r| seen_r.contains(&r));
        if known {
            held.push((i < n_valid, s.clone()));
        } else {
            seen_e.extend(s.entities());
            seen_r.extend(s.relations());
            train.push(s.clone());
        }
    }
    let (valid, test): (Vec<_>, Vec<_>) = held.into_iter().partition(|(v, _)| *v);
    Ok(Dataset {
        vocab: vocab.finish(),
        train,
        valid: valid.into_iter().map(|(_, s)| s).collect(),
        test: test.into_iter().map(|(_, s)| s).collect(),
    })
}
