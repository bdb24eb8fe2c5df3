use std::fmt;

/// Entity id in a [`Vocab`](super::Vocab).
pub type EntityId = usize;
/// Relation id in a [`Vocab`](super::Vocab).
pub type RelationId = usize;

/// A qualifier pair: `(qualifier relation, qualifier entity)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Qualifier {
    pub relation: RelationId,
    pub entity: EntityId,
}

impl Qualifier {
    pub fn new(relation: RelationId, entity: EntityId) -> Self {
        Self { relation, entity }
    }
}

/// A hyper-relational fact: a base triple plus qualifier pairs.
///
/// The qualifier list keeps file order so statements serialize back to the
/// line they came from; every model computation treats it as a set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Statement {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub qualifiers: Vec<Qualifier>,
}

impl Statement {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Self {
            subject,
            relation,
            object,
            qualifiers: Vec::new(),
        }
    }

    pub fn with_qualifiers(mut self, qualifiers: Vec<Qualifier>) -> Self {
        self.qualifiers = qualifiers;
        self
    }

    /// Number of entities taking part in the fact.
    pub fn arity(&self) -> usize {
        2 + self.qualifiers.len()
    }

    /// Qualifiers in canonical (sorted) order.
    pub fn sorted_qualifiers(&self) -> Vec<Qualifier> {
        let mut q = self.qualifiers.clone();
        q.sort_unstable();
        q
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        [self.subject, self.object]
            .into_iter()
            .chain(self.qualifiers.iter().map(|q| q.entity))
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        std::iter::once(self.relation).chain(self.qualifiers.iter().map(|q| q.relation))
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}", self.subject, self.relation, self.object)?;
        for q in &self.qualifiers {
            write!(f, ", {}:{}", q.relation, q.entity)?;
        }
        write!(f, ")")
    }
}
