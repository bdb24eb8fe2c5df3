use crate::data::{Statement, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Standard,
    Inverse,
    SelfLoop,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Standard, Direction::Inverse, Direction::SelfLoop];
}

/// Base-aggregator edges. Edge `e` carries a message from `neighbor[e]`
/// through `relation[e]` into `receiver[e]`: the subject of every forward
/// and inverse statement receives from its object.
#[derive(Clone, Debug, Default)]
pub struct BaseEdges {
    pub receiver: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub relation: Vec<usize>,
    pub direction: Vec<Direction>,
    pub qualified: Vec<bool>,
    /// Qualifier pairs flattened over edges: owning edge, relation, entity.
    pub pair_edge: Vec<usize>,
    pub pair_relation: Vec<usize>,
    pub pair_entity: Vec<usize>,
}

impl BaseEdges {
    pub fn len(&self) -> usize {
        self.receiver.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receiver.is_empty()
    }

    fn push(&mut self, s: &Statement, direction: Direction) {
        let e = self.receiver.len();
        self.receiver.push(s.subject);
        self.neighbor.push(s.object);
        self.relation.push(s.relation);
        self.direction.push(direction);
        self.qualified.push(!s.qualifiers.is_empty());
        for q in &s.qualifiers {
            self.pair_edge.push(e);
            self.pair_relation.push(q.relation);
            self.pair_entity.push(q.entity);
        }
    }

    /// Edge indices of one direction bucket.
    pub fn bucket(&self, dir: Direction) -> Vec<usize> {
        (0..self.len()).filter(|&e| self.direction[e] == dir).collect()
    }
}

/// Qualifier triples `((subject, relation, object), qualifier relation,
/// qualifier entity)`; the qualifier entity receives the message.
#[derive(Clone, Debug, Default)]
pub struct QualifierTriples {
    pub subject: Vec<usize>,
    pub relation: Vec<usize>,
    pub object: Vec<usize>,
    pub qual_relation: Vec<usize>,
    pub target: Vec<usize>,
}

impl QualifierTriples {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Message-passing structure over the training statements.
#[derive(Clone, Debug)]
pub struct EncoderGraph {
    pub num_entities: usize,
    pub entity_rows: usize,
    /// Forward plus inverse relations; rows past this are the self loop and
    /// special tokens.
    pub num_scored_relations: usize,
    pub relation_rows: usize,
    pub base: BaseEdges,
    pub qual: QualifierTriples,
}

impl EncoderGraph {
    /// Builds edges for `statements` (forward only), their inverses and one
    /// self loop per labelled entity.
    pub fn new(vocab: &Vocab, statements: &[Statement]) -> Self {
        Self::build(vocab, statements, true)
    }

    pub fn build(vocab: &Vocab, statements: &[Statement], self_loops: bool) -> Self {
        let mut base = BaseEdges::default();
        let mut qual = QualifierTriples::default();
        for s in statements {
            base.push(s, Direction::Standard);
        }
        for s in statements {
            base.push(&crate::data::inverse_statement(vocab, s), Direction::Inverse);
        }
        if self_loops {
            for v in 0..vocab.num_entities() {
                base.push(&Statement::new(v, vocab.self_loop(), v), Direction::SelfLoop);
            }
        }
        for s in statements {
            for q in &s.qualifiers {
                qual.subject.push(s.subject);
                qual.relation.push(s.relation);
                qual.object.push(s.object);
                qual.qual_relation.push(q.relation);
                qual.target.push(q.entity);
            }
        }
        Self {
            num_entities: vocab.num_entities(),
            entity_rows: vocab.entity_rows(),
            num_scored_relations: 2 * vocab.num_relations(),
            relation_rows: vocab.relation_rows(),
            base,
            qual,
        }
    }

    /// Labelled entities that receive no base edge at all.
    pub fn isolated_entities(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_entities];
        for &r in &self.base.receiver {
            if r < self.num_entities {
                seen[r] = true;
            }
        }
        (0..self.num_entities).filter(|&v| !seen[v]).collect()
    }
}

/// `1 / count` of each index within `index`, or all ones when `normalize`
/// is off.
pub(crate) fn mean_weights(index: &[usize], rows: usize, normalize: bool) -> Vec<f64> {
    if !normalize {
        return vec![1.0; index.len()];
    }
    let mut count = vec![0usize; rows];
    for &i in index {
        count[i] += 1;
    }
    index.iter().map(|&i| 1.0 / count[i] as f64).collect()
}
