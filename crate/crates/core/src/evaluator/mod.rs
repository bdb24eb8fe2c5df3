//! Filtered ranking evaluation: MRR, Hits@1 and Hits@10.


use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{inverse_statement, EntityId, Qualifier, RelationId, Split, Statement, Vocab};
use crate::decoder::{build_sequence, decode, MaskTarget, Task, TokenSequence};
use crate::encoder::{encode, Encoded, EncoderGraph};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, ModelParams};
use crate::tensor::{Tape, Tensor};

/// Whether filter keys include the qualifier multiset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterLevel {
    #[default]
    Statement,
    Triple,
}

impl std::str::FromStr for FilterLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statement" => Ok(Self::Statement),
            "triple" => Ok(Self::Triple),
            _ => Err(Error::Config(format!("unknown filter level {s:?}"))),
        }
    }
}

/// `(subject, relation, sorted qualifiers)`; qualifiers are empty at
/// triple level.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub subject: EntityId,
    pub relation: RelationId,
    pub qualifiers: Vec<Qualifier>,
}

/// A statement with one qualifier value hidden: the base triple, the
/// qualifier relation and the remaining pairs (sorted).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QualifierKey {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub qualifier_relation: RelationId,
    pub rest: Vec<Qualifier>,
}

/// Known true answers per query, over every split.
#[derive(Clone, Debug)]
pub struct FilterIndex {
    level: FilterLevel,
    base: HashMap<QueryKey, HashSet<EntityId>>,
    qual: HashMap<QualifierKey, HashSet<EntityId>>,
}

impl FilterIndex {
    /// Indexes object answers of every statement and subject answers via
    /// the inverse statement, plus every qualifier value.
    pub fn build<'a>(
        vocab: &Vocab,
        statements: impl IntoIterator<Item = &'a Statement>,
        level: FilterLevel,
    ) -> Self {
        let mut index = Self {
            level,
            base: HashMap::new(),
            qual: HashMap::new(),
        };
        for s in statements {
            let inv = inverse_statement(vocab, s);
            for st in [s, &inv] {
                let key = index.base_key(st);
                index.base.entry(key).or_default().insert(st.object);
            }
            for (i, q) in s.qualifiers.iter().enumerate() {
                let key = Self::qual_key(s, i);
                index.qual.entry(key).or_default().insert(q.entity);
            }
        }
        index
    }

    pub fn level(&self) -> FilterLevel {
        self.level
    }

    /// Key for predicting the object of `s`.
    pub fn base_key(&self, s: &Statement) -> QueryKey {
        QueryKey {
            subject: s.subject,
            relation: s.relation,
            qualifiers: match self.level {
                FilterLevel::Statement => s.sorted_qualifiers(),
                FilterLevel::Triple => Vec::new(),
            },
        }
    }

    /// Key for predicting the value of qualifier `i` of `s`.
    pub fn qual_key(s: &Statement, i: usize) -> QualifierKey {
        let mut rest = s.qualifiers.clone();
        let q = rest.remove(i);
        rest.sort();
        QualifierKey {
            subject: s.subject,
            relation: s.relation,
            object: s.object,
            qualifier_relation: q.relation,
            rest,
        }
    }

    pub fn answers(&self, key: &QueryKey) -> Option<&HashSet<EntityId>> {
        self.base.get(key)
    }

    pub fn qual_answers(&self, key: &QualifierKey) -> Option<&HashSet<EntityId>> {
        self.qual.get(key)
    }

    pub fn base_keys(&self) -> impl Iterator<Item = (&QueryKey, &HashSet<EntityId>)> {
        self.base.iter()
    }

    /// Answers known for the query `(statement, target)`.
    pub fn known(&self, vocab: &Vocab, s: &Statement, target: MaskTarget) -> Option<&HashSet<EntityId>> {
        match target {
            MaskTarget::Object => self.answers(&self.base_key(s)),
            MaskTarget::Subject => self.answers(&self.base_key(&inverse_statement(vocab, s))),
            MaskTarget::Qualifier(i) => self.qual_answers(&Self::qual_key(s, i)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankResult {
    pub query: usize,
    pub statement: usize,
    #[serde(serialize_with = "display")]
    pub target: MaskTarget,
    pub gold: EntityId,
    /// 1-based; exact ties with the gold count half.
    pub rank: f64,
    pub score: f64,
}

fn display<S: serde::Serializer>(t: &MaskTarget, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(t)
}

/// Filtered rank of `gold` among `scores` (one per labelled entity):
/// `1 + #{strictly higher} + #{ties} / 2`, ignoring every other entity in
/// `filter`.
pub fn rank_query(scores: &[f64], gold: EntityId, filter: &HashSet<EntityId>) -> Result<(f64, f64)> {
    let Some(&g) = scores.get(gold) else {
        return Err(Error::Contract(format!(
            "gold entity {gold} outside {} scores",
            scores.len()
        )));
    };
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (e, &s) in scores.iter().enumerate() {
        if e == gold || filter.contains(&e) {
            continue;
        }
        if s > g {
            higher += 1;
        } else if s == g {
            ties += 1;
        }
    }
    Ok((1.0 + higher as f64 + ties as f64 / 2.0, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub task: Task,
    pub mrr: f64,
    pub h1: f64,
    pub h10: f64,
    pub n_queries: usize,
}

pub fn compute_metrics(split: Split, task: Task, results: &[RankResult]) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::Contract("metrics over zero queries".into()));
    }
    let n = results.len() as f64;
    let frac = |k: f64| results.iter().filter(|r| r.rank <= k).count() as f64 / n;
    Ok(Metrics {
        split,
        task,
        mrr: results.iter().map(|r| 1.0 / r.rank).sum::<f64>() / n,
        h1: frac(1.0),
        h10: frac(10.0),
        n_queries: results.len(),
    })
}

/// Entity and relation tables after the (deterministic) encoder.
pub fn encode_tables(params: &ModelParams, graph: &EncoderGraph) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.store.bind_frozen(&mut tape);
    let out = encode(&mut tape, graph, params, &bound, &mut ForwardCtx::eval())?;
    Ok((tape.value(out.entities).clone(), tape.value(out.relations).clone()))
}

/// Evaluation-mode logits for `seqs` against precomputed encoder tables,
/// `batch` sequences per forward pass.
pub fn score_sequences(
    params: &ModelParams,
    tables: &(Tensor, Tensor),
    seqs: &[TokenSequence],
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let bound = params.store.bind_frozen(&mut tape);
        let encoded = Encoded {
            entities: tape.constant(tables.0.clone()),
            relations: tape.constant(tables.1.clone()),
        };
        let logits = decode(&mut tape, params, &bound, &encoded, chunk, &mut ForwardCtx::eval())?;
        let v = tape.value(logits);
        out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Also rank qualifier values.
    pub qualifier_task: bool,
    /// Object predictions only (no subject queries).
    pub objects_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            qualifier_task: true,
            objects_only: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub base: Metrics,
    pub qual: Option<Metrics>,
    pub ranks: Vec<RankResult>,
}

/// The queries evaluated for `statements`: object and subject of each,
/// then (optionally) every qualifier value.
pub fn queries(statements: &[Statement], options: &EvalOptions) -> Vec<(usize, MaskTarget)> {
    let mut out = Vec::new();
    for (i, s) in statements.iter().enumerate() {
        out.push((i, MaskTarget::Object));
        if !options.objects_only {
            out.push((i, MaskTarget::Subject));
        }
        if options.qualifier_task {
            out.extend((0..s.qualifiers.len()).map(|j| (i, MaskTarget::Qualifier(j))));
        }
    }
    out
}

/// Ranks every query of `statements` with filtering by `index`.
pub fn evaluate(
    params: &ModelParams,
    graph: &EncoderGraph,
    vocab: &Vocab,
    statements: &[Statement],
    index: &FilterIndex,
    split: Split,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let tables = encode_tables(params, graph)?;
    let qs = queries(statements, options);
    let mut seqs = Vec::with_capacity(qs.len());
    let mut golds = Vec::with_capacity(qs.len());
    for &(i, target) in &qs {
        let (seq, gold) = build_sequence(vocab, &statements[i], target)?;
        seqs.push(seq);
        golds.push(gold);
    }
    let scores = score_sequences(params, &tables, &seqs, options.batch_size)?;
    let empty = HashSet::new();
    let mut ranks = Vec::with_capacity(qs.len());
    for (q, ((&(i, target), gold), row)) in qs.iter().zip(golds).zip(&scores).enumerate() {
        let filter = index.known(vocab, &statements[i], target).unwrap_or(&empty);
        let (rank, score) = rank_query(row, gold, filter)?;
        ranks.push(RankResult {
            query: q,
            statement: i,
            target,
            gold,
            rank,
            score,
        });
    }
    let (base, qual): (Vec<RankResult>, Vec<RankResult>) =
        ranks.iter().cloned().partition(|r| r.target.task() == Task::Base);
    if base.is_empty() {
        return Err(Error::Contract(format!("{split} split has no statements to evaluate")));
    }
    Ok(Evaluation {
        base: compute_metrics(split, Task::Base, &base)?,
        qual: if qual.is_empty() {
            None
        } else {
            Some(compute_metrics(split, Task::Qual, &qual)?)
        },
        ranks,
    })
}
