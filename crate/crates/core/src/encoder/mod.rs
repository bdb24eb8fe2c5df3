//! Two-perspective graph encoder.
//!
//! The base aggregator updates every entity from its incident base triples,
//! mixing in an encoded summary of each triple's qualifiers. The qualifier
//! aggregator updates entities that occur as qualifier values from the
//! projected base triples they annotate. [`encode`] composes the two
//! according to [`EncoderMode`].

mod graph;
#[cfg(test)]
mod tests;

pub use graph::{BaseEdges, Direction, EncoderGraph, QualifierTriples};

use graph::mean_weights;

use crate::data::Qualifier;
use crate::error::{Error, Result};
use crate::model::{
    BaseLayerIds, Bound, EncoderConfig, EncoderMode, ForwardCtx, ModelParams, QualLayerIds,
    QualifierMix,
};
use crate::tensor::{Tape, Tensor, Var};

/// Moduli below this are treated as this value when normalizing rotations.
pub const ROTATE_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Rotation composition: `x` rotated by `r` normalized to unit modulus, both
/// read as `d/2` complex numbers with interleaved real/imaginary parts.
pub fn compose_rotate(tape: &mut Tape, x: Var, r: Var) -> Result<Var> {
    tape.rotate(x, r, ROTATE_EPS)
}

/// Multiplies row `i` of `x` by `weights[i]`.
fn scale_rows(tape: &mut Tape, x: Var, weights: &[f64]) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let index: Vec<usize> = (0..rows).collect();
    tape.scatter_rows(x, &index, weights, rows)
}

/// Encodes `n_sets` qualifier sets at once: row `s` of the result is
/// `(sum over pairs p owned by s of phi(h_qr(p), h_qv(p))) W_q`; sets
/// without pairs give zero rows.
fn encode_qualifier_sets(
    tape: &mut Tape,
    owner: &[usize],
    relation: &[usize],
    entity: &[usize],
    n_sets: usize,
    entities: Var,
    relations: Var,
    w_q: Var,
) -> Result<Var> {
    if owner.is_empty() {
        let d = tape.shape(entities)[1];
        return Ok(tape.constant(Tensor::zeros(&[n_sets, d])));
    }
    let qr = tape.gather_rows(relations, relation)?;
    let qv = tape.gather_rows(entities, entity)?;
    let composed = compose_rotate(tape, qr, qv)?;
    let summed = tape.scatter_rows(composed, owner, &vec![1.0; owner.len()], n_sets)?;
    tape.matmul(summed, w_q)
}

/// Encoded qualifier vector `[1, d]` of one statement.
pub fn encode_qualifiers(
    tape: &mut Tape,
    qualifiers: &[Qualifier],
    entities: Var,
    relations: Var,
    w_q: Var,
) -> Result<Var> {
    let owner = vec![0; qualifiers.len()];
    let rel: Vec<usize> = qualifiers.iter().map(|q| q.relation).collect();
    let ent: Vec<usize> = qualifiers.iter().map(|q| q.entity).collect();
    encode_qualifier_sets(tape, &owner, &rel, &ent, 1, entities, relations, w_q)
}

/// Tape handles of one base-aggregator layer.
#[derive(Clone, Copy, Debug)]
pub struct BaseLayer {
    pub w_std: Var,
    pub w_inv: Var,
    pub w_self: Var,
    pub w_q: Var,
    pub w_rel: Var,
}

impl BaseLayer {
    pub fn bind(ids: &BaseLayerIds, bound: &Bound) -> Self {
        Self {
            w_std: bound.get(ids.w_std),
            w_inv: bound.get(ids.w_inv),
            w_self: bound.get(ids.w_self),
            w_q: bound.get(ids.w_q),
            w_rel: bound.get(ids.w_rel),
        }
    }

    fn weight(&self, dir: Direction) -> Var {
        match dir {
            Direction::Standard => self.w_std,
            Direction::Inverse => self.w_inv,
            Direction::SelfLoop => self.w_self,
        }
    }
}

/// Replaces rows `0..keep_from` of `table` with `updated` rows, keeping the
/// trailing rows of `table`.
fn replace_leading_rows(tape: &mut Tape, updated: Var, table: Var, keep_from: usize) -> Result<Var> {
    let rows = tape.shape(table)[0];
    if keep_from >= rows {
        return Ok(updated);
    }
    let head = tape.slice_rows(updated, 0, keep_from)?;
    let tail = tape.slice_rows(table, keep_from, rows - keep_from)?;
    tape.concat_rows(&[head, tail])
}

/// One base-aggregator layer. Returns the updated entity and relation tables.
///
/// Each edge message is `psi(h_u, h_r, h_q)` per `config.mix`, transformed by
/// the weight of its direction. Messages are averaged within each direction
/// bucket (or summed when `degree_norm` is off), the buckets are summed and
/// the activation applied. Special-token rows pass through. Relations other
/// than the self loop and special tokens are multiplied by `w_rel`.
pub fn base_aggregate(
    tape: &mut Tape,
    graph: &EncoderGraph,
    entities: Var,
    relations: Var,
    layer: &BaseLayer,
    config: &EncoderConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Var)> {
    if let Some(&v) = graph.isolated_entities().first() {
        return Err(Error::Contract(format!(
            "entity {v} has no incoming edge; the graph needs self loops"
        )));
    }
    let edges = &graph.base;
    let m = edges.len();
    let alpha = config.alpha;
    let neighbor = tape.gather_rows(entities, &edges.neighbor)?;
    let relation = tape.gather_rows(relations, &edges.relation)?;
    let encoded_q = encode_qualifier_sets(
        tape,
        &edges.pair_edge,
        &edges.pair_relation,
        &edges.pair_entity,
        m,
        entities,
        relations,
        layer.w_q,
    )?;
    let keep: Vec<f64> = edges
        .qualified
        .iter()
        .map(|&q| if q || config.strict_alpha { alpha } else { 1.0 })
        .collect();
    let mix: Vec<f64> = edges
        .qualified
        .iter()
        .map(|&q| if q { 1.0 - alpha } else { 0.0 })
        .collect();
    let psi = match config.mix {
        QualifierMix::QuadMix => {
            let composed = compose_rotate(tape, neighbor, relation)?;
            let a = scale_rows(tape, composed, &keep)?;
            let b = scale_rows(tape, encoded_q, &mix)?;
            tape.add(a, b)?
        }
        QualifierMix::StareGamma => {
            let a = scale_rows(tape, relation, &keep)?;
            let b = scale_rows(tape, encoded_q, &mix)?;
            let gamma = tape.add(a, b)?;
            compose_rotate(tape, neighbor, gamma)?
        }
    };

    let mut total: Option<Var> = None;
    for dir in Direction::ALL {
        let bucket = edges.bucket(dir);
        if bucket.is_empty() {
            continue;
        }
        let receivers: Vec<usize> = bucket.iter().map(|&e| edges.receiver[e]).collect();
        let weights = mean_weights(&receivers, graph.entity_rows, config.degree_norm);
        let msgs = tape.gather_rows(psi, &bucket)?;
        let msgs = tape.matmul(msgs, layer.weight(dir))?;
        let agg = tape.scatter_rows(msgs, &receivers, &weights, graph.entity_rows)?;
        total = Some(match total {
            Some(t) => tape.add(t, agg)?,
            None => agg,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("base aggregation over an empty graph".into()))?;
    let activated = tape.unary(config.activation.kind(), total);
    let activated = ctx.dropout(tape, activated, config.dropout)?;
    let new_entities = replace_leading_rows(tape, activated, entities, graph.num_entities)?;

    let scored = tape.slice_rows(relations, 0, graph.num_scored_relations)?;
    let transformed = tape.matmul(scored, layer.w_rel)?;
    let new_relations = concat_tail(tape, transformed, relations, graph.num_scored_relations)?;
    Ok((new_entities, new_relations))
}

/// `head` stacked over the rows of `table` from `from` on.
fn concat_tail(tape: &mut Tape, head: Var, table: Var, from: usize) -> Result<Var> {
    let rows = tape.shape(table)[0];
    if from >= rows {
        return Ok(head);
    }
    let tail = tape.slice_rows(table, from, rows - from)?;
    tape.concat_rows(&[head, tail])
}

/// `Linear(Concat(h_v, h_r, h_u))` row-wise: `[k, 3d] x [3d, d] + b`.
pub fn triple_project(
    tape: &mut Tape,
    subject: Var,
    relation: Var,
    object: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let cat = tape.concat_cols(&[subject, relation, object])?;
    let projected = tape.matmul(cat, weight)?;
    tape.add_row_bias(projected, bias)
}

/// Tape handles of one qualifier-aggregator layer.
#[derive(Clone, Copy, Debug)]
pub struct QualLayer {
    pub w_triple: Var,
    pub b_triple: Var,
    pub w_dir: Var,
}

impl QualLayer {
    pub fn bind(ids: &QualLayerIds, bound: &Bound) -> Self {
        Self {
            w_triple: bound.get(ids.w_triple),
            b_triple: bound.get(ids.b_triple),
            w_dir: bound.get(ids.w_dir),
        }
    }
}

/// One qualifier-aggregator layer. Every entity that occurs as a qualifier
/// value becomes `f(mean over its qualifier triples of phi(h_t, h_qr) W)`;
/// all other rows pass through unchanged.
pub fn qual_aggregate(
    tape: &mut Tape,
    graph: &EncoderGraph,
    entities: Var,
    relations: Var,
    layer: &QualLayer,
    config: &EncoderConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let triples = &graph.qual;
    if triples.is_empty() {
        return Ok(entities);
    }
    let hv = tape.gather_rows(entities, &triples.subject)?;
    let hr = tape.gather_rows(relations, &triples.relation)?;
    let hu = tape.gather_rows(entities, &triples.object)?;
    let ht = triple_project(tape, hv, hr, hu, layer.w_triple, layer.b_triple)?;
    let hqr = tape.gather_rows(relations, &triples.qual_relation)?;
    let composed = compose_rotate(tape, ht, hqr)?;
    let msgs = tape.matmul(composed, layer.w_dir)?;
    let weights = mean_weights(&triples.target, graph.entity_rows, config.degree_norm);
    let agg = tape.scatter_rows(msgs, &triples.target, &weights, graph.entity_rows)?;
    let activated = tape.unary(config.activation.kind(), agg);
    let activated = ctx.dropout(tape, activated, config.dropout)?;

    let d = tape.shape(entities)[1];
    let mut keep_new = Tensor::zeros(&[graph.entity_rows, d]);
    for &t in &triples.target {
        keep_new.row_mut(t).fill(1.0);
    }
    let keep_old = Tensor::new(
        keep_new.shape().to_vec(),
        keep_new.data().iter().map(|v| 1.0 - v).collect(),
    )?;
    let keep_new = tape.constant(keep_new);
    let keep_old = tape.constant(keep_old);
    let a = tape.mul(activated, keep_new)?;
    let b = tape.mul(entities, keep_old)?;
    tape.add(a, b)
}

/// Encoded entity and relation tables.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub entities: Var,
    pub relations: Var,
}

fn run_base(
    tape: &mut Tape,
    graph: &EncoderGraph,
    params: &ModelParams,
    bound: &Bound,
    mut ent: Var,
    mut rel: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Var)> {
    for ids in &params.ids.base {
        let layer = BaseLayer::bind(ids, bound);
        (ent, rel) = base_aggregate(tape, graph, ent, rel, &layer, &params.config.encoder, ctx)?;
    }
    Ok((ent, rel))
}

fn run_qual(
    tape: &mut Tape,
    graph: &EncoderGraph,
    params: &ModelParams,
    bound: &Bound,
    mut ent: Var,
    rel: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    for ids in &params.ids.qual {
        let layer = QualLayer::bind(ids, bound);
        ent = qual_aggregate(tape, graph, ent, rel, &layer, &params.config.encoder, ctx)?;
    }
    Ok(ent)
}

/// Runs the configured encoder over the parameter tables bound on `tape`.
pub fn encode(
    tape: &mut Tape,
    graph: &EncoderGraph,
    params: &ModelParams,
    bound: &Bound,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Encoded> {
    let ids = &params.ids;
    let config = &params.config.encoder;
    let ent = bound.get(ids.entities);
    let rel = bound.get(ids.relations);
    let (entities, relations) = match config.mode {
        EncoderMode::Identity => (ent, rel),
        EncoderMode::LayerNormOnly => {
            let e = tape.layer_norm(
                ent,
                bound.get(ids.entity_ln_gain),
                bound.get(ids.entity_ln_bias),
                LAYER_NORM_EPS,
            )?;
            let r = tape.layer_norm(
                rel,
                bound.get(ids.relation_ln_gain),
                bound.get(ids.relation_ln_bias),
                LAYER_NORM_EPS,
            )?;
            (e, r)
        }
        EncoderMode::BaseOnly => run_base(tape, graph, params, bound, ent, rel, ctx)?,
        EncoderMode::Sequential => {
            let (e, r) = run_base(tape, graph, params, bound, ent, rel, ctx)?;
            (run_qual(tape, graph, params, bound, e, r, ctx)?, r)
        }
        EncoderMode::Parallel => {
            let (e_base, r_base) = run_base(tape, graph, params, bound, ent, rel, ctx)?;
            let e_qual = run_qual(tape, graph, params, bound, ent, r_base, ctx)?;
            let cat = tape.concat_cols(&[e_base, e_qual])?;
            let combined = tape.matmul(cat, bound.get(ids.w_parallel))?;
            let combined = ctx.dropout(tape, combined, config.parallel_dropout)?;
            (combined, r_base)
        }
    };
    Ok(Encoded {
        entities,
        relations,
    })
}

/// Layer-norm epsilon used by the table-normalizing encoder mode.
pub fn layer_norm_eps() -> f64 {
    LAYER_NORM_EPS
}
