//! Masked transformer decoder over statement token sequences.
//!
//! A statement becomes `(s, r, o, qr1, qv1, ...)`, with one entity slot
//! replaced by the MASK token. Tokens read their rows from the encoded
//! tables, gain a role (or absolute position) embedding, pass a pre-LN
//! transformer, and the masked position is scored against every entity.


use crate::data::{inverse_statement, EntityId, RelationId, Statement, Vocab};
use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::model::{Bound, ForwardCtx, ModelParams, PositionKind, TransformerLayerIds};
use crate::tensor::{Tape, Tensor, Var};

/// Token roles: subject, relation, object, qualifier relation, qualifier value, padding.
pub const ROLE_COUNT: usize = 6;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Subject = 0,
    Relation = 1,
    Object = 2,
    QualifierRelation = 3,
    QualifierEntity = 4,
    Pad = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Entity(EntityId),
    Relation(RelationId),
}

/// Which entity slot of a statement is hidden.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskTarget {
    Subject,
    Object,
    /// Entity of the `i`-th qualifier pair.
    Qualifier(usize),
}

impl MaskTarget {
    pub fn task(self) -> Task {
        match self {
            MaskTarget::Subject | MaskTarget::Object => Task::Base,
            MaskTarget::Qualifier(_) => Task::Qual,
        }
    }
}

impl std::fmt::Display for MaskTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskTarget::Subject => f.write_str("subject"),
            MaskTarget::Object => f.write_str("object"),
            MaskTarget::Qualifier(i) => write!(f, "qualifier{i}"),
        }
    }
}

/// Base-entity prediction (subject/object) or qualifier-entity prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Base,
    Qual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub roles: Vec<Role>,
    pub masked: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn live(&self, i: usize) -> bool {
        self.roles[i] != Role::Pad
    }

    /// Appends PAD tokens up to `len`.
    pub fn padded(&self, vocab_pad: EntityId, len: usize) -> Self {
        let mut out = self.clone();
        while out.tokens.len() < len {
            out.tokens.push(Token::Entity(vocab_pad));
            out.roles.push(Role::Pad);
        }
        out
    }
}

/// Builds the masked sequence for `target` and returns it with the gold
/// entity. Subject prediction masks the object of the inverse statement.
pub fn build_sequence(
    vocab: &Vocab,
    statement: &Statement,
    target: MaskTarget,
) -> Result<(TokenSequence, EntityId)> {
    if target == MaskTarget::Subject {
        let inv = inverse_statement(vocab, statement);
        return build_sequence(vocab, &inv, MaskTarget::Object);
    }
    let s = statement;
    let mut tokens = vec![
        Token::Entity(s.subject),
        Token::Relation(s.relation),
        Token::Entity(s.object),
    ];
    let mut roles = vec![Role::Subject, Role::Relation, Role::Object];
    for q in &s.qualifiers {
        tokens.push(Token::Relation(q.relation));
        tokens.push(Token::Entity(q.entity));
        roles.push(Role::QualifierRelation);
        roles.push(Role::QualifierEntity);
    }
    let masked = match target {
        MaskTarget::Object => 2,
        MaskTarget::Qualifier(i) if i < s.qualifiers.len() => 4 + 2 * i,
        MaskTarget::Qualifier(i) => {
            return Err(Error::Contract(format!(
                "qualifier {i} masked but the statement has {} pairs",
                s.qualifiers.len()
            )))
        }
        MaskTarget::Subject => unreachable!(),
    };
    let gold = match tokens[masked] {
        Token::Entity(e) => e,
        Token::Relation(_) => unreachable!("masked slots hold entities"),
    };
    tokens[masked] = Token::Entity(vocab.entity_mask());
    Ok((
        TokenSequence {
            tokens,
            roles,
            masked,
        },
        gold,
    ))
}

/// Tape handles of one transformer layer.
#[derive(Clone, Copy, Debug)]
struct Layer {
    ln1: (Var, Var),
    query: (Var, Var),
    key: (Var, Var),
    value: (Var, Var),
    out: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

impl Layer {
    fn bind(ids: &TransformerLayerIds, b: &Bound) -> Self {
        Self {
            ln1: (b.get(ids.ln1_gain), b.get(ids.ln1_bias)),
            query: (b.get(ids.w_query), b.get(ids.b_query)),
            key: (b.get(ids.w_key), b.get(ids.b_key)),
            value: (b.get(ids.w_value), b.get(ids.b_value)),
            out: (b.get(ids.w_out), b.get(ids.b_out)),
            ln2: (b.get(ids.ln2_gain), b.get(ids.ln2_bias)),
            ff1: (b.get(ids.w_ff1), b.get(ids.b_ff1)),
            ff2: (b.get(ids.w_ff2), b.get(ids.b_ff2)),
        }
    }
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Pads `seqs` to a common length and embeds them: `[batch * len, d]` rows
/// of token embeddings plus position embeddings. Returns the rows and `len`.
fn embed(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    encoded: &Encoded,
    seqs: &[TokenSequence],
) -> Result<(Var, usize)> {
    let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::Contract("decoder batch is empty".into()));
    }
    let sizes = &params.sizes;
    let mut token_rows = Vec::with_capacity(seqs.len() * len);
    let mut position_rows = Vec::with_capacity(seqs.len() * len);
    let pad = sizes.num_entities + 1;
    for seq in seqs {
        let seq = seq.padded(pad, len);
        for (i, (tok, role)) in seq.tokens.iter().zip(&seq.roles).enumerate() {
            token_rows.push(match *tok {
                Token::Entity(e) => e,
                Token::Relation(r) => sizes.entity_rows + r,
            });
            position_rows.push(match params.config.decoder.positions {
                PositionKind::Role => *role as usize,
                PositionKind::Absolute => i,
            });
        }
    }
    if params.config.decoder.positions == PositionKind::Absolute && len > sizes.max_len {
        return Err(Error::Contract(format!(
            "sequence length {len} exceeds the {} absolute positions",
            sizes.max_len
        )));
    }
    let table = tape.concat_rows(&[encoded.entities, encoded.relations])?;
    let tokens = tape.gather_rows(table, &token_rows)?;
    let positions = tape.gather_rows(bound.get(params.ids.positions), &position_rows)?;
    Ok((tape.add(tokens, positions)?, len))
}

/// Additive attention mask `[batch, len, len]`: `-inf` on PAD keys.
fn key_mask(seqs: &[TokenSequence], len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(seqs.len() * len * len);
    for seq in seqs {
        for _ in 0..len {
            for j in 0..len {
                let live = j < seq.len() && seq.live(j);
                data.push(if live { 0.0 } else { f64::NEG_INFINITY });
            }
        }
    }
    Tensor::new(vec![seqs.len(), len, len], data)
}

fn attention(
    tape: &mut Tape,
    x: Var,
    layer: &Layer,
    heads: usize,
    batch: usize,
    len: usize,
    mask: Var,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = linear(tape, x, layer.query)?;
    let k = linear(tape, x, layer.key)?;
    let v = linear(tape, x, layer.value)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let split = |tape: &mut Tape, t: Var| -> Result<Var> {
            let s = tape.slice_cols(t, h * dh, dh)?;
            tape.reshape(s, &[batch, len, dh])
        };
        let qh = split(tape, q)?;
        let kh = split(tape, k)?;
        let vh = split(tape, v)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.batch_matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores, 2)?;
        let mixed = tape.batch_matmul(weights, vh)?;
        outs.push(tape.reshape(mixed, &[batch * len, dh])?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, cat, layer.out)
}

/// Contextual embeddings `[batch * len, d]` for `seqs` padded to a common
/// length, and that length.
pub fn transformer_forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    encoded: &Encoded,
    seqs: &[TokenSequence],
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, usize)> {
    let cfg = &params.config.decoder;
    let (mut x, len) = embed(tape, params, bound, encoded, seqs)?;
    let mask = tape.constant(key_mask(seqs, len)?);
    let act = cfg.ffn_activation.kind();
    for ids in &params.ids.transformer {
        let layer = Layer::bind(ids, bound);
        let h = tape.layer_norm(x, layer.ln1.0, layer.ln1.1, LAYER_NORM_EPS)?;
        let a = attention(tape, h, &layer, cfg.heads, seqs.len(), len, mask)?;
        let a = ctx.dropout(tape, a, cfg.dropout)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, layer.ln2.0, layer.ln2.1, LAYER_NORM_EPS)?;
        let f = linear(tape, h, layer.ff1)?;
        let f = tape.unary(act, f);
        let f = linear(tape, f, layer.ff2)?;
        let f = ctx.dropout(tape, f, cfg.dropout)?;
        x = tape.add(x, f)?;
    }
    let ids = &params.ids;
    let x = tape.layer_norm(
        x,
        bound.get(ids.final_ln_gain),
        bound.get(ids.final_ln_bias),
        LAYER_NORM_EPS,
    )?;
    Ok((x, len))
}

/// Logits `[batch, num_entities]` of `g(h W + b)` against the labelled rows
/// of `entities`.
pub fn score_entities(
    tape: &mut Tape,
    masked: Var,
    entities: Var,
    num_entities: usize,
    head: (Var, Var),
    activation: crate::model::Activation,
) -> Result<Var> {
    let z = linear(tape, masked, head)?;
    let z = tape.unary(activation.kind(), z);
    let table = tape.slice_rows(entities, 0, num_entities)?;
    let table_t = tape.transpose(table)?;
    tape.matmul(z, table_t)
}

/// Entity logits `[batch, num_entities]` for the masked slot of each sequence.
pub fn decode(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    encoded: &Encoded,
    seqs: &[TokenSequence],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let (x, len) = transformer_forward(tape, params, bound, encoded, seqs, ctx)?;
    let rows: Vec<usize> = seqs.iter().enumerate().map(|(b, s)| b * len + s.masked).collect();
    let masked = tape.gather_rows(x, &rows)?;
    let ids = &params.ids;
    let table = match ids.entity_out {
        Some(id) => bound.get(id),
        None => encoded.entities,
    };
    score_entities(
        tape,
        masked,
        table,
        params.sizes.num_entities,
        (bound.get(ids.w_head), bound.get(ids.b_head)),
        params.config.decoder.output_activation,
    )
}

pub fn layer_norm_eps() -> f64 {
    LAYER_NORM_EPS
}
