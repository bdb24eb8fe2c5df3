use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Records every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in the store's registration order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct BaseLayerIds {
    pub w_std: ParamId,
    pub w_inv: ParamId,
    pub w_self: ParamId,
    pub w_q: ParamId,
    pub w_rel: ParamId,
}

#[derive(Clone, Debug)]
pub struct QualLayerIds {
    /// `[3d, d]` projection of the concatenated base triple.
    pub w_triple: ParamId,
    pub b_triple: ParamId,
    pub w_dir: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerLayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_query: ParamId,
    pub b_query: ParamId,
    pub w_key: ParamId,
    pub b_key: ParamId,
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub entities: ParamId,
    pub relations: ParamId,
    pub base: Vec<BaseLayerIds>,
    pub qual: Vec<QualLayerIds>,
    /// `[2d, d]` combiner for the parallel composition.
    pub w_parallel: ParamId,
    pub entity_ln_gain: ParamId,
    pub entity_ln_bias: ParamId,
    pub relation_ln_gain: ParamId,
    pub relation_ln_bias: ParamId,
    pub positions: ParamId,
    pub transformer: Vec<TransformerLayerIds>,
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    pub w_head: ParamId,
    pub b_head: ParamId,
    /// Free output table `[num_entities, d]` when scoring is untied.
    pub entity_out: Option<ParamId>,
}

/// Embedding table sizes fixed by the vocabulary and dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSizes {
    /// Entities with labels; MASK and PAD follow.
    pub num_entities: usize,
    pub entity_rows: usize,
    pub relation_rows: usize,
    /// Longest token sequence the decoder accepts.
    pub max_len: usize,
}

impl TableSizes {
    pub fn from_vocab(vocab: &crate::data::Vocab, max_qualifiers: usize) -> Self {
        Self {
            num_entities: vocab.num_entities(),
            entity_rows: vocab.entity_rows(),
            relation_rows: vocab.relation_rows(),
            max_len: 3 + 2 * max_qualifiers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with the Glorot bound for the given fan sum.
    Glorot,
    /// Uniform with per-entry variance `1/d`, giving rows of unit-scale norm.
    Embedding,
    Zeros,
    Ones,
}

/// Registers every parameter, asking `make` for the initial values.
fn layout(
    config: &ModelConfig,
    sizes: &TableSizes,
    mut make: impl FnMut(&str, &[usize], Init) -> Tensor,
) -> (ParamStore, ParamIds) {
    let d = config.dim;
    let h = config.decoder.hidden;
    let mut store = ParamStore::default();
    let mut add = |name: String, shape: &[usize], init: Init| {
        let t = make(&name, shape, init);
        store.add(name, t)
    };
    let entities = add("entities".into(), &[sizes.entity_rows, d], Init::Embedding);
    let relations = add("relations".into(), &[sizes.relation_rows, d], Init::Embedding);
    let base = (0..config.encoder.base_layers)
        .map(|l| BaseLayerIds {
            w_std: add(format!("base.{l}.w_std"), &[d, d], Init::Glorot),
            w_inv: add(format!("base.{l}.w_inv"), &[d, d], Init::Glorot),
            w_self: add(format!("base.{l}.w_self"), &[d, d], Init::Glorot),
            w_q: add(format!("base.{l}.w_q"), &[d, d], Init::Glorot),
            w_rel: add(format!("base.{l}.w_rel"), &[d, d], Init::Glorot),
        })
        .collect();
    let qual = (0..config.encoder.qual_layers)
        .map(|l| QualLayerIds {
            w_triple: add(format!("qual.{l}.w_triple"), &[3 * d, d], Init::Glorot),
            b_triple: add(format!("qual.{l}.b_triple"), &[d], Init::Zeros),
            w_dir: add(format!("qual.{l}.w_dir"), &[d, d], Init::Glorot),
        })
        .collect();
    let w_parallel = add("w_parallel".into(), &[2 * d, d], Init::Glorot);
    let entity_ln_gain = add("entity_ln.gain".into(), &[d], Init::Ones);
    let entity_ln_bias = add("entity_ln.bias".into(), &[d], Init::Zeros);
    let relation_ln_gain = add("relation_ln.gain".into(), &[d], Init::Ones);
    let relation_ln_bias = add("relation_ln.bias".into(), &[d], Init::Zeros);
    let position_rows = match config.decoder.positions {
        crate::model::PositionKind::Role => crate::decoder::ROLE_COUNT,
        crate::model::PositionKind::Absolute => sizes.max_len,
    };
    let positions = add("positions".into(), &[position_rows, d], Init::Embedding);
    let transformer = (0..config.decoder.layers)
        .map(|l| TransformerLayerIds {
            ln1_gain: add(format!("tf.{l}.ln1.gain"), &[d], Init::Ones),
            ln1_bias: add(format!("tf.{l}.ln1.bias"), &[d], Init::Zeros),
            w_query: add(format!("tf.{l}.w_query"), &[d, d], Init::Glorot),
            b_query: add(format!("tf.{l}.b_query"), &[d], Init::Zeros),
            w_key: add(format!("tf.{l}.w_key"), &[d, d], Init::Glorot),
            b_key: add(format!("tf.{l}.b_key"), &[d], Init::Zeros),
            w_value: add(format!("tf.{l}.w_value"), &[d, d], Init::Glorot),
            b_value: add(format!("tf.{l}.b_value"), &[d], Init::Zeros),
            w_out: add(format!("tf.{l}.w_out"), &[d, d], Init::Glorot),
            b_out: add(format!("tf.{l}.b_out"), &[d], Init::Zeros),
            ln2_gain: add(format!("tf.{l}.ln2.gain"), &[d], Init::Ones),
            ln2_bias: add(format!("tf.{l}.ln2.bias"), &[d], Init::Zeros),
            w_ff1: add(format!("tf.{l}.w_ff1"), &[d, h], Init::Glorot),
            b_ff1: add(format!("tf.{l}.b_ff1"), &[h], Init::Zeros),
            w_ff2: add(format!("tf.{l}.w_ff2"), &[h, d], Init::Glorot),
            b_ff2: add(format!("tf.{l}.b_ff2"), &[d], Init::Zeros),
        })
        .collect();
    let final_ln_gain = add("final_ln.gain".into(), &[d], Init::Ones);
    let final_ln_bias = add("final_ln.bias".into(), &[d], Init::Zeros);
    let w_head = add("head.w".into(), &[d, d], Init::Glorot);
    let b_head = add("head.b".into(), &[d], Init::Zeros);
    let entity_out = (!config.decoder.tied_output)
        .then(|| add("head.entities".into(), &[sizes.num_entities, d], Init::Embedding));
    let ids = ParamIds {
        entities,
        relations,
        base,
        qual,
        w_parallel,
        entity_ln_gain,
        entity_ln_bias,
        relation_ln_gain,
        relation_ln_bias,
        positions,
        transformer,
        final_ln_gain,
        final_ln_bias,
        w_head,
        b_head,
        entity_out,
    };
    (store, ids)
}

/// All learned arrays of a model together with the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub sizes: TableSizes,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, sizes: TableSizes, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let (store, ids) = layout(config, &sizes, |_, shape, init| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Glorot | Init::Embedding => {
                let bound = if init == Init::Embedding {
                    (3.0 / d as f64).sqrt()
                } else {
                    (6.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt()
                };
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape matches data")
            }
        });
        Ok(Self {
            config: config.clone(),
            sizes,
            store,
            ids,
        })
    }

    /// Rebuilds the id layout for `config` and fills it from `store`,
    /// checking names and shapes.
    pub fn from_store(config: &ModelConfig, sizes: TableSizes, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (expected, ids) = layout(config, &sizes, |_, shape, _| Tensor::zeros(shape));
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((en, et), (n, t)) in expected.iter().zip(store.iter()) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} does not match expected {en} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            sizes,
            store,
            ids,
        })
    }
}
