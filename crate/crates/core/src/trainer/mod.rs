//! Sample construction, the balanced masking objective, Adam and the
//! training loop.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityId, Split, Statement, Vocab};
use crate::decoder::{build_sequence, decode, MaskTarget, Task, TokenSequence};
use crate::encoder::{encode, EncoderGraph};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, FilterIndex, FilterLevel};
use crate::model::{Bound, ForwardCtx, ModelConfig, ModelParams, ParamStore, TableSizes};
use crate::tensor::{Tape, Tensor, Var};

/// How label smoothing spreads target mass over the wrong entities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    /// `1 - eps` on the gold, `eps / |V|` elsewhere.
    #[default]
    Distribution,
    /// `1 - eps` on the gold, `eps` elsewhere (expected target under label flips).
    Flip,
}

impl std::str::FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distribution" => Ok(Self::Distribution),
            "flip" => Ok(Self::Flip),
            _ => Err(Error::Config(format!("unknown smoothing {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch decay; `None` keeps the rate fixed.
    pub lr_decay: Option<f64>,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub smoothing: Smoothing,
    /// Weight of the qualifier-entity loss.
    pub beta: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Validate every this many epochs (0 disables validation).
    pub valid_every: usize,
    pub eval_batch: usize,
    pub filter: FilterLevel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-4,
            lr_decay: Some(0.9975),
            batch_size: 128,
            label_smoothing: 0.2,
            smoothing: Smoothing::Distribution,
            beta: 0.5,
            clip_norm: Some(1.0),
            seed: 0,
            valid_every: 1,
            eval_batch: 256,
            filter: FilterLevel::Statement,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing = {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("lr decay {d} outside (0, 1]")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Learning rate during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.powi(epoch as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainSample {
    pub statement: usize,
    pub target: MaskTarget,
}

impl TrainSample {
    pub fn task(&self) -> Task {
        self.target.task()
    }
}

/// Object and subject samples for every statement, and one sample per
/// qualifier value when `with_qualifiers`.
pub fn make_samples(statements: &[Statement], with_qualifiers: bool) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for (i, s) in statements.iter().enumerate() {
        for target in [MaskTarget::Object, MaskTarget::Subject] {
            out.push(TrainSample { statement: i, target });
        }
        if with_qualifiers {
            out.extend((0..s.qualifiers.len()).map(|j| TrainSample {
                statement: i,
                target: MaskTarget::Qualifier(j),
            }));
        }
    }
    out
}

/// A sample with its masked sequence and gold entity.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seq: TokenSequence,
    pub gold: EntityId,
    pub task: Task,
}

pub fn prepare(vocab: &Vocab, statements: &[Statement], samples: &[TrainSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let (seq, gold) = build_sequence(vocab, &statements[s.statement], s.target)?;
            Ok(Prepared {
                seq,
                gold,
                task: s.task(),
            })
        })
        .collect()
}

/// Smoothed one-vs-all targets `[golds, num_entities]`.
pub fn smoothed_targets(golds: &[EntityId], num_entities: usize, eps: f64, kind: Smoothing) -> Result<Tensor> {
    let off = match kind {
        Smoothing::Distribution => eps / num_entities as f64,
        Smoothing::Flip => eps,
    };
    let mut t = Tensor::filled(&[golds.len(), num_entities], off);
    for (i, &g) in golds.iter().enumerate() {
        if g >= num_entities {
            return Err(Error::Contract(format!("gold {g} is not a labelled entity")));
        }
        t.row_mut(i)[g] = 1.0 - eps;
    }
    Ok(t)
}

/// Per-sample binary cross-entropy `[batch]` of `sigmoid(logits)` against
/// smoothed targets, averaged over entities.
pub fn bce_loss(tape: &mut Tape, logits: Var, golds: &[EntityId], eps: f64, kind: Smoothing) -> Result<Var> {
    let n = tape.shape(logits)[1];
    let targets = smoothed_targets(golds, n, eps, kind)?;
    tape.bce_with_logits(logits, &targets)
}

/// Weights giving `mean(base) + beta * mean(qual)` over a batch.
pub fn task_weights(tasks: &[Task], beta: f64) -> Vec<f64> {
    let nb = tasks.iter().filter(|&&t| t == Task::Base).count();
    let nq = tasks.len() - nb;
    tasks
        .iter()
        .map(|t| match t {
            Task::Base => 1.0 / nb as f64,
            Task::Qual => beta / nq as f64,
        })
        .collect()
}

/// `mean(base) + beta * mean(qual)`; an empty group contributes zero.
pub fn total_loss(base: &[f64], qual: &[f64], beta: f64) -> f64 {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    mean(base) + beta * mean(qual)
}

/// Scalar training objective of `batch` on a tape whose parameters are `bound`.
pub fn batch_objective(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    graph: &EncoderGraph,
    batch: &[Prepared],
    config: &TrainConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let encoded = encode(tape, graph, params, bound, ctx)?;
    let seqs: Vec<TokenSequence> = batch.iter().map(|p| p.seq.clone()).collect();
    let logits = decode(tape, params, bound, &encoded, &seqs, ctx)?;
    let golds: Vec<EntityId> = batch.iter().map(|p| p.gold).collect();
    let losses = bce_loss(tape, logits, &golds, config.label_smoothing, config.smoothing)?;
    let tasks: Vec<Task> = batch.iter().map(|p| p.task).collect();
    tape.weighted_sum(losses, &task_weights(&tasks, config.beta))
}

/// Objective value and gradients for every parameter (zeros where unused).
pub fn loss_and_grads(
    params: &ModelParams,
    graph: &EncoderGraph,
    batch: &[Prepared],
    config: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape);
    let mut ctx = match rng {
        Some(r) => ForwardCtx::train(r),
        None => ForwardCtx::eval(),
    };
    let loss = batch_objective(&mut tape, params, &bound, graph, batch, config, &mut ctx)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.store.tensors())
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without validation).
    pub params: ModelParams,
    pub last: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Largest qualifier count in any split.
pub fn max_qualifiers(data: &Dataset) -> usize {
    data.all().map(|s| s.qualifiers.len()).max().unwrap_or(0)
}

/// Trains on `data.train`, validating on `data.valid`. `on_epoch` sees
/// every log line as it is produced.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocab = &data.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sizes = TableSizes::from_vocab(vocab, max_qualifiers(data));
    let mut params = ModelParams::init(model, sizes, &mut rng)?;
    let graph = EncoderGraph::new(vocab, &data.train);
    let samples = make_samples(&data.train, config.beta > 0.0);
    let prepared = prepare(vocab, &data.train, &samples)?;
    let all: Vec<Statement> = data.all().cloned().collect();
    let index = FilterIndex::build(vocab, &all, config.filter);
    let eval_opts = EvalOptions {
        batch_size: config.eval_batch,
        qualifier_task: false,
        objects_only: false,
    };
    let mut adam = Adam::new(&params.store);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Prepared> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let diagnose = |what: String, store: &ParamStore| {
                Error::Numeric(format!(
                    "{what} at epoch {epoch}, batch {b}; parameter norm {:.6e}",
                    store.total_norm()
                ))
            };
            let (loss, mut grads) = match loss_and_grads(&params, &graph, &batch, config, Some(&mut rng)) {
                Err(Error::Numeric(msg)) => return Err(diagnose(msg, &params.store)),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(diagnose(format!("non-finite loss {loss}"), &params.store));
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam.step(&mut params.store, &grads, lr);
            total += loss;
            batches += 1;
        }
        let validate = config.valid_every > 0
            && !data.valid.is_empty()
            && ((epoch + 1) % config.valid_every == 0 || epoch + 1 == config.epochs);
        let val_mrr = if validate {
            let ev = evaluate(&params, &graph, vocab, &data.valid, &index, Split::Valid, &eval_opts)?;
            Some(ev.base.mrr)
        } else {
            None
        };
        if let Some(mrr) = val_mrr {
            if best.as_ref().map_or(true, |(b, _, _)| mrr > *b) {
                best = Some((mrr, epoch, params.clone()));
            }
        }
        let line = EpochLog {
            epoch,
            loss: total / batches as f64,
            val_mrr,
            lr,
        };
        on_epoch(&line);
        log.push(line);
    }
    let last_epoch = config.epochs.saturating_sub(1);
    let (params_best, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params.clone(), last_epoch),
    };
    Ok(TrainOutcome {
        params: params_best,
        last: params,
        best_epoch,
        log,
    })
}
