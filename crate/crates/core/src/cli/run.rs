use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::cli::config::RunConfig;
use crate::data::{Dataset, Split, Statement};
use crate::encoder::EncoderGraph;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, Evaluation, FilterIndex, FilterLevel, Metrics};
use crate::model::{EncoderMode, ModelParams};
use crate::trainer::{train, EpochLog, TrainOutcome};

/// Filtered evaluation of `params` on one split, including qualifier
/// queries. The graph is built from the training split.
pub fn evaluate_split(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    filter: FilterLevel,
    batch_size: usize,
) -> Result<Evaluation> {
    let graph = EncoderGraph::new(&data.vocab, &data.train);
    let all: Vec<Statement> = data.all().cloned().collect();
    let index = FilterIndex::build(&data.vocab, &all, filter);
    let opts = EvalOptions {
        batch_size,
        ..EvalOptions::default()
    };
    evaluate(params, &graph, &data.vocab, data.split(split), &index, split, &opts)
}

fn push_metrics(out: &mut Vec<Metrics>, ev: Evaluation) {
    out.push(ev.base);
    out.extend(ev.qual);
}

#[derive(Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    /// Base (and qualifier, when present) metrics for valid, test and
    /// optionally train, in that order, from the retained parameters.
    pub metrics: Vec<Metrics>,
}

impl TrainReport {
    pub fn find(&self, split: Split, task: crate::decoder::Task) -> Option<&Metrics> {
        self.metrics.iter().find(|m| m.split == split && m.task == task)
    }
}

/// Trains on `data` and evaluates the retained parameters.
pub fn train_and_report(
    config: &RunConfig,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    let outcome = train(&config.model, &config.train, data, on_epoch)?;
    let mut metrics = Vec::new();
    let mut splits = vec![Split::Valid, Split::Test];
    if config.eval_train {
        splits.push(Split::Train);
    }
    for split in splits {
        if data.split(split).is_empty() {
            continue;
        }
        let ev = evaluate_split(&outcome.params, data, split, config.train.filter, config.train.eval_batch)?;
        push_metrics(&mut metrics, ev);
    }
    Ok(TrainReport { outcome, metrics })
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Appends one JSON line per epoch to `path`.
pub(crate) struct EpochWriter {
    file: BufWriter<File>,
    path: std::path::PathBuf,
    failed: Option<std::io::Error>,
}

impl EpochWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
            path: path.to_owned(),
            failed: None,
        })
    }

    pub fn write(&mut self, line: &EpochLog) {
        if self.failed.is_some() {
            return;
        }
        let text = serde_json::to_string(line).expect("epoch log serializes");
        if let Err(e) = writeln!(self.file, "{text}").and_then(|_| self.file.flush()) {
            self.failed = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        match self.failed.take() {
            Some(e) => Err(Error::io(&self.path, e)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o qual-mask")]
    NoMask,
    #[serde(rename = "w/o qual-agg")]
    NoAgg,
    #[serde(rename = "w/o qual-agg & mask")]
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMask, Variant::NoAgg, Variant::NoBoth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "w/o qual-mask",
            Variant::NoAgg => "w/o qual-agg",
            Variant::NoBoth => "w/o qual-agg & mask",
        }
    }

    /// `base` with this variant's components removed.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        if matches!(self, Variant::NoMask | Variant::NoBoth) {
            c.train.beta = 0.0;
        }
        if matches!(self, Variant::NoAgg | Variant::NoBoth) {
            c.model.encoder.mode = EncoderMode::BaseOnly;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub mrr: f64,
    pub h1: f64,
    pub h10: f64,
    /// Test qualifier-value MRR, when the test split has qualifiers.
    pub qual_mrr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mrr_mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub mrr_std: f64,
    pub h1_mean: f64,
    pub h10_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant for every seed on the same data and reports test
/// metrics.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Ablation> {
    if data.test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for &seed in seeds {
            let mut c = variant.apply(base);
            c.train.seed = seed;
            let outcome = train(&c.model, &c.train, data, |_| {})?;
            let ev = evaluate_split(&outcome.params, data, Split::Test, c.train.filter, c.train.eval_batch)?;
            let row = AblationRow {
                variant,
                seed,
                mrr: ev.base.mrr,
                h1: ev.base.h1,
                h10: ev.base.h10,
                qual_mrr: ev.qual.map(|m| m.mrr),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let summary = Variant::ALL
        .iter()
        .map(|&variant| {
            let of = |f: fn(&AblationRow) -> f64| -> Vec<f64> {
                rows.iter().filter(|r| r.variant == variant).map(f).collect()
            };
            let (mrr_mean, mrr_std) = mean_std(&of(|r| r.mrr));
            AblationSummary {
                variant,
                runs: seeds.len(),
                mrr_mean,
                mrr_std,
                h1_mean: mean_std(&of(|r| r.h1)).0,
                h10_mean: mean_std(&of(|r| r.h10)).0,
            }
        })
        .collect();
    Ok(Ablation { rows, summary })
}

impl Ablation {
    /// Aligned text table, one line per variant.
    pub fn table(&self) -> String {
        let width = Variant::ALL.iter().map(|v| v.name().len()).max().unwrap_or(0);
        let mut s = format!("{:width$}  {:>17}  {:>6}  {:>6}\n", "variant", "MRR (mean±std)", "H@1", "H@10");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:width$}  {:>8.4} ± {:<6.4}  {:>6.4}  {:>6.4}",
                r.variant.name(),
                r.mrr_mean,
                r.mrr_std,
                r.h1_mean,
                r.h10_mean
            );
        }
        s
    }
}
