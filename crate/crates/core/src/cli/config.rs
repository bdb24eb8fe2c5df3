use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Every setting of a run, resolved from defaults, an optional key=value
/// file and command-line overrides (in that order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train.txt`, `valid.txt` and `test.txt`.
    pub data: Option<PathBuf>,
    /// Generate a synthetic graph instead of reading `data`.
    pub synthetic: bool,
    pub generator: SyntheticConfig,
    /// Seed of the synthetic generator, kept apart from the training seed
    /// so seed sweeps share one dataset.
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Also report train-split metrics after training.
    pub eval_train: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synthetic: false,
            generator: SyntheticConfig::default(),
            data_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_train: true,
            out: PathBuf::from("runs/latest"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_enum<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T> {
    value.parse()
}

fn optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// Names accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "data",
    "synthetic",
    "entities",
    "relations",
    "statements",
    "qual_frac",
    "max_qualifiers",
    "values_per_attribute",
    "data_seed",
    "dim",
    "encoder_mode",
    "base_layers",
    "qual_layers",
    "mix",
    "alpha",
    "encoder_dropout",
    "parallel_dropout",
    "encoder_activation",
    "strict_alpha",
    "degree_norm",
    "decoder_layers",
    "heads",
    "hidden",
    "decoder_dropout",
    "positions",
    "output_activation",
    "ffn_activation",
    "tied_output",
    "epochs",
    "lr",
    "lr_decay",
    "batch_size",
    "label_smoothing",
    "smoothing",
    "beta",
    "clip_norm",
    "seed",
    "valid_every",
    "eval_batch",
    "filter",
    "eval_train",
    "out",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        let tr = &mut self.train;
        let k = key.as_str();
        match k {
            "data" => self.data = Some(PathBuf::from(v)),
            "synthetic" => self.synthetic = parse(k, v)?,
            "entities" => self.generator.entities = parse(k, v)?,
            "relations" => self.generator.relations = parse(k, v)?,
            "statements" => self.generator.statements = parse(k, v)?,
            "qual_frac" => self.generator.qualifier_fraction = parse(k, v)?,
            "max_qualifiers" => self.generator.max_qualifiers = parse(k, v)?,
            "values_per_attribute" => self.generator.values_per_attribute = parse(k, v)?,
            "data_seed" => self.data_seed = parse(k, v)?,
            "dim" => self.model.dim = parse(k, v)?,
            "encoder_mode" => enc.mode = parse_enum(v)?,
            "base_layers" => enc.base_layers = parse(k, v)?,
            "qual_layers" => enc.qual_layers = parse(k, v)?,
            "mix" => enc.mix = parse_enum(v)?,
            "alpha" => enc.alpha = parse(k, v)?,
            "encoder_dropout" => enc.dropout = parse(k, v)?,
            "parallel_dropout" => enc.parallel_dropout = parse(k, v)?,
            "encoder_activation" => enc.activation = parse_enum(v)?,
            "strict_alpha" => enc.strict_alpha = parse(k, v)?,
            "degree_norm" => enc.degree_norm = parse(k, v)?,
            "decoder_layers" => dec.layers = parse(k, v)?,
            "heads" => dec.heads = parse(k, v)?,
            "hidden" => dec.hidden = parse(k, v)?,
            "decoder_dropout" => dec.dropout = parse(k, v)?,
            "positions" => dec.positions = parse_enum(v)?,
            "output_activation" => dec.output_activation = parse_enum(v)?,
            "ffn_activation" => dec.ffn_activation = parse_enum(v)?,
            "tied_output" => dec.tied_output = parse(k, v)?,
            "epochs" => tr.epochs = parse(k, v)?,
            "lr" => tr.learning_rate = parse(k, v)?,
            "lr_decay" => tr.lr_decay = optional(k, v)?,
            "batch_size" => tr.batch_size = parse(k, v)?,
            "label_smoothing" => tr.label_smoothing = parse(k, v)?,
            "smoothing" => tr.smoothing = parse_enum(v)?,
            "beta" => tr.beta = parse(k, v)?,
            "clip_norm" => tr.clip_norm = optional(k, v)?,
            "seed" => tr.seed = parse(k, v)?,
            "valid_every" => tr.valid_every = parse(k, v)?,
            "eval_batch" => tr.eval_batch = parse(k, v)?,
            "filter" => tr.filter = parse_enum(v)?,
            "eval_train" => self.eval_train = parse(k, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a key=value file: one assignment per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: format!("expected key=value, got {line:?}"),
                });
            };
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.synthetic == self.data.is_some() {
            return Err(Error::Config("give exactly one of a data directory or synthetic".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// The dataset and its SHA-256 content hash.
    pub fn load_data(&self) -> Result<(Dataset, String)> {
        match &self.data {
            Some(dir) if !self.synthetic => Ok((Dataset::load_dir(dir)?, Dataset::hash_dir(dir)?)),
            _ => {
                let data = generate_synthetic(&self.generator, self.data_seed)?;
                let hash = data.content_hash();
                Ok((data, hash))
            }
        }
    }
}

/// Written next to every run's outputs; enough to rebuild the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub data_hash: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
