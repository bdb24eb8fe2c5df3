use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::UnaryKind;

/// How the two aggregators are composed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Base aggregator, then qualifier aggregator.
    Sequential,
    /// Both aggregators from the input entities, combined by a projection.
    Parallel,
    /// Qualifier aggregator is the identity.
    BaseOnly,
    /// Both aggregators replaced by layer normalization of the tables.
    LayerNormOnly,
    /// Both aggregators are the identity.
    Identity,
}

/// How encoded qualifiers enter a base-aggregator message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualifierMix {
    /// `alpha * phi(h_u, h_r) + (1 - alpha) * h_q`
    QuadMix,
    /// `phi(h_u, alpha * h_r + (1 - alpha) * h_q)`
    StareGamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Rotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn kind(self) -> UnaryKind {
        match self {
            Activation::Identity => UnaryKind::Identity,
            Activation::Tanh => UnaryKind::Tanh,
            Activation::Relu => UnaryKind::Relu,
            Activation::Gelu => UnaryKind::Gelu,
            Activation::Sigmoid => UnaryKind::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionKind {
    /// One embedding per token role (subject, relation, object, qualifier
    /// relation, qualifier entity, pad).
    Role,
    /// One embedding per sequence index.
    Absolute,
}

macro_rules! kebab_from_str {
    ($($ty:ty),*) => {$(
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| {
                    Error::Config(format!("unknown {} {s:?}", stringify!($ty)))
                })
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => f.write_str(&s),
                    _ => write!(f, "{self:?}"),
                }
            }
        }
    )*};
}

kebab_from_str!(EncoderMode, QualifierMix, Composition, Activation, PositionKind);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub base_layers: usize,
    pub qual_layers: usize,
    pub mix: QualifierMix,
    pub composition: Composition,
    /// Weight of the base-triple composition against encoded qualifiers.
    pub alpha: f64,
    pub dropout: f64,
    /// Dropout after the parallel combiner.
    pub parallel_dropout: f64,
    pub activation: Activation,
    /// Apply `alpha` scaling to qualifier-free edges as well.
    pub strict_alpha: bool,
    /// Average messages within each direction bucket instead of summing.
    pub degree_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Sequential,
            base_layers: 2,
            qual_layers: 1,
            mix: QualifierMix::QuadMix,
            composition: Composition::Rotate,
            alpha: 0.7,
            dropout: 0.2,
            parallel_dropout: 0.2,
            activation: Activation::Tanh,
            strict_alpha: false,
            degree_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub positions: PositionKind,
    /// Nonlinearity after the output projection.
    pub output_activation: Activation,
    pub ffn_activation: Activation,
    /// Score against the encoded entity table; otherwise against a free
    /// output table.
    pub tied_output: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 768,
            dropout: 0.1,
            positions: PositionKind::Role,
            output_activation: Activation::Gelu,
            ffn_activation: Activation::Gelu,
            tied_output: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding dimension must be even and positive, got {}",
                self.dim
            )));
        }
        unit_interval("alpha", self.encoder.alpha)?;
        for (name, p) in [
            ("encoder dropout", self.encoder.dropout),
            ("parallel dropout", self.encoder.parallel_dropout),
            ("decoder dropout", self.decoder.dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if self.decoder.heads == 0 || self.dim % self.decoder.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide dimension {}",
                self.decoder.heads, self.dim
            )));
        }
        if self.decoder.hidden == 0 {
            return Err(Error::Config("transformer hidden size must be positive".into()));
        }
        Ok(())
    }
}
