//! Model configuration, parameters and the end-to-end forward pass.

mod config;
mod ctx;
mod params;

pub use config::{
    Activation, Composition, DecoderConfig, EncoderConfig, EncoderMode, ModelConfig,
    PositionKind, QualifierMix,
};
pub use ctx::ForwardCtx;
pub use params::{
    BaseLayerIds, Bound, Init, ModelParams, ParamId, ParamIds, ParamStore, QualLayerIds,
    TableSizes, TransformerLayerIds,
};
