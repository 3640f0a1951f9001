//! The dehazing network: a learned (or fixed) input stage, an `r x c` grid
//! of residual dense blocks joined by strided-conv scale changes and
//! attention fusion, and an output stage.

pub mod config;
pub mod model;
pub mod params;

pub use config::{
    apply_ablation, Ablation, AttentionMode, BlockKind, ColumnLink, GridConfig, Head, InputMode, Routing,
};
pub use model::{
    downsample, forward, fuse, mask_to_encoder_decoder, rdb_forward, residual_forward, upsample, JunctionTrace, Model,
    NetOutput,
};
pub use params::{build, layout, parameter_count, validate_params, Bound, Init, ModelParams, ParamSpec};
