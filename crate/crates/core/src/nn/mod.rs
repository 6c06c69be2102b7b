//! Network layers and the full segmentation model.

pub mod attention;
pub mod block;
pub mod config;
pub mod decoder;
pub mod layers;
pub mod model;
pub mod params;

pub use attention::{relative_bias_index, relative_offset_index, MultiHeadAttention, PositionAttention};
pub use block::TransformerBlock;
pub use config::{split_sizes, Activation, GsaMode, ModelConfig, UpsampleMode};
pub use decoder::DecoderStage;
pub use model::{ForwardOptions, PatchEmbedding, VitbisModel};
pub use params::{Bound, Init, ParamId, ParamStore};
