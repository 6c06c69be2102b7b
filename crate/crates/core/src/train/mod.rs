//! Adam training loop, checkpoints, run manifests and ablation harnesses.

pub mod ablation;
pub mod config;
pub mod optim;
pub mod trainer;

pub use ablation::{ablate_scale, ablate_upsampling, ScaleAblation, UpsampleAblation};
pub use config::{RunConfig, CONFIG_VERSION};
pub use optim::{adam_step, AdamState, OptimConfig, WeightDecayMode};
pub use trainer::{
    argmax_masks, normalize_image, predict_masks, sha256_hex, stack_images, CheckpointRecord, RunManifest, Split,
    SplitKind, Trainer,
};
