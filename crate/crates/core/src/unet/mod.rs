//! The U-shaped network: configuration and tiling arithmetic, parameter
//! initialization, forward/backward orchestration and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    checkpoint_dtype, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{InitScheme, LayerKind, LayerSpec, ModelConfig};
pub use model::{Gradients, Model, Tape};
