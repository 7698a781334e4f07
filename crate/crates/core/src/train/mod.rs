//! Training loop, loss logging and tiled whole-volume prediction.

mod predict;
mod trainer;

pub use predict::{argmax_labels, predict_volume, tile_origins, Prediction};
pub use trainer::{LossLog, TrainConfig, Trainer, Weighting};
