//! Contrast enhancement, intensity windowing, resampling, augmentation and
//! loss weight maps.

mod clahe;
mod intensity;
mod pipeline;
mod spatial;
mod weights;

pub use clahe::{clahe_slice, clahe_volume, ClaheParams};
pub use intensity::{apply_mask, intensity_jitter, normalize_intensity, threshold_roi};
pub use pipeline::{Pipeline, Step};
pub use spatial::{
    affine_image, affine_labels, deform_image, deform_labels, elastic_deform, random_affine,
    resize_labels, resize_volume, AffineParams, DeformField,
};
pub use weights::{
    class_balance_weights, compute_weight_map, connected_components, squared_distance_transform,
    WeightMap, WeightMapParams,
};
