//! Volume files, dataset manifests, synthetic phantoms and training tiles.

mod manifest;
mod phantom;
mod tiles;
mod vvol;

pub use manifest::{Manifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, LesionKind, LesionRecipe, PhantomSpec};
pub use tiles::{output_region, sample_training_tile, TrainingTile};
pub use vvol::{
    decode_labels_vvol, decode_vvol, encode_labels_vvol, encode_vvol, read_labels_vvol, read_vvol,
    read_vvol_header, write_labels_vvol, write_vvol, VvolDType, VvolHeader, VVOL_HEADER_LEN,
    VVOL_MAGIC, VVOL_VERSION,
};
