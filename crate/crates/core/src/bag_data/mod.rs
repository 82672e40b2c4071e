//! Weakly labeled dataset model: crops grouped into identity-labeled bags.

mod manifest;
mod noise;
mod split;
mod stats;

pub use manifest::{
    load_manifest, save_manifest, validate_manifest, BagRecord, CropRecord, DataRef,
    DatasetManifest, Violation,
};
pub use noise::{
    generate_synthetic_weak_labels, noise_for_factor, NoiseSpec, MAX_DUPLICATION_FACTOR,
};
pub use split::{split_dataset, train_label_count};
pub use stats::{compute_bag_statistics, BagStatistics};
