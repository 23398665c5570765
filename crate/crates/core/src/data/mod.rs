//! Skeleton sequences, the JSON-lines dataset format, preprocessing and the
//! synthetic dataset generator.

mod format;
mod preprocess;
mod sequence;
pub mod synthetic;

pub use format::{parse_dataset, parse_dataset_str, write_dataset, write_dataset_string, FORMAT_VERSION};
pub use preprocess::{
    batch_to_tensor, clip_indices, compute_velocity, prepare_clip, random_rotation_augment, rotate_sequence,
    rotation_matrix, sample_clips, sequence_rng, sequence_to_tensor, split_multi_person,
    translate_to_reference, MultiPersonSequence,
};
pub use sequence::{DatasetManifest, Joint, SkeletonSequence, Split};
pub use synthetic::{generate_synthetic, MotionTemplate, SyntheticConfig};
