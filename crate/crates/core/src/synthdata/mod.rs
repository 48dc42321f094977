//! Synthetic graded-lesion images, view augmentation, preference pairs, and
//! the SEVD dataset file format.

mod augment;
mod generate;
mod io;
mod pairs;

pub use augment::{augment, AugmentSpec};
pub use generate::{
    benchmark_dataset, generate_dataset, nominal_contrast, nominal_radius, split_dataset, Dataset, SampleRecord, Split,
    BENCHMARK_CLASSES, BENCHMARK_PER_CLASS, BENCHMARK_SEED, BENCHMARK_SIZE,
};
pub use io::{
    decode_dataset, encode_dataset, read_dataset, record_bytes, write_dataset, DATASET_HEADER_BYTES, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use pairs::{sample_pairs, PreferencePair};
