//! Sample files, the synthetic phenology dataset, dataset manifests and
//! sample transforms.

pub mod manifest;
pub mod record;
pub mod synth;
pub mod transforms;

pub use manifest::{
    assign_splits, generate_synthetic_dataset, DatasetManifest, ManifestEntry, Split,
};
pub use record::{read_sample, write_sample, Labels, SitsRecord};
pub use synth::{DoubleLogistic, Generator, PhenologyClassSpec, SynthConfig};
pub use transforms::{make_classification_sample, split_into_patches};
