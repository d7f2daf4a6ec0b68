//! Feature maps, samples and their on-disk formats.

mod container;
mod dataset;
mod map;
mod npy;
mod synthetic;

pub use container::{decode_tensor, encode_tensor, read_tensor, write_tensor, Tensor, TensorData};
pub use dataset::{load_split, write_split, DatasetManifest, SampleEntry, Split};
pub use map::{
    read_feature_map, read_mask, write_feature_map, write_mask, AnomalyKind, FeatureMap, Modality, PixelMask,
    SamplePair,
};
pub use npy::{decode_npy_f32, encode_npy_f32};
pub use synthetic::{gen_synthetic_dataset, SynthConfig, SyntheticDataset};
