//! Task configurations, synthetic channel datasets and their file format.

mod config;
mod dataset;
mod generate;
mod io;

pub use config::{
    resolve_config, snr_to_sigma2, ArrayGeometry, ChannelModel, Fraction, GeometricParams, NoiseModel,
    ResolvedTask, TaskConfig,
};
pub use dataset::{ChannelDataset, DatasetView, DEFAULT_TRAIN_FRACTION};
pub use generate::{
    complex_gaussian, gen_geometric, gen_rayleigh, generate, planar_steering_vector, sample_rng, steering_vector,
    user_channel,
};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
