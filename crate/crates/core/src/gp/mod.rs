//! Exact Gaussian-process regression for a single acceleration channel.

mod dataset;
mod io;
mod kernel;
mod model;
mod train;

pub use dataset::GpDataset;
pub use io::{load_channel_file, save_channel_file, ChannelFile, MODEL_FORMAT_VERSION};
pub(crate) use kernel::scaled_sq_dist;
pub use kernel::{
    gram_matrix, kernel_eval, weighted_distance, KernelParams, DEFAULT_JITTER, MAX_JITTER,
    NOISE_STD_FLOOR,
};
pub use model::{GpModel, VARIANCE_TOLERANCE};
pub use train::{train_hyperparams, train_hyperparams_from, TrainConfig};
