//! Episodes, ingestion, preprocessing, splitting and synthetic data.

mod episode;
mod ingest;
mod preprocess;
mod split;
mod synthetic;

pub use episode::{ChannelStats, DatasetManifest, Episode, EpisodeId, Label, Split, PAD_VALUE};
pub use ingest::{load_dataset, DatasetFormat};
pub use preprocess::{
    pad_and_mask, quantize_sensor_levels, smooth_moving_average, train_channel_stats,
    zscore_normalize, MIN_STD,
};
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticSpec};
