//! Windowed time-series classification datasets.

mod dataset;
mod io;
mod split;
mod synthetic;

pub use dataset::{ChannelStats, SplitKind, TimeSeriesDataset};
pub use io::{load_dataset, load_splits, read_split_raw, write_dataset_dir, DatasetMeta, SplitCounts};
pub use split::{split_dataset, split_indices, stratified_order, subsample_labels, SplitSpec, Subsample};
pub use synthetic::{generate_synthetic, SyntheticSpec};
