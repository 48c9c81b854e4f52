//! Dataset synthesis, long-tail shaping, auxiliary split, client partition
//! and file I/O.

pub mod dataset;
pub mod io;
pub mod longtail;
pub mod partition;
pub mod synth;

pub use dataset::{make_unlabeled, LabeledDataset, UnlabeledDataset};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, Dataset};
pub use longtail::{shape_long_tail, split_aux, LongTailSpec};
pub use partition::{dirichlet_partition, largest_remainder, sample_dirichlet, Partition, PartitionSpec};
pub use synth::{generate_synthetic, GaussianClusters, SyntheticSpec};
