//! Datasets, synthetic generation, partitioning and splits.

mod csv;
mod dataset;
mod partition;
mod synthetic;

pub use csv::{load_csv, parse_csv, to_csv, write_csv};
pub use dataset::{ClientShard, Dataset};
pub use partition::{
    dirichlet_partition, largest_remainder, partition_indices, sample_dirichlet, split_eval,
    split_local, PartitionSpec,
};
pub use synthetic::{class_direction, gen_synthetic};
