//! Dataset ingestion, batching and the synthetic hierarchical generator.

mod batch;
pub mod cifar;
mod synth;

pub use batch::{augment_image, Batch, BatchStream, Normalization};
pub use cifar::{
    check_coarse_consistency, read_cifar100_bin, subset, write_cifar100_bin, ConsistencyReport,
};
pub use synth::{synth_hier_dataset, SynthSpec};

/// One image with its labels. Pixels are 3 row-major `size × size` planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub image: Vec<u8>,
    pub size: usize,
    pub finer_label: usize,
    /// Coarse label stored in the source file, when the format carries one.
    pub coarse_label: Option<usize>,
}

impl DatasetRecord {
    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.image[(channel * self.size + row) * self.size + col]
    }
}
