//! End-to-end compression of a feedforward network into estimator codes.

pub mod bounds;
pub mod layers;
pub mod network;
pub mod pipeline;

pub use bounds::{adl_theoretical, covering_log_size, generalization_bound, AdlBudget};
pub use layers::{compress_activation_layer, compress_linear_layer, TaylorBudget};
pub use network::{NetworkClass, NetworkSpec, SampleSet};
pub use pipeline::{
    compress_network, run_compression, CompressionPlan, CompressionReport, CompressorConfig, NetworkCompressor,
    RunOptions, SeedMode,
};
