//! Inference engine and profiler for EdgeConv-based dynamic graph networks on
//! point clouds.
//!
//! The crate is layered bottom-up: [`tensor`] (dense `f32` kernels), [`knn`]
//! (exact kNN graphs), [`layers`] (MLP, EdgeConv, pooling), [`model`] (the
//! classifier and its quasi-dynamic variants), [`profiler`] (timing and memory
//! accounting) and [`formats`] (point-cloud / weight files).

pub mod error;
pub mod formats;
pub mod knn;
pub mod layers;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use formats::{normalize, read_ecw, read_pcf, synth_cloud, write_ecw, write_pcf, PointCloud};
pub use knn::{knn_bytes, knn_graph, pairwise_sq_distances, IndexMatrix, KnnGraph};
pub use model::{count_knn_invocations, forward, random_weights, ForwardTrace, ModelConfig, Network, Stage, WeightStore};
pub use profiler::{bench, compare_variants, memory_report, sweep_k, BenchPlan, MemoryTable, ProfileReport};
pub use rng::Rng;
pub use tensor::{Tensor, ThreadMode};
