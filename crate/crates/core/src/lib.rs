//! Hybrid ANN-to-SNN training with iterative timestep reduction.
//!
//! A batch-normalized ANN is trained, converted into a leaky
//! integrate-and-fire network with percentile-balanced thresholds, and then
//! fine-tuned with surrogate-gradient BPTT at a descending sequence of
//! timestep counts, each stage initialized from the previous one.

pub mod analysis;
pub mod ann;
pub mod bptt;
pub mod checkpoint;
pub mod conversion;
pub mod data;
pub mod error;
pub mod iir;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod schedule;
pub mod snn;
pub mod tensor;

pub use analysis::{
    ann_ops_count, energy_ratio_alpha, magnitude_prune, memory_access_count, spike_rates, EnergyModel, MemoryAccess,
    OpsCount, PruneMask, SpikeRateReport,
};
pub use ann::{evaluate_ann, train_ann, AnnParams, AnnTrainConfig, BatchNorm};
pub use bptt::{bptt_backward, surrogate_grad, train_snn, ResetGradient, SnnGrads, SnnTrainConfig, SurrogateConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, StageCheckpoint};
pub use conversion::{convert, fuse_batchnorm, ConversionConfig, SnnParams};
pub use data::{Dataset, DatasetHandle};
pub use error::{Error, Result};
pub use iir::{direct_transition_probe, run_iir, IirConfig, IirSchedule};
pub use network::{ConvSpec, LayerSpec, NetworkSpec};
pub use snn::{evaluate_snn, infer, lif_step, snn_forward};
pub use tensor::Tensor;
