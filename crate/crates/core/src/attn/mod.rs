//! Temporal and trajectory attention kernels.
//!
//! Features are stored in 32 or 64 bit ([`Scalar`]); softmax reductions and
//! scatter sums always accumulate in `f64`. The trajectory branch samples
//! features along trajectories, attends along frames with masked keys,
//! projects out and averages the results back onto the grid. Its output is
//! added to the temporal attention output as a residual.

pub mod grad;
mod ops;
mod stats;
mod tensor;

pub use ops::{
    back_project, denoising_loss, frame_attention, frame_attention_maps, full_spacetime_attention,
    fuse, init_branch_from_temporal, latent_cell, linear_project, sample_along_trajectories,
    temporal_attention, trajectory_branch, AttentionMaps, SPACETIME_TOKEN_BUDGET,
};
pub use stats::{attention_stats, AttentionStats, ROW_SUM_TOL};
pub use tensor::{
    AttentionWeights, BackProjection, Channels, DenoisingBatch, FeatureVolume, Scalar,
    SquareMatrix, TokenTensor, TrajFeatures, DEFAULT_HEADS,
};
