//! Spatial-temporal correlation network components at desk scale.
//!
//! Layers are built on a small dense tensor engine with reverse-mode
//! differentiation ([`autodiff`]). Video features use a `[T, C, H, W]`
//! frame-major layout throughout.

pub mod autodiff;
pub mod conv;
pub mod correlation;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod identification;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod temporal_attention;
pub mod tensor;

pub use autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
pub use conv::{conv_nd, ConvSpec, Padding};
pub use correlation::{
    correlation_maps, legacy_pairwise_affinity, sample_neighbors, trajectory_features, AffinityVolume,
    CompactDescriptor, CorrelationMaps, CorrelationParams, CorrelationVars, NeighborSet,
};
pub use error::{Error, Result};
pub use gradcheck::{grad_check_fd, GradCheckReport};
pub use identification::{fuse_trajectories, IdentificationConfig, IdentificationParams};
pub use metrics::{bleu, rouge_l, wer, WerBreakdown};
pub use model::{CorrNet, GlossSequence, ModelConfig, Vocabulary};
pub use ops::{pool_spatial, softmax_lastaxis, PoolMode};
pub use temporal_attention::{apply_temporal_attention, TemporalAttentionConfig, TemporalAttentionParams};
pub use tensor::{Scalar, Tensor};
