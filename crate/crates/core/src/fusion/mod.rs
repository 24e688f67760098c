//! Quality-gated hierarchical fusion.
//!
//! Per batch: project each modality, score its quality, gate it against a
//! quality-weighted global context, exchange information across modalities,
//! route tokens through a mixture of experts, encode, and pool with several
//! learnable queries whose classifier logits are averaged.

mod attention;
mod model;
mod moe;
mod quality;

pub use attention::{attend, head_indicator, CrossModalAttention, CrossModalOutput, TokenSelfAttention};
pub use model::{EncoderBlock, FusionConfig, FusionForward, FusionInput, FusionModel};
pub use moe::{Expert, MoELayer, MoEOutput};
pub use quality::{gate, global_context, quality_entropy, quality_neural, quality_score, quality_stats, QualityEma, Q_MAX, Q_MIN};
