//! Class profiles, the synthetic conversation generator, temporal pooling,
//! and the binary feature container.

mod container;
mod generator;
mod profile;
mod sample;

pub use container::{decode_feature_container, encode_feature_container, load_feature_container, write_feature_container, FeatureSet};
pub use generator::{allocate_counts, gen_synthetic_dataset, FaceScene, FaceTrack, Split, SyntheticConfig, SyntheticDataset};
pub use profile::{iemocap_profile, meld_profile, ClassProfile, IEMOCAP_CLASSES, IEMOCAP_COUNTS, MELD_CLASSES, MELD_COUNTS};
pub use sample::{group_conversations, is_held_out, temporal_pool, ConversationSample, Dims, FrameBlock, Modality};
