//! The learned odometry network.
//!
//! Set abstraction turns each scan into keypoints with local features, a flow
//! embedding pairs the two scans, a transformer encoder-decoder mixes the
//! tokens, and a pooled head regresses the relative pose as a dual quaternion.

pub mod config;
pub mod encoding;
pub mod flow;
mod head;
mod layers;
pub mod model;
pub mod sa;
pub mod train;
mod transformer;

#[cfg(test)]
mod tests;

pub use config::{FlowMethod, NetConfig, PeMethod};
pub use encoding::positional_encode;
pub use flow::{irfe_tokens, knn_flow_embed, knn_groups};
pub use model::{
    cross_attention_maps, forward_batch, init_network, loss_on_graph, network_specs, prepare_pair,
    prepare_pairs, AttentionMap, Eliot, ForwardOut, LossVars, Prediction, PreparedPair,
};
pub use sa::{prepare_cloud, set_abstraction, FeatureSet, PreparedCloud};
pub use train::{
    pose_error, synth_pairs, LrSchedule, StepStats, TrainConfig, TrainSample, Trainer,
};
