//! Dual-branch flow-matching transformer for coupled motion and video latents.

pub mod config;
pub mod flow;
pub mod layers;
pub mod loss;
pub mod model;
pub mod sampler;

pub use config::{Ablation, ModelConfig};
pub use flow::{latent_to_tokens, make_noisy, tokens_to_latent, velocity_target, NoisySample};
pub use loss::{flow_loss, pose_loss, total_loss, LossTerms};
pub use model::{
    clean_prior, first_slice_anchor, fuse_features, prior_gain, regroup_queries, DualModel, ForwardInput, ForwardOutput, Fusion, FUSION_PREFIX, MOTION_PREFIX, POSE_PREFIX,
    VIDEO_PREFIX,
};
pub use sampler::{clip_endpoint, guide, sample, Denoiser, Prediction, SampleOutput, SamplerConfig};

#[cfg(test)]
mod tests;
