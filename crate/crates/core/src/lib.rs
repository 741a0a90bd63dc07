//! futurecast-core: streaming latent-video generation on a synthetic
//! procedural world.
//!
//! The crate trains a small diffusion transformer to emit low-dimensional
//! "video" latents chunk by chunk, optionally guided by keyframes it predicts
//! for its own future, and evaluates how well the stream tracks the world
//! that produced the data. Everything is self-contained: dense f64 tensors
//! with reverse-mode autodiff ([`tensor`]), attention admissibility masks
//! ([`masks`]), the transformer itself ([`model`]), a bounded dual-region
//! key/value cache for streaming attention ([`kvcache`]), flow-matching
//! noise machinery ([`diffusion`]), the streaming rollout loop ([`sampler`]),
//! the three-stage training pipeline ([`training`]), and the procedural world
//! plus its oracle metrics ([`procworld`]).

pub mod diffusion;
pub mod kvcache;
pub mod masks;
pub mod model;
pub mod procworld;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use diffusion::StepSchedule;
pub use kvcache::{CacheEntry, DualRegionKVCache};
pub use masks::{AttentionMask, SegmentMap, SpanSpec};
pub use model::{LatentVideo, ModelConfig, ModelParams, NoiseLevels, PromptSchedule};
pub use procworld::{DriftReport, Episode, WorldSpec};
pub use sampler::{
    CacheMode, GuidanceMode, PromptUpdate, SamplerConfig, StreamEvent, StreamOutput, StreamState,
};
pub use tensor::{Gradients, Graph, NodeId, Tensor, TensorError};
pub use training::{
    DiscriminatorParams, KfProbePoint, TrainConfig, TrainError, TrainReport, TrainStage,
};
