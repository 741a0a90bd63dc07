//! Shared fixtures for the criterion benchmarks: a small model with a live
//! output head and a matching prompt schedule, so every benchmark measures
//! the same generation problem.

use futurecast_core::rng::{normal_tensor, substream};
use futurecast_core::sampler::{CacheMode, SamplerConfig};
use futurecast_core::{ModelConfig, ModelParams, PromptSchedule, Tensor};

pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        model_dim: 16,
        layers: 2,
        heads: 2,
        tokens_per_frame: 1,
        vocab: 32,
        mlp_hidden: 32,
    }
}

/// Random weights with a non-zero output head, so generated frames depend on
/// the model input rather than collapsing to the residual path.
pub fn bench_model(seed: u64) -> ModelParams {
    let config = bench_model_config();
    let mut params = ModelParams::init(&config, &mut substream(seed, "bench-params"))
        .expect("valid bench config");
    let mut head = substream(seed, "bench-head");
    params.out_proj_w = normal_tensor(&mut head, &[config.model_dim, config.latent_dim], 0.0, 0.3);
    params.out_proj_b = normal_tensor(&mut head, &[config.latent_dim], 0.0, 0.1);
    params
}

/// One segment per quarter of the video, tokens drawn from the model vocab.
pub fn bench_prompts(total_frames: usize) -> PromptSchedule {
    let quarter = (total_frames / 4).max(1);
    let mut segments = Vec::new();
    let mut start = 0;
    let mut step = 8;
    while start < total_frames {
        let end = (start + quarter).max(start + 1).min(total_frames);
        segments.push(futurecast_core::model::PromptSegment {
            frame_start: start,
            frame_end: end,
            tokens: vec![step],
        });
        start = end;
        step = 8 + (step - 7) % 8;
    }
    PromptSchedule {
        global_tokens: vec![1],
        segments,
    }
}

pub fn bench_conditioning(seed: u64) -> Tensor {
    let config = bench_model_config();
    normal_tensor(
        &mut substream(seed, "bench-conditioning"),
        &[config.tokens_per_frame, config.latent_dim],
        0.0,
        1.0,
    )
}

pub fn bench_sampler(total_frames: usize, cache_mode: CacheMode) -> SamplerConfig {
    SamplerConfig {
        total_frames,
        cache_mode,
        ..SamplerConfig::default()
    }
}
