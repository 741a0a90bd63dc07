//! The latent-video diffusion transformer.
//!
//! A small pre-LN transformer over per-frame token grids: rotary-encoded
//! masked self-attention (optionally reading a [`DualRegionKVCache`]),
//! temporally-masked cross-attention to prompt tokens, a GELU MLP, and a
//! zero-initialized output head predicting the flow-matching velocity. The
//! same network runs bidirectionally (teacher) or block-causally (student) —
//! the mask is the only difference.
//!
//! All forward passes are recorded on a [`Graph`] tape, so the identical code
//! path serves inference (constants) and training (params with gradients).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kvcache::DualRegionKVCache;
use crate::masks::{AttentionMask, MaskError, Segment, SegmentMap};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("noise levels: expected {expected} frames, got {got}")]
    LevelCount { expected: usize, got: usize },
    #[error("positions: expected {expected} frames, got {got}")]
    PositionCount { expected: usize, got: usize },
    #[error("noise level {value} outside [0,1]")]
    LevelRange { value: f64 },
    #[error("self mask is {rows}x{cols}, need frame-level {t}x{ctx} or token-level {tp}x{ctxp}")]
    SelfMaskShape {
        rows: usize,
        cols: usize,
        t: usize,
        ctx: usize,
        tp: usize,
        ctxp: usize,
    },
    #[error("cross mask is {rows}x{cols}, need {t}x{tokens} (or token-level rows {tp})")]
    CrossMaskShape {
        rows: usize,
        cols: usize,
        t: usize,
        tokens: usize,
        tp: usize,
    },
    #[error("latent video shape {shape:?} does not match (frames, {p} tokens, {d} channels)")]
    VideoShape { shape: Vec<usize>, p: usize, d: usize },
    #[error("prompt token {id} outside vocabulary {vocab}")]
    PromptToken { id: usize, vocab: usize },
    #[error("prompt segments malformed: {reason}")]
    PromptSegments { reason: String },
    #[error("head geometry: {heads} heads x {head_dim} dims != model dim {dim}")]
    HeadGeometry {
        heads: usize,
        head_dim: usize,
        dim: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A run of latent frames: `frames` is `[T, P, d]` (T frames, P tokens per
/// frame, d channels) and `frame_offset` is the absolute stream index of
/// `frames[0]`, which fixes the rotary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: Tensor,
    frame_offset: usize,
}

impl LatentVideo {
    pub fn new(frames: Tensor, frame_offset: usize) -> ModelResult<LatentVideo> {
        if frames.rank() != 3 || frames.shape()[0] == 0 {
            return Err(ModelError::VideoShape {
                shape: frames.shape().to_vec(),
                p: 0,
                d: 0,
            });
        }
        Ok(LatentVideo {
            frames,
            frame_offset,
        })
    }

    /// Frames stacked as a `[T·P, d]` matrix (row = one token).
    pub fn to_matrix(&self) -> Tensor {
        let s = self.frames.shape();
        self.frames
            .reshape(vec![s[0] * s[1], s[2]])
            .expect("rank-3 reshape")
    }

    /// Rebuild from a `[T·P, d]` matrix.
    pub fn from_matrix(m: &Tensor, tokens_per_frame: usize, frame_offset: usize) -> ModelResult<LatentVideo> {
        let s = m.shape();
        if m.rank() != 2 || s[0] % tokens_per_frame != 0 {
            return Err(ModelError::VideoShape {
                shape: s.to_vec(),
                p: tokens_per_frame,
                d: 0,
            });
        }
        LatentVideo::new(
            m.reshape(vec![s[0] / tokens_per_frame, tokens_per_frame, s[1]])?,
            frame_offset,
        )
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_offset(&self) -> usize {
        self.frame_offset
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[2]
    }

    /// One frame as a `[P, d]` matrix.
    pub fn frame(&self, t: usize) -> Tensor {
        let s = self.frames.shape();
        self.frames
            .slice(0, t, 1)
            .and_then(|f| f.reshape(vec![s[1], s[2]]))
            .expect("frame index in range")
    }

    /// Contiguous sub-run `[start, start+len)`, offset adjusted.
    pub fn window(&self, start: usize, len: usize) -> ModelResult<LatentVideo> {
        LatentVideo::new(self.frames.slice(0, start, len)?, self.frame_offset + start)
    }

    /// Absolute rotary position of each frame.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.num_frames()).map(|i| self.frame_offset + i).collect()
    }
}

/// Per-frame noise levels in `[0,1]`; 0 = clean, 1 = pure noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevels {
    t: Vec<f64>,
}

impl NoiseLevels {
    pub fn new(t: Vec<f64>) -> ModelResult<NoiseLevels> {
        for &v in &t {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(ModelError::LevelRange { value: v });
            }
        }
        Ok(NoiseLevels { t })
    }

    pub fn uniform(level: f64, frames: usize) -> ModelResult<NoiseLevels> {
        NoiseLevels::new(vec![level; frames])
    }

    pub fn values(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Prompt conditioning: global task tokens plus per-segment local tokens.
/// Segments are (frame_start, frame_end, token ids); they must be ordered,
/// disjoint, and cover the generation horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSchedule {
    pub global_tokens: Vec<usize>,
    pub segments: Vec<PromptSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub frame_start: usize,
    pub frame_end: usize,
    pub tokens: Vec<usize>,
}

impl PromptSchedule {
    pub fn validate(&self, vocab: usize) -> ModelResult<()> {
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.frame_start != cursor || s.frame_end <= s.frame_start {
                return Err(ModelError::PromptSegments {
                    reason: format!("segment {i} does not continue coverage at frame {cursor}"),
                });
            }
            cursor = s.frame_end;
        }
        if self.segments.is_empty() {
            return Err(ModelError::PromptSegments {
                reason: "no segments".into(),
            });
        }
        for &id in self.global_tokens.iter().chain(self.segments.iter().flat_map(|s| s.tokens.iter())) {
            if id >= vocab {
                return Err(ModelError::PromptToken { id, vocab });
            }
        }
        Ok(())
    }

    /// Horizon covered by the segments.
    pub fn num_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.frame_end)
    }

    /// All token ids in cross-attention key order: global first, then each
    /// segment's locals in segment order.
    pub fn all_tokens(&self) -> Vec<usize> {
        let mut out = self.global_tokens.clone();
        for s in &self.segments {
            out.extend_from_slice(&s.tokens);
        }
        out
    }

    pub fn num_text_tokens(&self) -> usize {
        self.global_tokens.len() + self.segments.iter().map(|s| s.tokens.len()).sum::<usize>()
    }

    /// Geometry for the masks module: token ranges laid out as in
    /// [`PromptSchedule::all_tokens`].
    pub fn segment_map(&self) -> ModelResult<SegmentMap> {
        let g = self.global_tokens.len();
        let mut token_cursor = g;
        let mut segments = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            segments.push(Segment {
                frame_start: s.frame_start,
                frame_end: s.frame_end,
                token_start: token_cursor,
                token_end: token_cursor + s.tokens.len(),
            });
            token_cursor += s.tokens.len();
        }
        Ok(SegmentMap::new(segments, (0, g))?)
    }

    /// Index of the segment containing `frame`.
    pub fn segment_of(&self, frame: usize) -> Option<usize> {
        self.segments
            .iter()
            .position(|s| s.frame_start <= frame && frame < s.frame_end)
    }
}

/// Architecture hyperparameters. `heads × head_dim == model_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens_per_frame: usize,
    pub vocab: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 16,
            model_dim: 32,
            layers: 2,
            heads: 2,
            tokens_per_frame: 1,
            vocab: 64,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 || self.head_dim() % 2 != 0 {
            return Err(ModelError::HeadGeometry {
                heads: self.heads,
                head_dim: self.model_dim.checked_div(self.heads).unwrap_or(0),
                dim: self.model_dim,
            });
        }
        Ok(())
    }
}

/// Number of sinusoidal noise-conditioning features.
const NOISE_FEATURES: usize = 16;

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub cw_q: Tensor,
    pub cw_k: Tensor,
    pub cw_v: Tensor,
    pub cw_o: Tensor,
    pub cb_o: Tensor,
    pub ln3_gain: Tensor,
    pub ln3_bias: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
}

/// Full model weights plus their config.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub in_proj_w: Tensor,
    pub in_proj_b: Tensor,
    pub noise_proj_w: Tensor,
    pub patch_embed: Tensor,
    pub token_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub out_proj_w: Tensor,
    pub out_proj_b: Tensor,
}

impl ModelParams {
    /// Random initialization. Hidden projections are uniform at 1/√fan_in
    /// scale; the output head starts at zero so the initial velocity
    /// prediction is exactly zero (the residual trunk is bypassed).
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> ModelResult<ModelParams> {
        config.validate()?;
        let d = config.model_dim;
        fn u<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
            let scale = 1.0 / (shape[0] as f64).sqrt();
            crate::rng::uniform_tensor(rng, shape, -scale, scale)
        }
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: u(&mut *rng, &[d, d]),
                w_k: u(&mut *rng, &[d, d]),
                w_v: u(&mut *rng, &[d, d]),
                w_o: u(&mut *rng, &[d, d]),
                b_o: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                cw_q: u(&mut *rng, &[d, d]),
                cw_k: u(&mut *rng, &[d, d]),
                cw_v: u(&mut *rng, &[d, d]),
                cw_o: u(&mut *rng, &[d, d]),
                cb_o: Tensor::zeros(&[d]),
                ln3_gain: Tensor::filled(&[d], 1.0),
                ln3_bias: Tensor::zeros(&[d]),
                w_mlp1: u(&mut *rng, &[d, config.mlp_hidden]),
                b_mlp1: Tensor::zeros(&[config.mlp_hidden]),
                w_mlp2: u(&mut *rng, &[config.mlp_hidden, d]),
                b_mlp2: Tensor::zeros(&[d]),
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            in_proj_w: u(&mut *rng, &[config.latent_dim, d]),
            in_proj_b: Tensor::zeros(&[d]),
            noise_proj_w: u(&mut *rng, &[NOISE_FEATURES, d]),
            patch_embed: u(&mut *rng, &[config.tokens_per_frame, d]),
            token_embed: u(&mut *rng, &[config.vocab, d]),
            layers,
            final_ln_gain: Tensor::filled(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            out_proj_w: Tensor::zeros(&[d, config.latent_dim]),
            out_proj_b: Tensor::zeros(&[config.latent_dim]),
        })
    }

    /// (name, tensor) pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in_proj_w".into(), &self.in_proj_w),
            ("in_proj_b".into(), &self.in_proj_b),
            ("noise_proj_w".into(), &self.noise_proj_w),
            ("patch_embed".into(), &self.patch_embed),
            ("token_embed".into(), &self.token_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in l.named() {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out.push(("out_proj_w".into(), &self.out_proj_w));
        out.push(("out_proj_b".into(), &self.out_proj_b));
        out
    }

    /// Mutable traversal in the same canonical order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("in_proj_w".into(), &mut self.in_proj_w),
            ("in_proj_b".into(), &mut self.in_proj_b),
            ("noise_proj_w".into(), &mut self.noise_proj_w),
            ("patch_embed".into(), &mut self.patch_embed),
            ("token_embed".into(), &mut self.token_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in l.named_mut() {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln_gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln_bias".into(), &mut self.final_ln_bias));
        out.push(("out_proj_w".into(), &mut self.out_proj_w));
        out.push(("out_proj_b".into(), &mut self.out_proj_b));
        out
    }

    /// Stable fingerprint of all weights (order-sensitive), for determinism
    /// checks and artifact provenance.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.named() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    /// Write a checkpoint: text header (format tag + config JSON + tensor
    /// count), then named binary tensor blobs.
    pub fn save(&self, path: &Path) -> ModelResult<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| ModelError::Checkpoint(format!("create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
        writeln!(w, "{CHECKPOINT_TAG}").map_err(io)?;
        writeln!(
            w,
            "config {}",
            serde_json::to_string(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?
        )
        .map_err(io)?;
        let named = self.named();
        writeln!(w, "tensors {}", named.len()).map_err(io)?;
        for (name, t) in named {
            writeln!(w, "{name}").map_err(io)?;
            t.write_to(&mut w)?;
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> ModelResult<ModelParams> {
        let file = std::fs::File::open(path)
            .map_err(|e| ModelError::Checkpoint(format!("open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> ModelResult<String> {
            line.clear();
            r.read_line(line)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            Ok(line.trim_end().to_string())
        };
        if read_line(&mut r, &mut line)? != CHECKPOINT_TAG {
            return Err(ModelError::Checkpoint("bad format tag".into()));
        }
        let config_line = read_line(&mut r, &mut line)?;
        let config: ModelConfig = config_line
            .strip_prefix("config ")
            .ok_or_else(|| ModelError::Checkpoint("missing config line".into()))
            .and_then(|j| serde_json::from_str(j).map_err(|e| ModelError::Checkpoint(e.to_string())))?;
        let count_line = read_line(&mut r, &mut line)?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| ModelError::Checkpoint("missing tensor count".into()))?;

        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name = read_line(&mut r, &mut line)?;
            let tensor = Tensor::read_from(&mut r)?;
            let mut sep = [0u8; 1];
            r.read_exact(&mut sep)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            by_name.insert(name, tensor);
        }
        ModelParams::from_named(&config, &mut by_name)
    }

    fn from_named(config: &ModelConfig, by_name: &mut HashMap<String, Tensor>) -> ModelResult<ModelParams> {
        // build a zero skeleton, then fill every tensor by canonical name
        let mut rng = crate::rng::substream(0, "skeleton");
        let mut params = ModelParams::init(config, &mut rng)?;
        for (name, slot) in params.named_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }
}

const CHECKPOINT_TAG: &str = "futurecast-model v1";

impl LayerParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("cw_q", &self.cw_q),
            ("cw_k", &self.cw_k),
            ("cw_v", &self.cw_v),
            ("cw_o", &self.cw_o),
            ("cb_o", &self.cb_o),
            ("ln3_gain", &self.ln3_gain),
            ("ln3_bias", &self.ln3_bias),
            ("w_mlp1", &self.w_mlp1),
            ("b_mlp1", &self.b_mlp1),
            ("w_mlp2", &self.w_mlp2),
            ("b_mlp2", &self.b_mlp2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("cw_q", &mut self.cw_q),
            ("cw_k", &mut self.cw_k),
            ("cw_v", &mut self.cw_v),
            ("cw_o", &mut self.cw_o),
            ("cb_o", &mut self.cb_o),
            ("ln3_gain", &mut self.ln3_gain),
            ("ln3_bias", &mut self.ln3_bias),
            ("w_mlp1", &mut self.w_mlp1),
            ("b_mlp1", &mut self.b_mlp1),
            ("w_mlp2", &mut self.w_mlp2),
            ("b_mlp2", &mut self.b_mlp2),
        ]
    }
}

/// Model weights loaded onto a tape, either as constants (inference) or
/// trainable params (`trainable = true`). Mirrors [`ModelParams`] shape.
pub struct ParamNodes {
    pub config: ModelConfig,
    pub ids: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn load(g: &mut Graph, params: &ModelParams, trainable: bool) -> ParamNodes {
        let ids = params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let id = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name, id)
            })
            .collect();
        ParamNodes {
            config: params.config.clone(),
            ids,
        }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    fn layer(&self, i: usize, suffix: &str) -> NodeId {
        self.get(&format!("layer{i}.{suffix}"))
    }
}

/// Everything one forward pass needs besides the weights.
pub struct ForwardInputs<'a> {
    pub noisy: &'a LatentVideo,
    pub levels: &'a NoiseLevels,
    /// Frame-level `[T, ctx_frames]` or token-level `[T·P, ctx_frames·P]`,
    /// where ctx_frames counts cache entries (past then future) plus the
    /// local frames, in that column order.
    pub self_mask: &'a AttentionMask,
    pub prompts: &'a PromptSchedule,
    /// Frame-level `[T, num_text_tokens]` or token-level rows `[T·P, ·]`.
    pub cross_mask: &'a AttentionMask,
    pub cache: Option<&'a DualRegionKVCache>,
    /// Explicit absolute rotary position per frame (length T). `None` means
    /// consecutive positions starting at the video's `frame_offset`; dense
    /// full-history forwards pass gathered, possibly non-contiguous positions.
    pub positions: Option<&'a [usize]>,
}

/// Like [`ForwardInputs`] with the latent input already living on the tape
/// as a `[T·P, latent_dim]` node. Used when the input itself must stay
/// differentiable — e.g. scoring one model's generated frames through
/// another model's feature extractor.
pub struct NodeForwardInputs<'a> {
    /// `[T·P, latent_dim]` latent rows.
    pub x: NodeId,
    pub num_frames: usize,
    /// Base rotary position when `positions` is `None`.
    pub frame_offset: usize,
    pub levels: &'a NoiseLevels,
    pub self_mask: &'a AttentionMask,
    pub prompts: &'a PromptSchedule,
    pub cross_mask: &'a AttentionMask,
    pub cache: Option<&'a DualRegionKVCache>,
    pub positions: Option<&'a [usize]>,
}

/// Node handles produced by [`forward`].
pub struct ForwardOutput {
    /// `[T·P, latent_dim]` predicted velocity.
    pub velocity: NodeId,
    /// `[T·P, model_dim]` final pre-head features (the "perceptual" space).
    pub penultimate: NodeId,
    /// Per layer: local keys `[T·P, model_dim]`, already rotary-rotated.
    pub local_keys: Vec<NodeId>,
    /// Per layer: local values `[T·P, model_dim]`.
    pub local_values: Vec<NodeId>,
}

/// All-true self-attention mask over `T` frames of `P` tokens.
pub fn bidirectional_mask(num_frames: usize, tokens_per_frame: usize) -> AttentionMask {
    AttentionMask::all_true(num_frames * tokens_per_frame, num_frames * tokens_per_frame)
}

/// Rotary rotation at explicit absolute positions (base 10000), exposed at
/// the model level for tests and cache construction.
pub fn rope_apply(x: &Tensor, positions: &[usize]) -> ModelResult<Tensor> {
    Ok(x.rope(positions)?)
}

/// Sinusoidal features of one noise level.
fn noise_features(t: f64) -> Vec<f64> {
    let half = NOISE_FEATURES / 2;
    let mut out = Vec::with_capacity(NOISE_FEATURES);
    for j in 0..half {
        let omega = 1000.0_f64.powf(-(j as f64) / half as f64);
        let angle = 1000.0 * t * omega;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Run the transformer on a tape. Queries take rotary positions
/// `frame_offset + i`; cached keys keep the rotations they were stored with.
/// Cache entry columns come first (past region then future region, ascending
/// positions — the [`DualRegionKVCache::gather`] order), then local frames.
pub fn forward(
    g: &mut Graph,
    params: &ParamNodes,
    inputs: &ForwardInputs,
) -> ModelResult<ForwardOutput> {
    let cfg = &params.config;
    if inputs.noisy.tokens_per_frame() != cfg.tokens_per_frame
        || inputs.noisy.channels() != cfg.latent_dim
    {
        return Err(ModelError::VideoShape {
            shape: inputs.noisy.frames().shape().to_vec(),
            p: cfg.tokens_per_frame,
            d: cfg.latent_dim,
        });
    }
    let x = g.constant(inputs.noisy.to_matrix());
    forward_node(
        g,
        params,
        &NodeForwardInputs {
            x,
            num_frames: inputs.noisy.num_frames(),
            frame_offset: inputs.noisy.frame_offset(),
            levels: inputs.levels,
            self_mask: inputs.self_mask,
            prompts: inputs.prompts,
            cross_mask: inputs.cross_mask,
            cache: inputs.cache,
            positions: inputs.positions,
        },
    )
}

/// [`forward`] with the latent input as a tape node, so gradients can flow
/// through the input rows as well as the weights.
pub fn forward_node(
    g: &mut Graph,
    params: &ParamNodes,
    inputs: &NodeForwardInputs,
) -> ModelResult<ForwardOutput> {
    let cfg = &params.config;
    cfg.validate()?;
    let t_frames = inputs.num_frames;
    let p = cfg.tokens_per_frame;
    let x_shape = g.value(inputs.x).shape().to_vec();
    if x_shape != [t_frames * p, cfg.latent_dim] {
        return Err(ModelError::VideoShape {
            shape: x_shape,
            p,
            d: cfg.latent_dim,
        });
    }
    if inputs.levels.len() != t_frames {
        return Err(ModelError::LevelCount {
            expected: t_frames,
            got: inputs.levels.len(),
        });
    }
    inputs.prompts.validate(cfg.vocab)?;
    let n = t_frames * p;

    // cache geometry (entry = one frame of P tokens)
    let cache_entries = inputs.cache.map_or(0, |c| c.past_len() + c.future_len());
    let ctx_frames = cache_entries + t_frames;

    let self_mask = expand_mask(
        inputs.self_mask,
        t_frames,
        ctx_frames,
        p,
        |rows, cols| ModelError::SelfMaskShape {
            rows,
            cols,
            t: t_frames,
            ctx: ctx_frames,
            tp: n,
            ctxp: ctx_frames * p,
        },
    )?;
    // cross-mask rows repeat per token; text columns never do
    let n_text = inputs.prompts.num_text_tokens();
    let cross_mask = if inputs.cross_mask.rows() == t_frames && inputs.cross_mask.cols() == n_text {
        inputs.cross_mask.expand(p, 1)
    } else if inputs.cross_mask.rows() == n && inputs.cross_mask.cols() == n_text {
        inputs.cross_mask.clone()
    } else {
        return Err(ModelError::CrossMaskShape {
            rows: inputs.cross_mask.rows(),
            cols: inputs.cross_mask.cols(),
            t: t_frames,
            tokens: n_text,
            tp: n,
        });
    };

    // token positions: one rotary position per frame, shared by its P tokens
    if let Some(pos) = inputs.positions {
        if pos.len() != t_frames {
            return Err(ModelError::PositionCount {
                expected: t_frames,
                got: pos.len(),
            });
        }
    }
    let token_positions: Vec<usize> = (0..n)
        .map(|i| match inputs.positions {
            Some(pos) => pos[i / p],
            None => inputs.frame_offset + i / p,
        })
        .collect();

    // input embedding: latent projection + patch embedding + noise features
    let x = inputs.x;
    let in_w = params.get("in_proj_w");
    let in_b = params.get("in_proj_b");
    let mut h = g.matmul(x, in_w)?;
    h = g.add_row(h, in_b)?;
    let patch_ids: Vec<usize> = (0..n).map(|i| i % p).collect();
    let patch = g.embedding(params.get("patch_embed"), &patch_ids)?;
    h = g.add(h, patch)?;
    let mut nf = Vec::with_capacity(n * NOISE_FEATURES);
    for i in 0..n {
        nf.extend_from_slice(&noise_features(inputs.levels.values()[i / p]));
    }
    let nf = g.constant(Tensor::new(vec![n, NOISE_FEATURES], nf)?);
    let nf_proj = g.matmul(nf, params.get("noise_proj_w"))?;
    h = g.add(h, nf_proj)?;

    // prompt embeddings (shared across layers)
    let text_ids = inputs.prompts.all_tokens();
    let text_embed = g.embedding(params.get("token_embed"), &text_ids)?;

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let eps = 1e-6;

    let mut local_keys = Vec::with_capacity(cfg.layers);
    let mut local_values = Vec::with_capacity(cfg.layers);

    for layer in 0..cfg.layers {
        // ── masked self-attention with rotary positions ──
        let hn = g.layer_norm(h, params.layer(layer, "ln1_gain"), params.layer(layer, "ln1_bias"), eps)?;
        let q_full = g.matmul(hn, params.layer(layer, "w_q"))?;
        let k_full = g.matmul(hn, params.layer(layer, "w_k"))?;
        let v_full = g.matmul(hn, params.layer(layer, "w_v"))?;

        // rotate local keys per head, then reassemble full-width for caching
        let mut roped_k_heads = Vec::with_capacity(heads);
        for hd in 0..heads {
            let kh = g.slice(k_full, 1, hd * dh, dh)?;
            roped_k_heads.push(g.rope(kh, &token_positions)?);
        }
        let k_roped = g.concat(1, &roped_k_heads)?;
        local_keys.push(k_roped);
        local_values.push(v_full);

        // cached context for this layer, as constants
        let gathered = inputs.cache.map(|c| c.gather(layer));
        let (cache_k, cache_v) = match &gathered {
            Some(gkv) => (
                gkv.keys.as_ref().map(|t| g.constant(t.clone())),
                gkv.values.as_ref().map(|t| g.constant(t.clone())),
            ),
            None => (None, None),
        };

        let mut head_outputs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice(q_full, 1, hd * dh, dh)?;
            let qh = g.rope(qh, &token_positions)?;
            let kh_local = roped_k_heads[hd];
            let vh_local = g.slice(v_full, 1, hd * dh, dh)?;
            let (kh, vh) = match (cache_k, cache_v) {
                (Some(ck), Some(cv)) => {
                    let ckh = g.slice(ck, 1, hd * dh, dh)?;
                    let cvh = g.slice(cv, 1, hd * dh, dh)?;
                    (g.concat(0, &[ckh, kh_local])?, g.concat(0, &[cvh, vh_local])?)
                }
                _ => (kh_local, vh_local),
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_masked(logits, &self_mask)?;
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let attn_out = g.concat(1, &head_outputs)?;
        let attn_out = g.matmul(attn_out, params.layer(layer, "w_o"))?;
        let attn_out = g.add_row(attn_out, params.layer(layer, "b_o"))?;
        h = g.add(h, attn_out)?;

        // ── temporally-masked cross-attention to prompt tokens ──
        let hn = g.layer_norm(h, params.layer(layer, "ln2_gain"), params.layer(layer, "ln2_bias"), eps)?;
        let cq = g.matmul(hn, params.layer(layer, "cw_q"))?;
        let ck = g.matmul(text_embed, params.layer(layer, "cw_k"))?;
        let cv = g.matmul(text_embed, params.layer(layer, "cw_v"))?;
        let mut cross_heads = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice(cq, 1, hd * dh, dh)?;
            let kh = g.slice(ck, 1, hd * dh, dh)?;
            let vh = g.slice(cv, 1, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_masked(logits, &cross_mask)?;
            cross_heads.push(g.matmul(attn, vh)?);
        }
        let cross_out = g.concat(1, &cross_heads)?;
        let cross_out = g.matmul(cross_out, params.layer(layer, "cw_o"))?;
        let cross_out = g.add_row(cross_out, params.layer(layer, "cb_o"))?;
        h = g.add(h, cross_out)?;

        // ── MLP ──
        let hn = g.layer_norm(h, params.layer(layer, "ln3_gain"), params.layer(layer, "ln3_bias"), eps)?;
        let m1 = g.matmul(hn, params.layer(layer, "w_mlp1"))?;
        let m1 = g.add_row(m1, params.layer(layer, "b_mlp1"))?;
        let m1 = g.gelu(m1);
        let m2 = g.matmul(m1, params.layer(layer, "w_mlp2"))?;
        let m2 = g.add_row(m2, params.layer(layer, "b_mlp2"))?;
        h = g.add(h, m2)?;
    }

    let penultimate = g.layer_norm(h, params.get("final_ln_gain"), params.get("final_ln_bias"), eps)?;
    let velocity = g.matmul(penultimate, params.get("out_proj_w"))?;
    let velocity = g.add_row(velocity, params.get("out_proj_b"))?;

    Ok(ForwardOutput {
        velocity,
        penultimate,
        local_keys,
        local_values,
    })
}

/// Accept a frame-level mask (expanded here) or an exact token-level mask.
fn expand_mask(
    mask: &AttentionMask,
    t_frames: usize,
    ctx_frames: usize,
    p: usize,
    err: impl Fn(usize, usize) -> ModelError,
) -> ModelResult<AttentionMask> {
    if mask.rows() == t_frames && mask.cols() == ctx_frames {
        Ok(mask.expand(p, p))
    } else if mask.rows() == t_frames * p && mask.cols() == ctx_frames * p {
        Ok(mask.clone())
    } else {
        Err(err(mask.rows(), mask.cols()))
    }
}

/// Convenience results of a no-tape inference forward.
#[derive(Debug)]
pub struct InferOutput {
    pub velocity: Tensor,
    pub penultimate: Tensor,
    /// Per layer `[T·P, model_dim]` rotary-rotated keys of the local frames.
    pub local_keys: Vec<Tensor>,
    pub local_values: Vec<Tensor>,
}

impl ModelParams {
    /// One inference forward on a private tape.
    pub fn infer(&self, inputs: &ForwardInputs) -> ModelResult<InferOutput> {
        let mut g = Graph::new();
        let nodes = ParamNodes::load(&mut g, self, false);
        let out = forward(&mut g, &nodes, inputs)?;
        Ok(InferOutput {
            velocity: g.tensor(out.velocity),
            penultimate: g.tensor(out.penultimate),
            local_keys: out.local_keys.iter().map(|&id| g.tensor(id)).collect(),
            local_values: out.local_values.iter().map(|&id| g.tensor(id)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::CacheEntry;
    use crate::masks::causal_chunk_mask;
    use crate::rng::{normal_tensor, substream};

    fn test_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 6,
            model_dim: 16,
            layers: 2,
            heads: 2,
            tokens_per_frame: 1,
            vocab: 32,
            mlp_hidden: 24,
        }
    }

    fn simple_prompts(frames: usize) -> PromptSchedule {
        PromptSchedule {
            global_tokens: vec![1, 2],
            segments: vec![PromptSegment {
                frame_start: 0,
                frame_end: frames,
                tokens: vec![5, 6],
            }],
        }
    }

    fn random_video(seed: u64, t: usize, p: usize, d: usize, offset: usize) -> LatentVideo {
        let mut rng = substream(seed, "video");
        LatentVideo::new(normal_tensor(&mut rng, &[t, p, d], 0.0, 1.0), offset).unwrap()
    }

    fn cross_for(prompts: &PromptSchedule, frames: usize) -> AttentionMask {
        crate::masks::temporal_cross_mask(frames, &prompts.segment_map().unwrap(), prompts.num_text_tokens())
            .unwrap()
    }

    #[test]
    fn zero_initialized_head_predicts_zero_velocity() {
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut substream(1, "init")).unwrap();
        let video = random_video(2, 4, 1, cfg.latent_dim, 0);
        let prompts = simple_prompts(4);
        let out = params
            .infer(&ForwardInputs {
                noisy: &video,
                levels: &NoiseLevels::uniform(0.5, 4).unwrap(),
                self_mask: &bidirectional_mask(4, 1),
                prompts: &prompts,
                cross_mask: &cross_for(&prompts, 4),
                cache: None,
                positions: None,
            })
            .unwrap();
        assert!(out.velocity.data().iter().all(|&v| v == 0.0));
        assert!(out.penultimate.norm() > 0.0);
    }

    /// Random-head params so the output is not identically zero.
    fn live_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut params = ModelParams::init(cfg, &mut substream(seed, "init")).unwrap();
        let mut rng = substream(seed, "head");
        params.out_proj_w = normal_tensor(&mut rng, &[cfg.model_dim, cfg.latent_dim], 0.0, 0.3);
        params.out_proj_b = normal_tensor(&mut rng, &[cfg.latent_dim], 0.0, 0.1);
        params
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let cfg = test_config();
        let params = live_params(&cfg, 3);
        let t = 6;
        let prompts = simple_prompts(t);
        let mask = causal_chunk_mask(t, 2).unwrap();
        let cross = cross_for(&prompts, t);
        let levels = NoiseLevels::uniform(0.75, t).unwrap();

        let base = random_video(4, t, 1, cfg.latent_dim, 0);
        let mut perturbed = base.frames().data().to_vec();
        // perturb the last frame (chunk 2)
        let d = cfg.latent_dim;
        for v in perturbed[(t - 1) * d..].iter_mut() {
            *v += 1.0;
        }
        let perturbed =
            LatentVideo::new(Tensor::new(vec![t, 1, d], perturbed).unwrap(), 0).unwrap();

        let run = |video: &LatentVideo| {
            params
                .infer(&ForwardInputs {
                    noisy: video,
                    levels: &levels,
                    self_mask: &mask,
                    prompts: &prompts,
                    cross_mask: &cross,
                    cache: None,
                    positions: None,
                })
                .unwrap()
                .velocity
        };
        let a = run(&base);
        let b = run(&perturbed);
        // chunks 0 and 1 (frames 0..4) are bitwise identical
        assert_eq!(&a.data()[..4 * d], &b.data()[..4 * d]);
        // the perturbed chunk itself changes
        assert!(a.data()[4 * d..] != b.data()[4 * d..]);
    }

    #[test]
    fn cross_attention_locality_is_exact() {
        let cfg = test_config();
        let params = live_params(&cfg, 5);
        let t = 8;
        let prompts = PromptSchedule {
            global_tokens: vec![1],
            segments: vec![
                PromptSegment { frame_start: 0, frame_end: 4, tokens: vec![10, 11] },
                PromptSegment { frame_start: 4, frame_end: 8, tokens: vec![12, 13] },
            ],
        };
        let mut swapped = prompts.clone();
        swapped.segments[1].tokens = vec![14, 13];

        let video = random_video(6, t, 1, cfg.latent_dim, 0);
        let levels = NoiseLevels::uniform(0.5, t).unwrap();
        // Block-causal self-attention: segment-0 frames never read segment-1
        // frames, so the only route a segment-1 token swap could take into
        // them is the cross mask — which blocks it exactly. (Bidirectional
        // self-attention would leak the swap backwards through deeper-layer
        // K/V of segment-1 frames.)
        let mask = causal_chunk_mask(t, 2).unwrap();

        let run = |p: &PromptSchedule| {
            params
                .infer(&ForwardInputs {
                    noisy: &video,
                    levels: &levels,
                    self_mask: &mask,
                    prompts: p,
                    cross_mask: &cross_for(p, t),
                    cache: None,
                    positions: None,
                })
                .unwrap()
                .velocity
        };
        let a = run(&prompts);
        let b = run(&swapped);
        let d = cfg.latent_dim;
        assert_eq!(&a.data()[..4 * d], &b.data()[..4 * d]);
        assert!(a.data()[4 * d..] != b.data()[4 * d..]);
    }

    #[test]
    fn noise_level_conditioning_changes_output() {
        let cfg = test_config();
        let params = live_params(&cfg, 7);
        let t = 4;
        let prompts = simple_prompts(t);
        let video = random_video(8, t, 1, cfg.latent_dim, 0);
        let run = |level: f64| {
            params
                .infer(&ForwardInputs {
                    noisy: &video,
                    levels: &NoiseLevels::uniform(level, t).unwrap(),
                    self_mask: &bidirectional_mask(t, 1),
                    prompts: &prompts,
                    cross_mask: &cross_for(&prompts, t),
                    cache: None,
                    positions: None,
                })
                .unwrap()
                .velocity
        };
        let a = run(0.1);
        let b = run(0.9);
        assert!(a.sub(&b).unwrap().norm() > 1e-6);
    }

    #[test]
    fn cached_forward_matches_dense_forward() {
        // Generate 3 chunks of 2 frames; commit each chunk's K/V; the final
        // chunk's cached forward must reproduce the dense full-history rows.
        let cfg = test_config();
        let params = live_params(&cfg, 9);
        let t = 6;
        let chunk = 2;
        let d = cfg.latent_dim;
        let prompts = simple_prompts(t);
        let full_video = random_video(10, t, 1, d, 0);
        let levels0 = NoiseLevels::uniform(0.0, t).unwrap();
        let dense_mask = causal_chunk_mask(t, chunk).unwrap();
        let cross_full = cross_for(&prompts, t);

        let dense = params
            .infer(&ForwardInputs {
                noisy: &full_video,
                levels: &levels0,
                self_mask: &dense_mask,
                prompts: &prompts,
                cross_mask: &cross_full,
                cache: None,
                positions: None,
            })
            .unwrap();

        let mut cache = DualRegionKVCache::new(16, 4).unwrap();
        let mut cached_last = None;
        for c in 0..t / chunk {
            let win = full_video.window(c * chunk, chunk).unwrap();
            let ctx = cache.past_len() + chunk;
            // within-chunk bidirectional over cache + self
            let self_mask = AttentionMask::all_true(chunk, ctx);
            let cross = AttentionMask::from_fn(chunk, prompts.num_text_tokens(), |i, j| {
                cross_full.get(c * chunk + i, j)
            })
            .unwrap();
            let out = params
                .infer(&ForwardInputs {
                    noisy: &win,
                    levels: &NoiseLevels::uniform(0.0, chunk).unwrap(),
                    self_mask: &self_mask,
                    prompts: &prompts,
                    cross_mask: &cross,
                    cache: Some(&cache),
                    positions: None,
                })
                .unwrap();
            for f in 0..chunk {
                let keys = out
                    .local_keys
                    .iter()
                    .map(|k| k.slice(0, f, 1).unwrap())
                    .collect();
                let values = out
                    .local_values
                    .iter()
                    .map(|v| v.slice(0, f, 1).unwrap())
                    .collect();
                cache
                    .append_past(CacheEntry::new(c * chunk + f, keys, values))
                    .unwrap();
            }
            cached_last = Some(out.velocity);
        }

        let cached = cached_last.unwrap();
        let dense_rows = dense.velocity.slice(0, t - chunk, chunk).unwrap();
        let diff = cached.sub(&dense_rows).unwrap();
        let max = diff.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-9, "cache/dense mismatch {max}");
    }

    #[test]
    fn rope_identity_norm_and_shift() {
        let mut rng = substream(11, "rope");
        let x = normal_tensor(&mut rng, &[3, 8], 0.0, 1.0);
        // position 0 → identity
        let same = rope_apply(&x, &[0, 0, 0]).unwrap();
        assert_eq!(same, x);
        // norm preserved under rotation
        let rotated = rope_apply(&x, &[5, 9, 100]).unwrap();
        for i in 0..3 {
            let a = x.slice(0, i, 1).unwrap().norm();
            let b = rotated.slice(0, i, 1).unwrap().norm();
            assert!((a - b).abs() < 1e-12);
        }
        // relative-position invariance of inner products
        let q = normal_tensor(&mut rng, &[1, 8], 0.0, 1.0);
        let k = normal_tensor(&mut rng, &[1, 8], 0.0, 1.0);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        for delta in [1usize, 5, 100] {
            let base = dot(&rope_apply(&q, &[7]).unwrap(), &rope_apply(&k, &[3]).unwrap());
            let shifted = dot(
                &rope_apply(&q, &[7 + delta]).unwrap(),
                &rope_apply(&k, &[3 + delta]).unwrap(),
            );
            assert!((base - shifted).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = test_config();
        let params = live_params(&cfg, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params.checksum(), loaded.checksum());
        assert_eq!(params.config, loaded.config);
        for ((an, at), (bn, bt)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(an, bn);
            assert_eq!(at, bt);
        }
    }

    #[test]
    fn forward_validates_masks_and_levels() {
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut substream(15, "init")).unwrap();
        let video = random_video(16, 4, 1, cfg.latent_dim, 0);
        let prompts = simple_prompts(4);
        let bad_mask = AttentionMask::all_true(3, 3);
        let err = params
            .infer(&ForwardInputs {
                noisy: &video,
                levels: &NoiseLevels::uniform(0.5, 4).unwrap(),
                self_mask: &bad_mask,
                prompts: &prompts,
                cross_mask: &cross_for(&prompts, 4),
                cache: None,
                positions: None,
            })
            .unwrap_err();
        assert!(matches!(err, ModelError::SelfMaskShape { .. }));

        let err = params
            .infer(&ForwardInputs {
                noisy: &video,
                levels: &NoiseLevels::uniform(0.5, 3).unwrap(),
                self_mask: &bidirectional_mask(4, 1),
                prompts: &prompts,
                cross_mask: &cross_for(&prompts, 4),
                cache: None,
                positions: None,
            })
            .unwrap_err();
        assert!(matches!(err, ModelError::LevelCount { expected: 4, got: 3 }));

        assert!(NoiseLevels::new(vec![0.5, 1.2]).is_err());
        assert!(NoiseLevels::new(vec![-0.1]).is_err());
    }

    #[test]
    fn prompt_schedule_validation_and_geometry() {
        let p = PromptSchedule {
            global_tokens: vec![1, 2],
            segments: vec![
                PromptSegment { frame_start: 0, frame_end: 8, tokens: vec![5] },
                PromptSegment { frame_start: 8, frame_end: 16, tokens: vec![6, 7] },
            ],
        };
        p.validate(32).unwrap();
        assert_eq!(p.num_text_tokens(), 5);
        assert_eq!(p.all_tokens(), vec![1, 2, 5, 6, 7]);
        let seg = p.segment_map().unwrap();
        assert_eq!(seg.global_token_range(), (0, 2));
        assert_eq!(seg.segments()[1].token_start, 3);
        assert_eq!(p.segment_of(8), Some(1));
        assert_eq!(p.segment_of(16), None);

        let gap = PromptSchedule {
            global_tokens: vec![],
            segments: vec![PromptSegment { frame_start: 2, frame_end: 4, tokens: vec![] }],
        };
        assert!(gap.validate(32).is_err());
        let oov = PromptSchedule {
            global_tokens: vec![40],
            segments: vec![PromptSegment { frame_start: 0, frame_end: 2, tokens: vec![] }],
        };
        assert!(oov.validate(32).is_err());
    }
}
