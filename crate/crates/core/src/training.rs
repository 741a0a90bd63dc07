//! Three-stage training pipeline.
//!
//! Stage 0 pretrains a bidirectional model on synthetic episodes with plain
//! flow matching. Stage 1 adapts it to causal operation by distillation: the
//! student sees span-blocked causal masks and per-frame noise levels and is
//! regressed onto the frozen bidirectional model's clean predictions, which
//! also teaches it to predict keyframes across hidden gaps. Stage 2 finetunes
//! the causal student on its own rollouts: each training window is generated
//! chunk-by-chunk from the student's previous outputs with a keyframe emitted
//! at a random moment, and the rollout is scored with a flow-matching loss
//! against the ground-truth window plus a non-saturating adversarial loss
//! whose discriminator reads the frozen bidirectional model's penultimate
//! features.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    interpolate, random_levels, target_velocity, DiffusionError, StepSchedule,
};
use crate::masks::{
    causal_chunk_mask, chunk_of, pca_mask, sample_spans, temporal_cross_mask, AttentionMask,
    MaskError, SpanSpec,
};
use crate::model::{
    bidirectional_mask, forward, forward_node, ForwardInputs, LatentVideo, ModelConfig,
    ModelError, ModelParams, NodeForwardInputs, NoiseLevels, ParamNodes, PromptSchedule,
    PromptSegment,
};
use crate::procworld::{drift_report, raw_state_embed, train_val_split, Episode, WorldError};
use crate::rng::{normal_tensor, substream};
use crate::sampler::{stream, SamplerConfig, SamplerError};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {reason}")]
    BadConfig { reason: String },
    #[error("no usable training episodes: {reason}")]
    EmptyDataset { reason: String },
    #[error("{stage} diverged at iteration {iteration}: loss {loss}")]
    Diverged {
        stage: TrainStage,
        iteration: usize,
        loss: f64,
    },
    #[error("{stage} validation loss {loss} above limit {limit}")]
    AboveLossLimit {
        stage: TrainStage,
        loss: f64,
        limit: f64,
    },
    #[error("blocked span leaked into attention: {reason}")]
    MaskViolation { reason: String },
    #[error("rollout conditioned on non-generated frames: {reason}")]
    LineageViolation { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which pipeline stage a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Teacher,
    Pca,
    Fsf,
}

impl std::fmt::Display for TrainStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainStage::Teacher => "teacher",
            TrainStage::Pca => "pca",
            TrainStage::Fsf => "fsf",
        })
    }
}

/// Default iteration budgets per stage.
pub const TEACHER_ITERATIONS: usize = 3000;
pub const PCA_ITERATIONS: usize = 2000;
pub const FSF_ITERATIONS: usize = 2000;
/// Default windows per optimizer step.
pub const DEFAULT_BATCH: usize = 8;
/// Hidden width of the feature discriminator.
const DISC_HIDDEN: usize = 16;
/// Iterations between rollout drift probes in the final stage.
const PROBE_STRIDE: usize = 500;
/// Held-out samples used for each validation measurement.
const VAL_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Frames per training window.
    pub train_window_frames: usize,
    pub chunk_size: usize,
    /// Per-chunk probability of hiding a span of history (stage 1).
    pub p_block: f64,
    /// Longest hidden span, in chunks (stage 1).
    pub max_hidden: usize,
    pub lambda_reg: f64,
    pub lambda_cos: f64,
    pub lambda_fm: f64,
    pub lambda_adv: f64,
    /// Fail the run if the final validation loss lands above this.
    pub val_loss_limit: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::teacher()
    }
}

impl TrainConfig {
    pub fn teacher() -> TrainConfig {
        TrainConfig {
            stage: TrainStage::Teacher,
            iterations: TEACHER_ITERATIONS,
            learning_rate: 3e-3,
            batch_size: DEFAULT_BATCH,
            train_window_frames: 21,
            chunk_size: 3,
            p_block: 0.5,
            max_hidden: 6,
            lambda_reg: 1.0,
            lambda_cos: 0.1,
            lambda_fm: 1.0,
            lambda_adv: 0.05,
            val_loss_limit: None,
            seed: 0,
        }
    }

    pub fn pca() -> TrainConfig {
        TrainConfig {
            stage: TrainStage::Pca,
            iterations: PCA_ITERATIONS,
            learning_rate: 1e-3,
            ..TrainConfig::teacher()
        }
    }

    pub fn fsf() -> TrainConfig {
        TrainConfig {
            stage: TrainStage::Fsf,
            iterations: FSF_ITERATIONS,
            learning_rate: 3e-4,
            ..TrainConfig::teacher()
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        let bad = |reason: String| Err(TrainError::BadConfig { reason });
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} not positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be positive".into());
        }
        if self.train_window_frames < self.chunk_size + 2 {
            return bad(format!(
                "window of {} frames too short for chunks of {}",
                self.train_window_frames, self.chunk_size
            ));
        }
        if !(0.0..=1.0).contains(&self.p_block) {
            return bad(format!("p_block {} outside [0, 1]", self.p_block));
        }
        if self.max_hidden == 0 {
            return bad("max_hidden must be positive".into());
        }
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_cos", self.lambda_cos),
            ("lambda_fm", self.lambda_fm),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if let Some(limit) = self.val_loss_limit {
            if !(limit > 0.0 && limit.is_finite()) {
                return bad(format!("val_loss_limit {limit} not positive"));
            }
        }
        Ok(())
    }

    fn expect_stage(&self, stage: TrainStage) -> TrainResult<()> {
        if self.stage != stage {
            return Err(TrainError::BadConfig {
                reason: format!("config stage is {}, expected {stage}", self.stage),
            });
        }
        Ok(())
    }
}

/// Two-layer MLP scoring per-frame features from the bidirectional model.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const DISC_TAG: &str = "futurecast-discriminator v1";

impl DiscriminatorParams {
    pub fn init(feature_dim: usize, rng: &mut impl Rng) -> DiscriminatorParams {
        let s1 = 1.0 / (feature_dim as f64).sqrt();
        let s2 = 1.0 / (DISC_HIDDEN as f64).sqrt();
        DiscriminatorParams {
            w1: normal_tensor(rng, &[feature_dim, DISC_HIDDEN], 0.0, s1),
            b1: Tensor::zeros(&[DISC_HIDDEN]),
            w2: normal_tensor(rng, &[DISC_HIDDEN, 1], 0.0, s2),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("disc_w1".into(), &self.w1),
            ("disc_b1".into(), &self.b1),
            ("disc_w2".into(), &self.w2),
            ("disc_b2".into(), &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("disc_w1".into(), &mut self.w1),
            ("disc_b1".into(), &mut self.b1),
            ("disc_w2".into(), &mut self.w2),
            ("disc_b2".into(), &mut self.b2),
        ]
    }

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

    pub fn validate(&self) -> TrainResult<()> {
        let hidden = self.w1.shape().get(1).copied().unwrap_or(0);
        let ok = self.w1.rank() == 2
            && self.b1.shape() == [hidden]
            && self.w2.shape() == [hidden, 1]
            && self.b2.shape() == [1];
        if !ok {
            return Err(TrainError::BadConfig {
                reason: format!(
                    "discriminator shapes inconsistent: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> TrainResult<()> {
        let file = std::fs::File::create(path).map_err(|e| TrainError::BadConfig {
            reason: format!("create {}: {e}", path.display()),
        })?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| TrainError::BadConfig {
            reason: e.to_string(),
        };
        writeln!(w, "{DISC_TAG}").map_err(io)?;
        for (name, t) in self.named() {
            writeln!(w, "{name}").map_err(io)?;
            t.write_to(&mut w)?;
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> TrainResult<DiscriminatorParams> {
        let file = std::fs::File::open(path).map_err(|e| TrainError::BadConfig {
            reason: format!("open {}: {e}", path.display()),
        })?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let mut read_line = |r: &mut BufReader<std::fs::File>| -> TrainResult<String> {
            line.clear();
            r.read_line(&mut line).map_err(|e| TrainError::BadConfig {
                reason: e.to_string(),
            })?;
            Ok(line.trim_end().to_string())
        };
        if read_line(&mut r)? != DISC_TAG {
            return Err(TrainError::BadConfig {
                reason: "bad discriminator format tag".into(),
            });
        }
        let mut tensors = Vec::with_capacity(4);
        for expected in ["disc_w1", "disc_b1", "disc_w2", "disc_b2"] {
            let name = read_line(&mut r)?;
            if name != expected {
                return Err(TrainError::BadConfig {
                    reason: format!("expected tensor {expected}, found {name}"),
                });
            }
            tensors.push(Tensor::read_from(&mut r)?);
            read_line(&mut r)?; // trailing newline after the blob
        }
        let disc = DiscriminatorParams {
            b2: tensors.pop().unwrap(),
            w2: tensors.pop().unwrap(),
            b1: tensors.pop().unwrap(),
            w1: tensors.pop().unwrap(),
        };
        disc.validate()?;
        Ok(disc)
    }
}

/// Discriminator weights on a tape.
pub(crate) struct DiscNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl DiscNodes {
    pub(crate) fn load(g: &mut Graph, disc: &DiscriminatorParams, trainable: bool) -> DiscNodes {
        let mut load = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        DiscNodes {
            w1: load(&disc.w1),
            b1: load(&disc.b1),
            w2: load(&disc.w2),
            b2: load(&disc.b2),
        }
    }

    /// `[n, feature_dim]` features → `[n, 1]` logits.
    pub(crate) fn logits(&self, g: &mut Graph, features: NodeId) -> TrainResult<NodeId> {
        let h = g.matmul(features, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, self.w2)?;
        Ok(g.add_row(out, self.b2)?)
    }
}

/// Decoupled-weight-decay Adam over a fixed tensor list.
pub(crate) struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub(crate) fn new(lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads` aligns with `params` index-for-index.
    pub(crate) fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
    ) -> TrainResult<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::BadConfig {
                reason: format!(
                    "optimizer saw {} tensors, expected {}",
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            if grads[i].shape() != tensor.shape() {
                return Err(TrainError::BadConfig {
                    reason: format!(
                        "gradient shape {:?} for {name} of shape {:?}",
                        grads[i].shape(),
                        tensor.shape()
                    ),
                });
            }
            let mut data = tensor.data().to_vec();
            for (j, w) in data.iter_mut().enumerate() {
                let gj = grads[i].data()[j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
            **tensor = Tensor::new(tensor.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Loss history and probes from one stage.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: TrainStage,
    /// Total weighted loss per iteration.
    pub loss_curve: Vec<f64>,
    /// Unweighted loss components, one curve per name, aligned with
    /// `loss_curve`.
    pub components: Vec<(String, Vec<f64>)>,
    /// Held-out loss at probe iterations.
    pub val_curve: Vec<(usize, f64)>,
    /// Rollout drift slope at probe iterations (final stage only).
    pub drift_curve: Vec<(usize, f64)>,
    /// (iteration, message) anomalies that did not abort the run.
    pub warnings: Vec<(usize, String)>,
    pub final_checksum: u64,
}

impl TrainReport {
    fn new(stage: TrainStage) -> TrainReport {
        TrainReport {
            stage,
            loss_curve: Vec::new(),
            components: Vec::new(),
            val_curve: Vec::new(),
            drift_curve: Vec::new(),
            warnings: Vec::new(),
            final_checksum: 0,
        }
    }

    fn push_components(&mut self, named: &[(&str, f64)]) {
        if self.components.is_empty() {
            self.components = named
                .iter()
                .map(|(n, _)| (n.to_string(), Vec::new()))
                .collect();
        }
        for ((_, curve), (_, v)) in self.components.iter_mut().zip(named) {
            curve.push(*v);
        }
    }

    /// Metric rows for the run CSV, one per `stride` iterations plus the
    /// last, with validation/drift probes and warning markers appended.
    pub fn csv_rows(&self, run_id: &str, stride: usize) -> Vec<(String, String, f64)> {
        let stride = stride.max(1);
        let mut rows = Vec::new();
        let last = self.loss_curve.len().saturating_sub(1);
        for (i, &v) in self.loss_curve.iter().enumerate() {
            if i % stride != 0 && i != last {
                continue;
            }
            rows.push((run_id.to_string(), format!("iter{i:06}.loss"), v));
            for (name, curve) in &self.components {
                rows.push((run_id.to_string(), format!("iter{i:06}.{name}"), curve[i]));
            }
        }
        for &(i, v) in &self.val_curve {
            rows.push((run_id.to_string(), format!("iter{i:06}.val_loss"), v));
        }
        for &(i, v) in &self.drift_curve {
            rows.push((run_id.to_string(), format!("iter{i:06}.drift_slope"), v));
        }
        for (i, _) in &self.warnings {
            rows.push((run_id.to_string(), "warning_iteration".to_string(), *i as f64));
        }
        rows
    }
}

/// Moving average with a centered-as-possible trailing window, for loss-curve
/// trend checks.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for i in 0..curve.len() {
        acc += curve[i];
        if i >= window {
            acc -= curve[i - window];
        }
        out.push(acc / window.min(i + 1) as f64);
    }
    out
}

/// Per-frame clean prediction `x̂₀ = x_t − t·v̂` as a `[T·P, d]` matrix.
pub fn clean_from_velocity(
    noisy: &LatentVideo,
    velocity: &Tensor,
    levels: &NoiseLevels,
) -> TrainResult<Tensor> {
    let xt = noisy.to_matrix();
    if velocity.shape() != xt.shape() {
        return Err(TrainError::Tensor(TensorError::DimMismatch {
            op: "clean_from_velocity",
            left: velocity.shape().to_vec(),
            right: xt.shape().to_vec(),
        }));
    }
    let scaled = scale_rows_by_level(velocity, levels, noisy.tokens_per_frame())?;
    Ok(xt.sub(&scaled)?)
}

/// Multiply each frame's rows by that frame's noise level.
fn scale_rows_by_level(
    matrix: &Tensor,
    levels: &NoiseLevels,
    tokens_per_frame: usize,
) -> TrainResult<Tensor> {
    let rows = matrix.shape()[0];
    if levels.len() * tokens_per_frame != rows {
        return Err(TrainError::Model(ModelError::LevelCount {
            expected: rows / tokens_per_frame.max(1),
            got: levels.len(),
        }));
    }
    let cols = matrix.shape()[1];
    let mut data = matrix.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        *v *= levels.values()[(i / cols) / tokens_per_frame];
    }
    Ok(Tensor::new(matrix.shape().to_vec(), data)?)
}

/// `[T·P, d]` constant whose every row repeats the frame's level — tape-side
/// version of [`scale_rows_by_level`].
fn level_matrix(levels: &NoiseLevels, tokens_per_frame: usize, d: usize) -> Tensor {
    let n = levels.len() * tokens_per_frame;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = levels.values()[i / tokens_per_frame];
        data.extend(std::iter::repeat_n(t, d));
    }
    Tensor::new(vec![n, d], data).expect("level matrix shape")
}

/// Prompt schedule restricted to frames `[start, start+len)`, rebased to 0.
/// Segments that miss the window are dropped along with their tokens.
fn window_prompts(prompts: &PromptSchedule, start: usize, len: usize) -> PromptSchedule {
    let mut segments = Vec::new();
    for s in &prompts.segments {
        let a = s.frame_start.max(start);
        let b = s.frame_end.min(start + len);
        if a < b {
            segments.push(PromptSegment {
                frame_start: a - start,
                frame_end: b - start,
                tokens: s.tokens.clone(),
            });
        }
    }
    PromptSchedule {
        global_tokens: prompts.global_tokens.clone(),
        segments,
    }
}

/// Frame-level cross mask for a window of an episode's schedule.
fn window_cross_mask(prompts: &PromptSchedule, frames: usize) -> TrainResult<AttentionMask> {
    let map = prompts.segment_map()?;
    Ok(temporal_cross_mask(frames, &map, prompts.num_text_tokens())?)
}

/// Indices of episodes long enough to cut a window from, split 9:1.
fn eligible_splits(
    dataset: &[Episode],
    window: usize,
) -> TrainResult<(Vec<usize>, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset {
            reason: "dataset is empty".into(),
        });
    }
    let (train, val) = train_val_split(dataset.len());
    let keep = |ix: &Vec<usize>| -> Vec<usize> {
        ix.iter()
            .copied()
            .filter(|&i| dataset[i].video.num_frames() >= window)
            .collect()
    };
    let train = keep(&train);
    let mut val = keep(&val);
    if train.is_empty() {
        return Err(TrainError::EmptyDataset {
            reason: format!("no training episode reaches {window} frames"),
        });
    }
    if val.is_empty() {
        val = train.clone();
    }
    Ok((train, val))
}

/// One window of clean frames plus its rebased prompts and cross mask.
struct WindowDraw {
    clean: LatentVideo,
    prompts: PromptSchedule,
    cross: AttentionMask,
}

fn draw_window(
    dataset: &[Episode],
    indices: &[usize],
    window: usize,
    rng: &mut ChaCha8Rng,
) -> TrainResult<WindowDraw> {
    let ep = &dataset[indices[rng.random_range(0..indices.len())]];
    let t_ep = ep.video.num_frames();
    let start = rng.random_range(0..=t_ep - window);
    let clean = ep.video.window(start, window)?;
    // rebase to offset 0: rotary attention depends only on position deltas,
    // and a fixed base keeps training windows and rollouts aligned
    let clean = LatentVideo::new(clean.frames().clone(), 0)?;
    let prompts = window_prompts(&ep.prompts, start, window);
    let cross = window_cross_mask(&prompts, window)?;
    Ok(WindowDraw {
        clean,
        prompts,
        cross,
    })
}

/// Deterministic held-out draws reused for every validation measurement.
struct ValSet {
    items: Vec<(WindowDraw, NoiseLevels, Tensor)>,
}

impl ValSet {
    fn draw(
        dataset: &[Episode],
        indices: &[usize],
        window: usize,
        per_video_level: bool,
        schedule: &StepSchedule,
        seed: u64,
        name: &str,
    ) -> TrainResult<ValSet> {
        let mut rng = substream(seed, name);
        let mut items = Vec::with_capacity(VAL_SAMPLES);
        for _ in 0..VAL_SAMPLES {
            let draw = draw_window(dataset, indices, window, &mut rng)?;
            let levels = if per_video_level {
                NoiseLevels::uniform(rng.random::<f64>(), window)?
            } else {
                random_levels(&mut rng, schedule, window)
            };
            let p = draw.clean.tokens_per_frame();
            let d = draw.clean.channels();
            let noise = normal_tensor(&mut rng, &[window, p, d], 0.0, 1.0);
            items.push((draw, levels, noise));
        }
        Ok(ValSet { items })
    }
}

/// Confirm a blocked span never reaches the attention input: every query row
/// of the span's chunk must mask out every frame of the hidden range.
pub(crate) fn verify_span_blocking(
    mask: &AttentionMask,
    spans: &[SpanSpec],
    chunk_size: usize,
    frames: usize,
) -> TrainResult<()> {
    for span in spans {
        let blocked_from = span.query_chunk - span.hidden_count;
        for i in (0..frames).filter(|&i| chunk_of(i, chunk_size) == span.query_chunk) {
            for j in 0..frames {
                let cj = chunk_of(j, chunk_size);
                if cj >= blocked_from && cj < span.query_chunk && mask.get(i, j) {
                    return Err(TrainError::MaskViolation {
                        reason: format!(
                            "query frame {i} attends hidden frame {j} (span at chunk {})",
                            span.query_chunk
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

fn check_dataset_shapes(model: &ModelConfig, dataset: &[Episode]) -> TrainResult<()> {
    for ep in dataset {
        if ep.video.channels() != model.latent_dim
            || ep.video.tokens_per_frame() != model.tokens_per_frame
        {
            return Err(TrainError::BadConfig {
                reason: format!(
                    "episode frames are [{}, {}] per frame, model expects [{}, {}]",
                    ep.video.tokens_per_frame(),
                    ep.video.channels(),
                    model.tokens_per_frame,
                    model.latent_dim
                ),
            });
        }
        ep.prompts.validate(model.vocab)?;
    }
    Ok(())
}

fn finite_or_diverged(loss: f64, stage: TrainStage, iteration: usize) -> TrainResult<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::Diverged {
            stage,
            iteration,
            loss,
        })
    }
}

fn val_probe_due(iteration: usize, total: usize) -> bool {
    let stride = (total / 10).max(1);
    (iteration + 1) % stride == 0 || iteration + 1 == total
}

/// Stage 0: bidirectional flow-matching pretraining. Every window is fully
/// visible to every frame, one noise level is shared across the window, and
/// the model regresses the constant-velocity target.
pub fn train_teacher(
    model: &ModelConfig,
    config: &TrainConfig,
    dataset: &[Episode],
) -> TrainResult<(ModelParams, TrainReport)> {
    config.validate()?;
    config.expect_stage(TrainStage::Teacher)?;
    model.validate()?;
    check_dataset_shapes(model, dataset)?;
    let w = config.train_window_frames;
    let (train_ix, val_ix) = eligible_splits(dataset, w)?;
    let schedule = StepSchedule::default();
    let val = ValSet::draw(
        dataset,
        &val_ix,
        w,
        true,
        &schedule,
        config.seed,
        "teacher-val",
    )?;

    let mut params = ModelParams::init(model, &mut substream(config.seed, "teacher-init"))?;
    let mut opt = AdamW::new(config.learning_rate);
    let mut rng = substream(config.seed, "teacher-data");
    let mut report = TrainReport::new(TrainStage::Teacher);
    let p = model.tokens_per_frame;
    let d = model.latent_dim;

    for iter in 0..config.iterations {
        let mut g = Graph::new();
        let nodes = ParamNodes::load(&mut g, &params, true);
        let mut batch_loss: Option<NodeId> = None;
        for _ in 0..config.batch_size {
            let draw = draw_window(dataset, &train_ix, w, &mut rng)?;
            let levels = NoiseLevels::uniform(rng.random::<f64>(), w)?;
            let noise = normal_tensor(&mut rng, &[w, p, d], 0.0, 1.0);
            let noisy = interpolate(&draw.clean, &noise, &levels)?;
            let target = target_velocity(&draw.clean, &noise)?.reshape(vec![w * p, d])?;
            let self_mask = bidirectional_mask(w, p);
            let out = forward(
                &mut g,
                &nodes,
                &ForwardInputs {
                    noisy: &noisy,
                    levels: &levels,
                    self_mask: &self_mask,
                    prompts: &draw.prompts,
                    cross_mask: &draw.cross,
                    cache: None,
                    positions: None,
                },
            )?;
            let tgt = g.constant(target);
            let li = g.mse(out.velocity, tgt)?;
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, li)?,
                None => li,
            });
        }
        let loss_node = g.scale(batch_loss.expect("batch_size > 0"), 1.0 / config.batch_size as f64);
        let loss = finite_or_diverged(g.value(loss_node).item(), TrainStage::Teacher, iter)?;
        let grads = g.backward(loss_node)?;
        let grad_list: Vec<Tensor> = nodes
            .ids
            .iter()
            .map(|(_, id)| grads.get_or_zeros(*id, g.value(*id).shape()))
            .collect();
        opt.step(&mut params.named_mut(), &grad_list)?;

        report.loss_curve.push(loss);
        report.push_components(&[("fm", loss)]);
        if val_probe_due(iter, config.iterations) {
            let v = teacher_val_loss(&params, &val)?;
            report.val_curve.push((iter, v));
        }
    }

    report.final_checksum = params.checksum();
    if let (Some(limit), Some(&(_, v))) = (config.val_loss_limit, report.val_curve.last()) {
        if v > limit {
            return Err(TrainError::AboveLossLimit {
                stage: TrainStage::Teacher,
                loss: v,
                limit,
            });
        }
    }
    Ok((params, report))
}

fn teacher_val_loss(params: &ModelParams, val: &ValSet) -> TrainResult<f64> {
    let mut total = 0.0;
    for (draw, levels, noise) in &val.items {
        let w = draw.clean.num_frames();
        let p = draw.clean.tokens_per_frame();
        let d = draw.clean.channels();
        let noisy = interpolate(&draw.clean, noise, levels)?;
        let target = target_velocity(&draw.clean, noise)?.reshape(vec![w * p, d])?;
        let out = params.infer(&ForwardInputs {
            noisy: &noisy,
            levels,
            self_mask: &bidirectional_mask(w, p),
            prompts: &draw.prompts,
            cross_mask: &draw.cross,
            cache: None,
            positions: None,
        })?;
        total += out.velocity.mse(&target)?.item();
    }
    Ok(total / val.items.len() as f64)
}

/// Stage 1: causal adaptation by distillation. The student (initialized from
/// the bidirectional model) sees span-blocked causal masks and independent
/// per-frame noise levels; its clean predictions are regressed onto the
/// frozen bidirectional model's clean predictions for the same noisy input
/// with an MSE plus cosine-distance objective.
pub fn pca_distill(
    teacher: &ModelParams,
    config: &TrainConfig,
    dataset: &[Episode],
) -> TrainResult<(ModelParams, TrainReport)> {
    config.validate()?;
    config.expect_stage(TrainStage::Pca)?;
    check_dataset_shapes(&teacher.config, dataset)?;
    let w = config.train_window_frames;
    let chunk = config.chunk_size;
    let (train_ix, val_ix) = eligible_splits(dataset, w)?;
    let schedule = StepSchedule::default();
    let val = ValSet::draw(
        dataset,
        &val_ix,
        w,
        false,
        &schedule,
        config.seed,
        "pca-val",
    )?;

    let mut student = teacher.clone();
    let mut opt = AdamW::new(config.learning_rate);
    let mut rng = substream(config.seed, "pca-data");
    let mut report = TrainReport::new(TrainStage::Pca);
    let p = teacher.config.tokens_per_frame;
    let d = teacher.config.latent_dim;
    let num_chunks = w.div_ceil(chunk);

    for iter in 0..config.iterations {
        let mut g = Graph::new();
        let nodes = ParamNodes::load(&mut g, &student, true);
        let mut batch_loss: Option<NodeId> = None;
        let mut reg_sum = 0.0;
        let mut cos_sum = 0.0;
        for _ in 0..config.batch_size {
            let draw = draw_window(dataset, &train_ix, w, &mut rng)?;
            let levels = random_levels(&mut rng, &schedule, w);
            let noise = normal_tensor(&mut rng, &[w, p, d], 0.0, 1.0);
            let noisy = interpolate(&draw.clean, &noise, &levels)?;
            let spans = sample_spans(&mut rng, num_chunks, config.p_block, config.max_hidden);
            let mask = pca_mask(w, chunk, &spans)?;
            verify_span_blocking(&mask, &spans, chunk, w)?;

            let teacher_out = teacher.infer(&ForwardInputs {
                noisy: &noisy,
                levels: &levels,
                self_mask: &bidirectional_mask(w, p),
                prompts: &draw.prompts,
                cross_mask: &draw.cross,
                cache: None,
                positions: None,
            })?;
            let teacher_x0 = clean_from_velocity(&noisy, &teacher_out.velocity, &levels)?;

            let out = forward(
                &mut g,
                &nodes,
                &ForwardInputs {
                    noisy: &noisy,
                    levels: &levels,
                    self_mask: &mask,
                    prompts: &draw.prompts,
                    cross_mask: &draw.cross,
                    cache: None,
                    positions: None,
                },
            )?;
            let tmat = g.constant(level_matrix(&levels, p, d));
            let tv = g.mul(out.velocity, tmat)?;
            let xt = g.constant(noisy.to_matrix());
            let student_x0 = g.sub(xt, tv)?;
            let target = g.constant(teacher_x0);
            let reg = g.mse(student_x0, target)?;
            let cos = g.cosine_similarity(student_x0, target)?;
            let one = g.constant(Tensor::scalar(1.0));
            let cos_dist = g.sub(one, cos)?;
            reg_sum += g.value(reg).item();
            cos_sum += g.value(cos_dist).item();
            let reg_w = g.scale(reg, config.lambda_reg);
            let cos_w = g.scale(cos_dist, config.lambda_cos);
            let li = g.add(reg_w, cos_w)?;
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, li)?,
                None => li,
            });
        }
        let loss_node = g.scale(batch_loss.expect("batch_size > 0"), 1.0 / config.batch_size as f64);
        let loss = finite_or_diverged(g.value(loss_node).item(), TrainStage::Pca, iter)?;
        let grads = g.backward(loss_node)?;
        let grad_list: Vec<Tensor> = nodes
            .ids
            .iter()
            .map(|(_, id)| grads.get_or_zeros(*id, g.value(*id).shape()))
            .collect();
        opt.step(&mut student.named_mut(), &grad_list)?;

        report.loss_curve.push(loss);
        let b = config.batch_size as f64;
        report.push_components(&[("reg", reg_sum / b), ("cos", cos_sum / b)]);
        if val_probe_due(iter, config.iterations) {
            let v = pca_val_loss(&student, teacher, &val, chunk)?;
            report.val_curve.push((iter, v));
        }
    }

    report.final_checksum = student.checksum();
    if let (Some(limit), Some(&(_, v))) = (config.val_loss_limit, report.val_curve.last()) {
        if v > limit {
            return Err(TrainError::AboveLossLimit {
                stage: TrainStage::Pca,
                loss: v,
                limit,
            });
        }
    }
    Ok((student, report))
}

/// Held-out distillation gap under the plain block-causal mask (no spans):
/// MSE between student and bidirectional clean predictions.
fn pca_val_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    val: &ValSet,
    chunk: usize,
) -> TrainResult<f64> {
    let mut total = 0.0;
    for (draw, levels, noise) in &val.items {
        let w = draw.clean.num_frames();
        let p = draw.clean.tokens_per_frame();
        let noisy = interpolate(&draw.clean, noise, levels)?;
        let causal = causal_chunk_mask(w, chunk)?;
        let s_out = student.infer(&ForwardInputs {
            noisy: &noisy,
            levels,
            self_mask: &causal,
            prompts: &draw.prompts,
            cross_mask: &draw.cross,
            cache: None,
            positions: None,
        })?;
        let t_out = teacher.infer(&ForwardInputs {
            noisy: &noisy,
            levels,
            self_mask: &bidirectional_mask(w, p),
            prompts: &draw.prompts,
            cross_mask: &draw.cross,
            cache: None,
            positions: None,
        })?;
        let s_x0 = clean_from_velocity(&noisy, &s_out.velocity, levels)?;
        let t_x0 = clean_from_velocity(&noisy, &t_out.velocity, levels)?;
        total += s_x0.mse(&t_x0)?.item();
    }
    Ok(total / val.items.len() as f64)
}

// ── stage 2: rollout finetuning ──

#[derive(Clone, Copy, PartialEq, Eq)]
enum Lineage {
    /// The window's given first frame.
    Context,
    /// Produced by the student during this rollout.
    Generated,
}

/// One committed frame of a training rollout tape.
struct TapeFrame {
    position: usize,
    /// `[P, d]` committed latent (loss graphs treat it as data).
    latent: Tensor,
    /// Positions visible to this frame when it was generated.
    visible: Vec<usize>,
    /// Window frame whose cross-attention row this frame uses.
    cross_frame: usize,
    lineage: Lineage,
}

/// One generation step of a rollout, kept for the loss pass.
struct SpanRecord {
    start: usize,
    len: usize,
    /// Tape length when this span was emitted.
    tape_len: usize,
    /// `Some(anchor)` for keyframe spans: all frames read the anchor's
    /// cross row; chunks read their own rows.
    cross_anchor: Option<usize>,
    /// `[len·P, d]` node carrying the final denoise step.
    node: NodeId,
}

/// The student may condition only on its own outputs (and the window's given
/// first frame): fail loudly if anything else reached the tape.
fn assert_self_forcing(tape: &[TapeFrame]) -> TrainResult<()> {
    for f in tape {
        if f.lineage == Lineage::Context && f.position != 0 {
            return Err(TrainError::LineageViolation {
                reason: format!("ground-truth frame at position {} on the tape", f.position),
            });
        }
    }
    Ok(())
}

/// Self mask for a forward over `tape + span`: committed frames replay the
/// visibility they were generated under; span queries see the whole tape and
/// their own frames.
fn rollout_self_mask(tape: &[TapeFrame], span_len: usize) -> TrainResult<AttentionMask> {
    let n_ctx = tape.len();
    let n = n_ctx + span_len;
    Ok(AttentionMask::from_fn(n, n, |i, j| {
        if i < n_ctx {
            j < n_ctx && tape[i].visible.contains(&tape[j].position)
        } else {
            true
        }
    })?)
}

/// Cross rows for a forward over `tape + span`.
fn rollout_cross_mask(
    tape: &[TapeFrame],
    span_start: usize,
    span_len: usize,
    cross_anchor: Option<usize>,
    cross_full: &AttentionMask,
) -> TrainResult<AttentionMask> {
    let n_ctx = tape.len();
    let n = n_ctx + span_len;
    Ok(AttentionMask::from_fn(n, cross_full.cols(), |i, j| {
        let frame = if i < n_ctx {
            tape[i].cross_frame
        } else {
            cross_anchor.unwrap_or(span_start + (i - n_ctx))
        };
        cross_full.get(frame, j)
    })?)
}

fn tape_matrix(tape: &[TapeFrame]) -> TrainResult<Tensor> {
    let parts: Vec<&Tensor> = tape.iter().map(|f| &f.latent).collect();
    Ok(Tensor::concat(0, &parts)?)
}

fn tape_positions(tape: &[TapeFrame], span_start: usize, span_len: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = tape.iter().map(|f| f.position).collect();
    pos.extend(span_start..span_start + span_len);
    pos
}

/// Generate `span_len` frames at `span_start` over the current tape: the
/// early integration steps run off-graph, the final step runs on the graph so
/// the committed frames stay differentiable w.r.t. the student weights.
#[allow(clippy::too_many_arguments)]
fn generate_span(
    g: &mut Graph,
    student_nodes: &ParamNodes,
    student: &ModelParams,
    tape: &mut Vec<TapeFrame>,
    span_start: usize,
    span_len: usize,
    cross_anchor: Option<usize>,
    cross_full: &AttentionMask,
    prompts: &PromptSchedule,
    schedule: &StepSchedule,
    init_noise: Tensor,
) -> TrainResult<SpanRecord> {
    assert_self_forcing(tape)?;
    let p = student.config.tokens_per_frame;
    let d = student.config.latent_dim;
    let n_ctx = tape.len();
    let ctx = tape_matrix(tape)?;
    let positions = tape_positions(tape, span_start, span_len);
    let self_mask = rollout_self_mask(tape, span_len)?;
    let cross = rollout_cross_mask(tape, span_start, span_len, cross_anchor, cross_full)?;

    let mut x = init_noise.reshape(vec![span_len * p, d])?;
    let steps = schedule.steps();
    let (last, early) = steps.split_last().expect("schedule has steps");
    for &(from, to) in early {
        let window = LatentVideo::from_matrix(&Tensor::concat(0, &[&ctx, &x])?, p, 0)?;
        let mut levels = vec![0.0; n_ctx];
        levels.extend(std::iter::repeat_n(from, span_len));
        let levels = NoiseLevels::new(levels)?;
        let out = student.infer(&ForwardInputs {
            noisy: &window,
            levels: &levels,
            self_mask: &self_mask,
            prompts,
            cross_mask: &cross,
            cache: None,
            positions: Some(&positions),
        })?;
        let v_span = out.velocity.slice(0, n_ctx * p, span_len * p)?;
        x = x.add(&v_span.scale(to - from))?;
    }

    let (from, to) = *last;
    let window = LatentVideo::from_matrix(&Tensor::concat(0, &[&ctx, &x])?, p, 0)?;
    let mut levels = vec![0.0; n_ctx];
    levels.extend(std::iter::repeat_n(from, span_len));
    let levels = NoiseLevels::new(levels)?;
    let out = forward(
        g,
        student_nodes,
        &ForwardInputs {
            noisy: &window,
            levels: &levels,
            self_mask: &self_mask,
            prompts,
            cross_mask: &cross,
            cache: None,
            positions: Some(&positions),
        },
    )?;
    let v_span = g.slice(out.velocity, 0, n_ctx * p, span_len * p)?;
    let x_node = g.constant(x);
    let scaled = g.scale(v_span, to - from);
    let span_node = g.add(x_node, scaled)?;

    let value = g.tensor(span_node);
    for f in 0..span_len {
        tape.push(TapeFrame {
            position: span_start + f,
            latent: value.slice(0, f * p, p)?,
            visible: positions.clone(),
            cross_frame: cross_anchor.unwrap_or(span_start + f),
            lineage: Lineage::Generated,
        });
    }
    Ok(SpanRecord {
        start: span_start,
        len: span_len,
        tape_len: n_ctx,
        cross_anchor,
        node: span_node,
    })
}

/// Flow-matching term for one recorded span: noise the ground-truth frames
/// of the span at a drawn level and regress the velocity over the same
/// self-generated context the span was emitted under.
#[allow(clippy::too_many_arguments)]
fn span_fm_term(
    g: &mut Graph,
    student_nodes: &ParamNodes,
    tape: &[TapeFrame],
    rec: &SpanRecord,
    gt: &LatentVideo,
    cross_full: &AttentionMask,
    prompts: &PromptSchedule,
    schedule: &StepSchedule,
    rng: &mut ChaCha8Rng,
) -> TrainResult<NodeId> {
    let prefix = &tape[..rec.tape_len];
    let p = gt.tokens_per_frame();
    let d = gt.channels();
    let n_ctx = prefix.len();
    let levels_set = schedule.levels();
    let tau = levels_set[rng.random_range(0..levels_set.len())];
    let eps = normal_tensor(rng, &[rec.len * p, d], 0.0, 1.0);
    let gt_span = gt
        .window(rec.start, rec.len)?
        .to_matrix();
    let xt = gt_span.scale(1.0 - tau).add(&eps.scale(tau))?;
    let target = eps.sub(&gt_span)?;

    let ctx = tape_matrix(prefix)?;
    let window = LatentVideo::from_matrix(&Tensor::concat(0, &[&ctx, &xt])?, p, 0)?;
    let positions = tape_positions(prefix, rec.start, rec.len);
    let self_mask = rollout_self_mask(prefix, rec.len)?;
    let cross = rollout_cross_mask(prefix, rec.start, rec.len, rec.cross_anchor, cross_full)?;
    let mut levels = vec![0.0; n_ctx];
    levels.extend(std::iter::repeat_n(tau, rec.len));
    let levels = NoiseLevels::new(levels)?;
    let out = forward(
        g,
        student_nodes,
        &ForwardInputs {
            noisy: &window,
            levels: &levels,
            self_mask: &self_mask,
            prompts,
            cross_mask: &cross,
            cache: None,
            positions: Some(&positions),
        },
    )?;
    let v_span = g.slice(out.velocity, 0, n_ctx * p, rec.len * p)?;
    let tgt = g.constant(target);
    Ok(g.mse(v_span, tgt)?)
}

/// Averaging matrix `[T, T·P]` pooling token features per frame.
fn frame_pool_matrix(frames: usize, tokens_per_frame: usize) -> Tensor {
    let mut data = vec![0.0; frames * frames * tokens_per_frame];
    let cols = frames * tokens_per_frame;
    for f in 0..frames {
        for k in 0..tokens_per_frame {
            data[f * cols + f * tokens_per_frame + k] = 1.0 / tokens_per_frame as f64;
        }
    }
    Tensor::new(vec![frames, cols], data).expect("pool matrix shape")
}

/// Everything one rollout leaves behind for the losses.
struct RolloutArtifacts {
    loss: NodeId,
    fm_value: f64,
    adv_value: f64,
    /// Per-frame bidirectional features of the generated window (detached).
    fake_features: Option<Tensor>,
    /// Matching features of the ground-truth window.
    real_features: Option<Tensor>,
}

/// Roll the student over one window of its own generations (keyframe at a
/// random step) and assemble the weighted flow-matching + adversarial loss.
#[allow(clippy::too_many_arguments)]
fn fsf_rollout_loss(
    g: &mut Graph,
    student_nodes: &ParamNodes,
    teacher_nodes: &ParamNodes,
    disc_nodes: Option<&DiscNodes>,
    student: &ModelParams,
    draw: &WindowDraw,
    config: &TrainConfig,
    schedule: &StepSchedule,
    rng: &mut ChaCha8Rng,
) -> TrainResult<RolloutArtifacts> {
    let w = config.train_window_frames;
    let chunk = config.chunk_size;
    let p = student.config.tokens_per_frame;
    let d = student.config.latent_dim;
    let gt = &draw.clean;
    let anchor = w - chunk;

    // steps until the cursor reaches the keyframe anchor
    let mut probe = 1;
    let mut chunk_steps = 0;
    while probe < anchor {
        probe += chunk.min(anchor - probe);
        chunk_steps += 1;
    }
    let kf_step = rng.random_range(0..chunk_steps);

    let mut tape = vec![TapeFrame {
        position: 0,
        latent: gt.frame(0),
        visible: vec![0],
        cross_frame: 0,
        lineage: Lineage::Context,
    }];
    let mut records: Vec<SpanRecord> = Vec::new();
    let mut cursor = 1;
    let mut step = 0;
    while cursor < anchor {
        if step == kf_step {
            let noise = normal_tensor(rng, &[chunk * p, d], 0.0, 1.0);
            records.push(generate_span(
                g,
                student_nodes,
                student,
                &mut tape,
                anchor,
                chunk,
                Some(anchor),
                &draw.cross,
                &draw.prompts,
                schedule,
                noise,
            )?);
        }
        let len = chunk.min(anchor - cursor);
        let noise = normal_tensor(rng, &[len * p, d], 0.0, 1.0);
        records.push(generate_span(
            g,
            student_nodes,
            student,
            &mut tape,
            cursor,
            len,
            None,
            &draw.cross,
            &draw.prompts,
            schedule,
            noise,
        )?);
        cursor += len;
        step += 1;
    }
    // the cursor has reached the anchor; the keyframe chunk is the window's
    // final frames and is adopted as-is
    debug_assert!(records.iter().any(|r| r.cross_anchor.is_some()));

    let mut fm_terms = Vec::with_capacity(records.len());
    for rec in &records {
        fm_terms.push(span_fm_term(
            g,
            student_nodes,
            &tape,
            rec,
            gt,
            &draw.cross,
            &draw.prompts,
            schedule,
            rng,
        )?);
    }
    let mut fm = fm_terms[0];
    for &t in &fm_terms[1..] {
        fm = g.add(fm, t)?;
    }
    let fm = g.scale(fm, 1.0 / fm_terms.len() as f64);
    let fm_value = g.value(fm).item();

    let mut loss = g.scale(fm, config.lambda_fm);
    let mut adv_value = 0.0;
    let mut fake_features = None;
    let mut real_features = None;
    if let Some(disc) = disc_nodes {
        // generated window in frame order: given frame 0, then each span
        let mut ordered: Vec<&SpanRecord> = records.iter().collect();
        ordered.sort_by_key(|r| r.start);
        let mut parts = vec![g.constant(gt.frame(0))];
        parts.extend(ordered.iter().map(|r| r.node));
        let full = g.concat(0, &parts)?;
        let levels = NoiseLevels::uniform(0.0, w)?;
        let self_mask = bidirectional_mask(w, p);
        let out = forward_node(
            g,
            teacher_nodes,
            &NodeForwardInputs {
                x: full,
                num_frames: w,
                frame_offset: 0,
                levels: &levels,
                self_mask: &self_mask,
                prompts: &draw.prompts,
                cross_mask: &draw.cross,
                cache: None,
                positions: None,
            },
        )?;
        let pool = g.constant(frame_pool_matrix(w, p));
        let pooled = g.matmul(pool, out.penultimate)?;
        let logits = disc.logits(g, pooled)?;
        let gen_rows = g.slice(logits, 0, 1, w - 1)?;
        let adv = g.bce_with_logits(gen_rows, &vec![1.0; w - 1])?;
        adv_value = g.value(adv).item();
        let adv_w = g.scale(adv, config.lambda_adv);
        loss = g.add(loss, adv_w)?;
        fake_features = Some(g.tensor(pooled));

        let gt_node = g.constant(gt.to_matrix());
        let real_out = forward_node(
            g,
            teacher_nodes,
            &NodeForwardInputs {
                x: gt_node,
                num_frames: w,
                frame_offset: 0,
                levels: &levels,
                self_mask: &self_mask,
                prompts: &draw.prompts,
                cross_mask: &draw.cross,
                cache: None,
                positions: None,
            },
        )?;
        let real_pooled = g.matmul(pool, real_out.penultimate)?;
        real_features = Some(g.tensor(real_pooled));
    }

    Ok(RolloutArtifacts {
        loss,
        fm_value,
        adv_value,
        fake_features,
        real_features,
    })
}

/// Warns when the discriminator stays essentially perfect for a whole run of
/// consecutive steps — the generator receives no usable signal past there.
pub(crate) struct CollapseMonitor {
    threshold: f64,
    window: usize,
    streak: usize,
}

impl CollapseMonitor {
    pub(crate) fn new(threshold: f64, window: usize) -> CollapseMonitor {
        CollapseMonitor {
            threshold,
            window,
            streak: 0,
        }
    }

    /// Feed one accuracy; `true` exactly when a full streak completes.
    pub(crate) fn observe(&mut self, accuracy: f64) -> bool {
        if accuracy > self.threshold {
            self.streak += 1;
            if self.streak == self.window {
                return true;
            }
        } else {
            self.streak = 0;
        }
        false
    }
}

/// Stage 2: student finetuning on its own rollouts with keyframe guidance.
/// Returns the updated student and discriminator.
pub fn fsf_train(
    student: &ModelParams,
    teacher: &ModelParams,
    disc: &DiscriminatorParams,
    config: &TrainConfig,
    dataset: &[Episode],
) -> TrainResult<(ModelParams, DiscriminatorParams, TrainReport)> {
    config.validate()?;
    config.expect_stage(TrainStage::Fsf)?;
    check_dataset_shapes(&student.config, dataset)?;
    disc.validate()?;
    if config.lambda_adv > 0.0 && disc.feature_dim() != teacher.config.model_dim {
        return Err(TrainError::BadConfig {
            reason: format!(
                "discriminator expects features of dim {}, teacher produces {}",
                disc.feature_dim(),
                teacher.config.model_dim
            ),
        });
    }
    let w = config.train_window_frames;
    let (train_ix, val_ix) = eligible_splits(dataset, w)?;
    let schedule = StepSchedule::default();

    let mut student = student.clone();
    let mut disc = disc.clone();
    let mut opt = AdamW::new(config.learning_rate);
    let mut disc_opt = AdamW::new(config.learning_rate);
    let mut rng = substream(config.seed, "fsf-data");
    let mut report = TrainReport::new(TrainStage::Fsf);
    let mut monitor = CollapseMonitor::new(0.99, 100);
    let adversarial = config.lambda_adv > 0.0;

    for iter in 0..config.iterations {
        let mut g = Graph::new();
        let student_nodes = ParamNodes::load(&mut g, &student, true);
        let teacher_nodes = ParamNodes::load(&mut g, teacher, false);
        let disc_nodes = adversarial.then(|| DiscNodes::load(&mut g, &disc, false));

        let mut batch_loss: Option<NodeId> = None;
        let mut fm_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut real_rows: Vec<Tensor> = Vec::new();
        let mut fake_rows: Vec<Tensor> = Vec::new();
        for _ in 0..config.batch_size {
            let draw = draw_window(dataset, &train_ix, w, &mut rng)?;
            let art = fsf_rollout_loss(
                &mut g,
                &student_nodes,
                &teacher_nodes,
                disc_nodes.as_ref(),
                &student,
                &draw,
                config,
                &schedule,
                &mut rng,
            )?;
            fm_sum += art.fm_value;
            adv_sum += art.adv_value;
            if let Some(f) = art.fake_features {
                fake_rows.push(f.slice(0, 1, w - 1)?);
            }
            if let Some(f) = art.real_features {
                real_rows.push(f.slice(0, 1, w - 1)?);
            }
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, art.loss)?,
                None => art.loss,
            });
        }
        let loss_node = g.scale(batch_loss.expect("batch_size > 0"), 1.0 / config.batch_size as f64);
        let loss = finite_or_diverged(g.value(loss_node).item(), TrainStage::Fsf, iter)?;
        let grads = g.backward(loss_node)?;
        let grad_list: Vec<Tensor> = student_nodes
            .ids
            .iter()
            .map(|(_, id)| grads.get_or_zeros(*id, g.value(*id).shape()))
            .collect();
        opt.step(&mut student.named_mut(), &grad_list)?;

        let b = config.batch_size as f64;
        report.loss_curve.push(loss);
        if adversarial {
            let reals: Vec<&Tensor> = real_rows.iter().collect();
            let fakes: Vec<&Tensor> = fake_rows.iter().collect();
            let (d_loss, d_acc) = disc_step(
                &mut disc,
                &mut disc_opt,
                &Tensor::concat(0, &reals)?,
                &Tensor::concat(0, &fakes)?,
            )?;
            finite_or_diverged(d_loss, TrainStage::Fsf, iter)?;
            if monitor.observe(d_acc) {
                report.warnings.push((
                    iter,
                    format!(
                        "discriminator accuracy above 0.99 for 100 consecutive steps (loss {d_loss:.4})"
                    ),
                ));
            }
            report.push_components(&[
                ("fm", fm_sum / b),
                ("adv", adv_sum / b),
                ("disc_loss", d_loss),
                ("disc_acc", d_acc),
            ]);
        } else {
            report.push_components(&[("fm", fm_sum / b)]);
        }

        if (iter + 1) % PROBE_STRIDE == 0 || iter + 1 == config.iterations {
            if let Some(slope) = drift_probe(&student, dataset, &val_ix, config.seed)? {
                report.drift_curve.push((iter, slope));
            }
        }
    }

    report.final_checksum = student.checksum();
    Ok((student, disc, report))
}

/// One alternating discriminator update on pooled feature rows.
fn disc_step(
    disc: &mut DiscriminatorParams,
    opt: &mut AdamW,
    real: &Tensor,
    fake: &Tensor,
) -> TrainResult<(f64, f64)> {
    let mut g = Graph::new();
    let nodes = DiscNodes::load(&mut g, disc, true);
    let real_in = g.constant(real.clone());
    let fake_in = g.constant(fake.clone());
    let logits_real = nodes.logits(&mut g, real_in)?;
    let logits_fake = nodes.logits(&mut g, fake_in)?;
    let n_real = real.shape()[0];
    let n_fake = fake.shape()[0];
    let loss_real = g.bce_with_logits(logits_real, &vec![1.0; n_real])?;
    let loss_fake = g.bce_with_logits(logits_fake, &vec![0.0; n_fake])?;
    let sum = g.add(loss_real, loss_fake)?;
    let loss = g.scale(sum, 0.5);
    let loss_value = g.value(loss).item();

    let correct = g.value(logits_real).data().iter().filter(|&&z| z > 0.0).count()
        + g.value(logits_fake).data().iter().filter(|&&z| z <= 0.0).count();
    let accuracy = correct as f64 / (n_real + n_fake) as f64;

    let grads = g.backward(loss)?;
    let ids = [nodes.w1, nodes.b1, nodes.w2, nodes.b2];
    let grad_list: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get_or_zeros(id, g.value(id).shape()))
        .collect();
    opt.step(&mut disc.named_mut(), &grad_list)?;
    Ok((loss_value, accuracy))
}

/// Drift slope of a keyframe-guided rollout on a held-out episode, or `None`
/// when the episode is too short to probe.
fn drift_probe(
    student: &ModelParams,
    dataset: &[Episode],
    val_ix: &[usize],
    seed: u64,
) -> TrainResult<Option<f64>> {
    let ep = &dataset[val_ix[0]];
    let config = SamplerConfig {
        total_frames: ep.video.num_frames(),
        ..SamplerConfig::default()
    };
    if config.validate().is_err() || ep.video.num_frames() < crate::procworld::DRIFT_MIN_FRAMES {
        return Ok(None);
    }
    let out = stream(
        student,
        &config,
        &ep.prompts,
        &ep.video.frame(0),
        &[],
        seed ^ 0x5f5f,
    )?;
    let report = drift_report(&out.video, &|f| raw_state_embed(f))?;
    Ok(Some(report.ratio))
}

/// Model-vs-baseline keyframe forecasting error at one probe point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfProbePoint {
    pub offset_chunks: usize,
    pub model_mse: f64,
    pub copy_mse: f64,
}

/// Predict a chunk `offset` chunks past the visible prefix of an episode and
/// compare against ground truth and the copy-last-frame baseline.
pub fn kf_probe(
    params: &ModelParams,
    episode: &Episode,
    cursor: usize,
    offsets: &[usize],
    chunk: usize,
    schedule: &StepSchedule,
    seed: u64,
) -> TrainResult<Vec<KfProbePoint>> {
    let video = &episode.video;
    let t = video.num_frames();
    let p = video.tokens_per_frame();
    let d = video.channels();
    if cursor == 0 || chunk == 0 {
        return Err(TrainError::BadConfig {
            reason: format!("probe needs cursor ≥ 1 and chunk ≥ 1, got {cursor}/{chunk}"),
        });
    }
    let cross_full = window_cross_mask(&episode.prompts, t)?;
    let mut rng = substream(seed, "kf-probe");
    let mut out = Vec::with_capacity(offsets.len());
    for &offset in offsets {
        let anchor = cursor + offset * chunk;
        if anchor + chunk > t {
            return Err(TrainError::BadConfig {
                reason: format!(
                    "probe offset {offset} lands at frames {anchor}..{} of {t}",
                    anchor + chunk
                ),
            });
        }
        let context = video.window(0, cursor)?.to_matrix();
        let query = Tensor::zeros(&[chunk * p, d]);
        let window = LatentVideo::from_matrix(&Tensor::concat(0, &[&context, &query])?, p, 0)?;
        let mut positions: Vec<usize> = (0..cursor).collect();
        positions.extend(anchor..anchor + chunk);
        let n = cursor + chunk;
        let self_mask = AttentionMask::from_fn(n, n, |i, j| {
            if i < cursor {
                j < cursor && chunk_of(j, chunk) <= chunk_of(i, chunk)
            } else {
                true
            }
        })?;
        let cross = AttentionMask::from_fn(n, cross_full.cols(), |i, j| {
            let frame = if i < cursor { i } else { anchor };
            cross_full.get(frame, j)
        })?;
        let levels = NoiseLevels::uniform(0.0, n)?;
        let init_noise = normal_tensor(&mut rng, &[chunk, p, d], 0.0, 1.0);
        let result = crate::diffusion::few_step_denoise(&crate::diffusion::DenoiseRequest {
            params,
            window: &window,
            context_levels: &levels,
            query_start: cursor,
            query_len: chunk,
            schedule,
            self_mask: &self_mask,
            prompts: &episode.prompts,
            cross_mask: &cross,
            cache: None,
            positions: Some(&positions),
            init_noise: &init_noise,
        })?;
        let predicted = result.window.window(cursor, chunk)?.to_matrix();
        let gt = video.window(anchor, chunk)?.to_matrix();
        let model_mse = predicted.mse(&gt)?.item();
        let last = video.frame(cursor - 1);
        let copies: Vec<&Tensor> = (0..chunk).map(|_| &last).collect();
        let copied = Tensor::concat(0, &copies)?;
        let copy_mse = copied.mse(&gt)?.item();
        out.push(KfProbePoint {
            offset_chunks: offset,
            model_mse,
            copy_mse,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procworld::generate_episode;
    use crate::procworld::WorldSpec;

    fn test_model() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            model_dim: 8,
            layers: 2,
            heads: 2,
            tokens_per_frame: 1,
            vocab: 32,
            mlp_hidden: 16,
        }
    }

    /// Random weights with a live (non-zero) output head.
    fn live_params(seed: u64) -> ModelParams {
        let cfg = test_model();
        let mut params =
            ModelParams::init(&cfg, &mut substream(seed, "training-test-params")).unwrap();
        let mut rng = substream(seed, "training-test-head");
        params.out_proj_w = normal_tensor(&mut rng, &[cfg.model_dim, cfg.latent_dim], 0.0, 0.3);
        params.out_proj_b = normal_tensor(&mut rng, &[cfg.latent_dim], 0.0, 0.1);
        params
    }

    /// 4-state world matching the test model's latent geometry.
    fn tiny_world() -> WorldSpec {
        WorldSpec::with_dims(4, 4, 2, 0.01, 0.5, 11)
    }

    fn procedural_dataset(seed: u64, episodes: usize, frames: usize) -> Vec<Episode> {
        let spec = tiny_world();
        let mut rng = substream(seed, "training-test-data");
        (0..episodes)
            .map(|_| generate_episode(&spec, &mut rng, frames, 2).unwrap())
            .collect()
    }

    /// Episodes whose every frame repeats one random row.
    fn constant_dataset(seed: u64, episodes: usize, frames: usize) -> Vec<Episode> {
        let spec = tiny_world();
        let mut rng = substream(seed, "training-test-const");
        (0..episodes)
            .map(|_| {
                let mut ep = generate_episode(&spec, &mut rng, frames, 1).unwrap();
                let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut data = Vec::with_capacity(frames * 4);
                for _ in 0..frames {
                    data.extend_from_slice(&row);
                }
                ep.video =
                    LatentVideo::new(Tensor::new(vec![frames, 1, 4], data).unwrap(), 0).unwrap();
                ep
            })
            .collect()
    }

    fn quarter_means(curve: &[f64]) -> (f64, f64) {
        let q = curve.len() / 4;
        let head = curve[..q].iter().sum::<f64>() / q as f64;
        let tail = curve[curve.len() - q..].iter().sum::<f64>() / q as f64;
        (head, tail)
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig {
            iterations: 10,
            ..TrainConfig::teacher()
        };
        ok.validate().unwrap();
        let cases = [
            TrainConfig { iterations: 0, ..ok.clone() },
            TrainConfig { learning_rate: -1.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { chunk_size: 0, ..ok.clone() },
            TrainConfig { train_window_frames: 4, ..ok.clone() },
            TrainConfig { p_block: 1.5, ..ok.clone() },
            TrainConfig { max_hidden: 0, ..ok.clone() },
            TrainConfig { lambda_adv: -0.1, ..ok.clone() },
            TrainConfig { val_loss_limit: Some(0.0), ..ok.clone() },
        ];
        for bad in cases {
            assert!(
                matches!(bad.validate(), Err(TrainError::BadConfig { .. })),
                "accepted {bad:?}"
            );
        }
    }

    #[test]
    fn config_roundtrips_through_json() {
        let config = TrainConfig {
            stage: TrainStage::Fsf,
            lambda_adv: 0.25,
            seed: 9,
            ..TrainConfig::fsf()
        };
        let json = serde_json::to_string(&config).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        // missing fields fall back to defaults
        let sparse: TrainConfig = serde_json::from_str(r#"{"stage":"pca","seed":3}"#).unwrap();
        assert_eq!(sparse.stage, TrainStage::Pca);
        assert_eq!(sparse.seed, 3);
        assert_eq!(sparse.train_window_frames, 21);
    }

    #[test]
    fn adamw_matches_hand_computed_step() {
        // single weight w=1, gradient g=0.5, lr=0.1:
        //   m = 0.1·0.5 = 0.05, v = 0.001·0.25
        //   m̂ = 0.5, v̂ = 0.25 (bias correction at t=1)
        //   w ← 1 − 0.1·(0.5/(0.5 + 1e-8) + 1e-4·1)
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.1);
        let grad = Tensor::new(vec![1], vec![0.5]).unwrap();
        opt.step(&mut [("w".into(), &mut w)], &[grad]).unwrap();
        let expected = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 1e-4);
        assert!((w.data()[0] - expected).abs() < 1e-12, "got {}", w.data()[0]);
    }

    #[test]
    fn adamw_rejects_misaligned_gradients() {
        let mut w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(0.1);
        let err = opt.step(&mut [("w".into(), &mut w)], &[]).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig { .. }));
        let mut opt = AdamW::new(0.1);
        let wrong = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let err = opt
            .step(&mut [("w".into(), &mut w)], &[wrong])
            .unwrap_err();
        assert!(matches!(err, TrainError::BadConfig { .. }));
    }

    #[test]
    fn smoothed_averages_trailing_window() {
        let curve = [4.0, 2.0, 6.0, 0.0];
        assert_eq!(smoothed(&curve, 2), vec![4.0, 3.0, 4.0, 3.0]);
        assert_eq!(smoothed(&curve, 1), curve.to_vec());
        // window larger than the prefix averages what exists
        assert_eq!(smoothed(&curve, 10)[1], 3.0);
    }

    #[test]
    fn csv_rows_cover_losses_probes_and_warnings() {
        let report = TrainReport {
            stage: TrainStage::Fsf,
            loss_curve: vec![3.0, 2.0, 1.0],
            components: vec![("fm".into(), vec![2.5, 1.5, 0.5])],
            val_curve: vec![(2, 0.9)],
            drift_curve: vec![(2, 0.01)],
            warnings: vec![(1, "collapse".into())],
            final_checksum: 7,
        };
        let rows = report.csv_rows("run-a", 2);
        let has = |metric: &str, value: f64| {
            rows.iter()
                .any(|(id, m, v)| id == "run-a" && m == metric && (*v - value).abs() < 1e-12)
        };
        assert!(has("iter000000.loss", 3.0));
        assert!(has("iter000002.loss", 1.0));
        assert!(!rows.iter().any(|(_, m, _)| m == "iter000001.loss"));
        assert!(has("iter000000.fm", 2.5));
        assert!(has("iter000002.val_loss", 0.9));
        assert!(has("iter000002.drift_slope", 0.01));
        assert!(has("warning_iteration", 1.0));
    }

    #[test]
    fn window_prompts_clips_and_rebases() {
        let prompts = PromptSchedule {
            global_tokens: vec![1],
            segments: vec![
                PromptSegment { frame_start: 0, frame_end: 5, tokens: vec![8] },
                PromptSegment { frame_start: 5, frame_end: 9, tokens: vec![9] },
            ],
        };
        let w = window_prompts(&prompts, 3, 4);
        assert_eq!(w.global_tokens, vec![1]);
        assert_eq!(
            w.segments,
            vec![
                PromptSegment { frame_start: 0, frame_end: 2, tokens: vec![8] },
                PromptSegment { frame_start: 2, frame_end: 4, tokens: vec![9] },
            ]
        );
        w.validate(32).unwrap();
        // a window inside one segment keeps only that segment
        let inner = window_prompts(&prompts, 5, 3);
        assert_eq!(inner.segments.len(), 1);
        assert_eq!(inner.segments[0].tokens, vec![9]);
    }

    #[test]
    fn span_verifier_flags_leaky_mask() {
        let spans = [SpanSpec { query_chunk: 2, hidden_count: 1 }];
        let good = pca_mask(9, 3, &spans).unwrap();
        verify_span_blocking(&good, &spans, 3, 9).unwrap();
        let leaky = AttentionMask::all_true(9, 9);
        let err = verify_span_blocking(&leaky, &spans, 3, 9).unwrap_err();
        assert!(matches!(err, TrainError::MaskViolation { .. }));
    }

    #[test]
    fn discriminator_roundtrip_and_validation() {
        let mut rng = substream(3, "training-test-disc");
        let disc = DiscriminatorParams::init(8, &mut rng);
        disc.validate().unwrap();
        assert_eq!(disc.feature_dim(), 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disc.bin");
        disc.save(&path).unwrap();
        let loaded = DiscriminatorParams::load(&path).unwrap();
        assert_eq!(loaded.checksum(), disc.checksum());

        let mut broken = disc.clone();
        broken.w2 = Tensor::zeros(&[3, 1]);
        assert!(broken.validate().is_err());
        std::fs::write(&path, "not a discriminator\n").unwrap();
        assert!(DiscriminatorParams::load(&path).is_err());
    }

    #[test]
    fn collapse_monitor_fires_after_full_streak() {
        let mut m = CollapseMonitor::new(0.99, 100);
        for _ in 0..99 {
            assert!(!m.observe(1.0));
        }
        assert!(m.observe(1.0));
        // staying collapsed does not re-fire
        assert!(!m.observe(1.0));
        // a healthy step resets the streak
        assert!(!m.observe(0.5));
        for _ in 0..99 {
            assert!(!m.observe(1.0));
        }
        assert!(m.observe(1.0));
    }

    fn quick_teacher_config(iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            train_window_frames: 9,
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::teacher()
        }
    }

    #[test]
    fn teacher_fits_constant_videos() {
        // one shared constant video: the model can memorize it outright, so
        // the flow-matching loss collapses to near zero and samples land on
        // the constant
        let mut dataset = constant_dataset(1, 10, 12);
        let shared = dataset[0].video.clone();
        for ep in &mut dataset {
            ep.video = shared.clone();
        }
        let config = TrainConfig {
            learning_rate: 5e-3,
            ..quick_teacher_config(800, 5)
        };
        let (params, report) = train_teacher(&test_model(), &config, &dataset).unwrap();
        let smooth = smoothed(&report.loss_curve, 50);
        let initial = smooth[10];
        let finals = *smooth.last().unwrap();
        assert!(initial > 0.8, "untrained loss unexpectedly low: {initial}");
        assert!(finals < 0.15, "loss stuck: {initial} -> {finals}");

        // a full-window bidirectional sample comes out near-constant
        let ep = &dataset[0];
        let w = 9;
        let window = ep.video.window(0, w).unwrap();
        let prompts = window_prompts(&ep.prompts, 0, w);
        let cross = window_cross_mask(&prompts, w).unwrap();
        let mut rng = substream(9, "training-test-sample");
        let init_noise = normal_tensor(&mut rng, &[w, 1, 4], 0.0, 1.0);
        let result = crate::diffusion::few_step_denoise(&crate::diffusion::DenoiseRequest {
            params: &params,
            window: &window,
            context_levels: &NoiseLevels::uniform(0.0, w).unwrap(),
            query_start: 0,
            query_len: w,
            schedule: &StepSchedule::default(),
            self_mask: &bidirectional_mask(w, 1),
            prompts: &prompts,
            cross_mask: &cross,
            cache: None,
            positions: None,
            init_noise: &init_noise,
        })
        .unwrap();
        let err = result.window.to_matrix().mse(&window.to_matrix()).unwrap().item();
        assert!(err < 0.1, "sample far from the constant: mse {err}");
        let m = result.window.to_matrix();
        let mut mean = vec![0.0; 4];
        for f in 0..w {
            for c in 0..4 {
                mean[c] += m.data()[f * 4 + c] / w as f64;
            }
        }
        let spread: f64 = (0..w)
            .map(|f| {
                (0..4)
                    .map(|c| (m.data()[f * 4 + c] - mean[c]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (w * 4) as f64;
        assert!(spread < 0.05, "sampled frames vary too much: spread {spread}");
    }

    #[test]
    fn teacher_loss_trend_decreases() {
        let dataset = procedural_dataset(2, 10, 12);
        let config = quick_teacher_config(120, 6);
        let (_, report) = train_teacher(&test_model(), &config, &dataset).unwrap();
        assert_eq!(report.loss_curve.len(), 120);
        let smooth = smoothed(&report.loss_curve, 20);
        let (head, tail) = quarter_means(&smooth);
        assert!(tail < 0.8 * head, "no clear trend: {head} -> {tail}");
        assert!(!report.val_curve.is_empty());
        let (last_iter, last_val) = *report.val_curve.last().unwrap();
        assert_eq!(last_iter, 119);
        assert!(last_val.is_finite());
    }

    #[test]
    fn teacher_runs_deterministically() {
        let dataset = procedural_dataset(3, 6, 12);
        let config = quick_teacher_config(12, 7);
        let (a, ra) = train_teacher(&test_model(), &config, &dataset).unwrap();
        let (b, rb) = train_teacher(&test_model(), &config, &dataset).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra.loss_curve, rb.loss_curve);
        let other = TrainConfig { seed: 8, ..config };
        let (c, _) = train_teacher(&test_model(), &other, &dataset).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn teacher_aborts_on_divergence() {
        // frames so large their squared error overflows: the first measured
        // loss is non-finite and the run must stop rather than keep stepping
        let mut dataset = procedural_dataset(4, 6, 12);
        for ep in &mut dataset {
            ep.video =
                LatentVideo::new(Tensor::filled(&[12, 1, 4], 1e160), 0).unwrap();
        }
        let config = quick_teacher_config(10, 7);
        let err = train_teacher(&test_model(), &config, &dataset).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::Diverged { stage: TrainStage::Teacher, iteration: 0, .. }
            ),
            "got {err:?}"
        );
    }

    #[test]
    fn teacher_enforces_validation_limit() {
        let dataset = procedural_dataset(5, 6, 12);
        let config = TrainConfig {
            val_loss_limit: Some(1e-9),
            ..quick_teacher_config(5, 7)
        };
        let err = train_teacher(&test_model(), &config, &dataset).unwrap_err();
        assert!(matches!(err, TrainError::AboveLossLimit { .. }));
    }

    fn quick_pca_config(iterations: usize, lambda_cos: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            train_window_frames: 9,
            learning_rate: 1e-3,
            lambda_cos,
            seed,
            ..TrainConfig::pca()
        }
    }

    #[test]
    fn pca_student_tracks_teacher() {
        let teacher = live_params(21);
        let dataset = procedural_dataset(6, 8, 12);
        for lambda_cos in [0.0, 0.2] {
            let config = quick_pca_config(60, lambda_cos, 3);
            let (student, report) = pca_distill(&teacher, &config, &dataset).unwrap();
            let smooth = smoothed(&report.loss_curve, 10);
            let (head, tail) = quarter_means(&smooth);
            assert!(
                tail < head,
                "distillation not improving at lambda_cos={lambda_cos}: {head} -> {tail}"
            );
            assert_ne!(student.checksum(), teacher.checksum());
            let names: Vec<&str> =
                report.components.iter().map(|(n, _)| n.as_str()).collect();
            assert_eq!(names, ["reg", "cos"]);
            assert!(!report.val_curve.is_empty());
        }
    }

    #[test]
    fn pca_pure_next_frame_mode_improves_validation() {
        let teacher = live_params(22);
        let dataset = procedural_dataset(7, 8, 12);
        let config = TrainConfig {
            p_block: 0.0,
            ..quick_pca_config(60, 0.0, 4)
        };
        let (_, report) = pca_distill(&teacher, &config, &dataset).unwrap();
        let vals: Vec<f64> = report.val_curve.iter().map(|&(_, v)| v).collect();
        assert!(vals.len() >= 2);
        assert!(
            vals.last().unwrap() < vals.first().unwrap(),
            "validation gap did not shrink: {vals:?}"
        );
    }

    #[test]
    fn pca_runs_deterministically() {
        let teacher = live_params(23);
        let dataset = procedural_dataset(8, 6, 12);
        let config = quick_pca_config(8, 0.1, 5);
        let (a, _) = pca_distill(&teacher, &config, &dataset).unwrap();
        let (b, _) = pca_distill(&teacher, &config, &dataset).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    fn quick_fsf_config(iterations: usize, lambda_adv: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            train_window_frames: 9,
            learning_rate: 3e-4,
            lambda_adv,
            seed,
            ..TrainConfig::fsf()
        }
    }

    #[test]
    fn fsf_fm_only_leaves_discriminator_untouched() {
        let student = live_params(31);
        let teacher = live_params(32);
        let mut rng = substream(33, "training-test-disc-init");
        let disc = DiscriminatorParams::init(8, &mut rng);
        let before = disc.checksum();
        let dataset = procedural_dataset(9, 6, 12);
        let config = quick_fsf_config(3, 0.0, 6);
        let (out, disc_out, report) =
            fsf_train(&student, &teacher, &disc, &config, &dataset).unwrap();
        assert_eq!(disc_out.checksum(), before);
        assert_ne!(out.checksum(), student.checksum());
        let names: Vec<&str> = report.components.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["fm"]);
        assert!(report.loss_curve.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fsf_adversarial_updates_discriminator() {
        let student = live_params(34);
        let teacher = live_params(35);
        let mut rng = substream(36, "training-test-disc-init");
        let disc = DiscriminatorParams::init(8, &mut rng);
        let before = disc.checksum();
        let dataset = procedural_dataset(10, 6, 12);
        let config = quick_fsf_config(3, 0.1, 7);
        let (_, disc_out, report) =
            fsf_train(&student, &teacher, &disc, &config, &dataset).unwrap();
        assert_ne!(disc_out.checksum(), before);
        let names: Vec<&str> = report.components.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["fm", "adv", "disc_loss", "disc_acc"]);
        let accs = &report.components[3].1;
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn fsf_rejects_mismatched_discriminator() {
        let student = live_params(37);
        let teacher = live_params(38);
        let mut rng = substream(39, "training-test-disc-init");
        let disc = DiscriminatorParams::init(5, &mut rng);
        let dataset = procedural_dataset(11, 6, 12);
        let config = quick_fsf_config(2, 0.1, 8);
        let err = fsf_train(&student, &teacher, &disc, &config, &dataset).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig { .. }));
    }

    #[test]
    fn fsf_gradients_reach_every_student_tensor() {
        let student = live_params(41);
        let teacher = live_params(42);
        let mut rng = substream(43, "training-test-disc-init");
        let disc = DiscriminatorParams::init(8, &mut rng);
        let dataset = procedural_dataset(12, 6, 12);
        let config = quick_fsf_config(1, 0.5, 9);

        let (train_ix, _) = eligible_splits(&dataset, 9).unwrap();
        let mut data_rng = substream(config.seed, "fsf-data");
        let draw = draw_window(&dataset, &train_ix, 9, &mut data_rng).unwrap();
        let mut g = Graph::new();
        let student_nodes = ParamNodes::load(&mut g, &student, true);
        let teacher_nodes = ParamNodes::load(&mut g, &teacher, false);
        let disc_nodes = DiscNodes::load(&mut g, &disc, false);
        let art = fsf_rollout_loss(
            &mut g,
            &student_nodes,
            &teacher_nodes,
            Some(&disc_nodes),
            &student,
            &draw,
            &config,
            &StepSchedule::default(),
            &mut data_rng,
        )
        .unwrap();
        let grads = g.backward(art.loss).unwrap();
        for (name, id) in &student_nodes.ids {
            let norm = grads
                .get_or_zeros(*id, g.value(*id).shape())
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
            assert!(norm > 0.0, "no gradient reached {name}");
        }
    }

    #[test]
    fn fsf_rollouts_never_condition_on_ground_truth() {
        // a handcrafted tape with a ground-truth frame past position 0 must
        // be rejected before any generation happens
        let tape = vec![
            TapeFrame {
                position: 0,
                latent: Tensor::zeros(&[1, 4]),
                visible: vec![0],
                cross_frame: 0,
                lineage: Lineage::Context,
            },
            TapeFrame {
                position: 1,
                latent: Tensor::zeros(&[1, 4]),
                visible: vec![0, 1],
                cross_frame: 1,
                lineage: Lineage::Context,
            },
        ];
        let err = assert_self_forcing(&tape).unwrap_err();
        assert!(matches!(err, TrainError::LineageViolation { .. }));
    }

    #[test]
    fn fsf_runs_deterministically() {
        let student = live_params(44);
        let teacher = live_params(45);
        let mut rng = substream(46, "training-test-disc-init");
        let disc = DiscriminatorParams::init(8, &mut rng);
        let dataset = procedural_dataset(13, 6, 12);
        let config = quick_fsf_config(2, 0.1, 10);
        let (a, da, _) = fsf_train(&student, &teacher, &disc, &config, &dataset).unwrap();
        let (b, db, _) = fsf_train(&student, &teacher, &disc, &config, &dataset).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(da.checksum(), db.checksum());
        let other = TrainConfig { seed: 11, ..config };
        let (c, _, _) = fsf_train(&student, &teacher, &disc, &other, &dataset).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn kf_probe_reports_model_and_baseline_error() {
        let params = live_params(51);
        let spec = tiny_world();
        let mut rng = substream(52, "training-test-probe");
        let episode = generate_episode(&spec, &mut rng, 30, 2).unwrap();
        let points = kf_probe(
            &params,
            &episode,
            6,
            &[1, 2, 3],
            3,
            &StepSchedule::default(),
            53,
        )
        .unwrap();
        assert_eq!(points.len(), 3);
        for p in &points {
            assert!(p.model_mse.is_finite() && p.model_mse > 0.0);
            assert!(p.copy_mse.is_finite() && p.copy_mse > 0.0);
        }
        assert_eq!(points[0].offset_chunks, 1);
        // an offset past the episode end is rejected
        let err = kf_probe(
            &params,
            &episode,
            6,
            &[100],
            3,
            &StepSchedule::default(),
            53,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::BadConfig { .. }));
    }
}
