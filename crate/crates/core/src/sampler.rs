//! Streaming rollout loop: chunked next-frame generation with optional
//! future-keyframe guidance.
//!
//! A stream starts from one conditioning frame and emits latent frames in
//! small chunks, each denoised from fresh noise while attending to a bounded
//! window of committed history (the past region of a [`DualRegionKVCache`])
//! and, when enabled, to keyframes the model predicted for its own future
//! (the future region). Keyframes are emitted every few rollouts at a fixed
//! horizon ahead of the cursor; when the cursor reaches a keyframe the stream
//! adopts it verbatim instead of regenerating those frames. Prompt segments
//! can be swapped mid-stream, which re-predicts any pending keyframes whose
//! segment changed while leaving already-emitted frames untouched.
//!
//! Two execution modes produce the same video up to floating-point
//! reassociation: [`CacheMode::Cached`] runs incrementally against the K/V
//! cache, while [`CacheMode::DenseRecompute`] replays every committed frame
//! through the model each step with per-row masks reconstructing exactly what
//! each frame saw when it was committed. The dense mode exists to audit the
//! cache path, so an equivalence check between the two is cheap to state.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{few_step_denoise, DenoiseRequest, DiffusionError, StepSchedule};
use crate::kvcache::{CacheEntry, CacheError, DualRegionKVCache};
use crate::masks::{kf_cross_mask, AttentionMask, MaskError};
use crate::model::{
    LatentVideo, ModelError, ModelParams, NoiseLevels, PromptSchedule,
};
use crate::rng::{normal_tensor, substream};
use crate::tensor::{Tensor, TensorError};

pub type SamplerResult<T> = Result<T, SamplerError>;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("sampler config invalid: {reason}")]
    BadConfig { reason: String },
    #[error("stream horizon exceeded: cursor {cursor}, total {total}")]
    HorizonExceeded { cursor: usize, total: usize },
    #[error("conditioning frame shape {got:?}, expected {expected:?}")]
    ConditioningShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("no pending keyframe at cursor {cursor} (front {front:?})")]
    NoKeyframeDue { cursor: usize, front: Option<usize> },
    #[error("stream state inconsistent: {reason}")]
    InternalState { reason: String },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether generation attends to self-predicted future keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Chunked autoregression on past frames only.
    PlainAr,
    /// Past frames plus pending future keyframes.
    FutureGuided,
}

/// How attention context is supplied during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Incremental K/V cache (the production path).
    Cached,
    /// Re-run every committed frame each step, masks rebuilt from records.
    DenseRecompute,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Frames generated per rollout iteration.
    pub chunk_size: usize,
    /// Predict a keyframe every this many rollouts; `None` disables
    /// keyframe prediction entirely (the stream degenerates to plain
    /// autoregression even in future-guided mode).
    pub kf_period: Option<usize>,
    /// How far ahead of the cursor a keyframe is anchored.
    pub kf_horizon: usize,
    /// Total frames in the finished video, conditioning frame included.
    pub total_frames: usize,
    pub mode: GuidanceMode,
    pub cache_mode: CacheMode,
    pub step_schedule: StepSchedule,
    /// Cache capacities, counted in frames.
    pub capacity_past: usize,
    pub capacity_future: usize,
    /// When false, every frame's text attention sees all prompt tokens
    /// instead of only the global tokens plus its own segment's — the
    /// "masking off" arm of multi-prompt control comparisons.
    pub temporal_masking: bool,
}

impl Default for SamplerConfig {
    fn default() -> SamplerConfig {
        SamplerConfig {
            chunk_size: 3,
            kf_period: Some(6),
            kf_horizon: 18,
            total_frames: 48,
            mode: GuidanceMode::FutureGuided,
            cache_mode: CacheMode::Cached,
            step_schedule: StepSchedule::default(),
            capacity_past: 9,
            capacity_future: 9,
            temporal_masking: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> SamplerResult<()> {
        let fail = |reason: String| Err(SamplerError::BadConfig { reason });
        if self.chunk_size == 0 {
            return fail("chunk_size must be at least 1".into());
        }
        if self.total_frames < 2 {
            return fail(format!(
                "total_frames {} leaves nothing to generate",
                self.total_frames
            ));
        }
        if self.kf_horizon <= self.chunk_size {
            return fail(format!(
                "kf_horizon {} must exceed chunk_size {}",
                self.kf_horizon, self.chunk_size
            ));
        }
        if self.kf_period == Some(0) {
            return fail("kf_period must be at least 1".into());
        }
        if self.capacity_past == 0 || self.capacity_future == 0 {
            return fail("cache capacities must be at least 1".into());
        }
        if self.mode == GuidanceMode::FutureGuided
            && self.kf_period.is_some()
            && self.capacity_future < self.chunk_size
        {
            return fail(format!(
                "capacity_future {} cannot hold one {}-frame keyframe",
                self.capacity_future, self.chunk_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Chunk,
    Kf,
    Consume,
    PromptUpdate,
    Error,
}

/// One line of the stream's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    #[serde(rename = "type")]
    pub kind: EventKind,
    /// Half-open frame range the event concerns.
    pub frame_range: (usize, usize),
    /// Seconds since the stream started.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Serialize events as line-delimited JSON, one record per line.
pub fn events_to_jsonl(events: &[StreamEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serialization"));
        out.push('\n');
    }
    out
}

/// Mid-stream replacement of one prompt segment's tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUpdate {
    /// The stream applies the update once its cursor reaches this frame.
    pub effective_from_frame: usize,
    pub segment_index: usize,
    /// Replacement tokens; must match the segment's existing token count so
    /// the text-token layout stays fixed.
    pub tokens: Vec<usize>,
}

/// What one committed frame looked like and saw when it was committed —
/// enough to rebuild its K/V exactly in dense-recompute mode and to assemble
/// the final video.
#[derive(Debug, Clone)]
struct FrameRecord {
    position: usize,
    /// Clean latent, `[P, d]`.
    latent: Tensor,
    /// Absolute positions (itself included) this frame attended to.
    visible: Vec<usize>,
    /// Frame whose segment chose this row's text tokens: the frame itself
    /// for chunk rows, the anchor for keyframe rows.
    cross_frame: usize,
}

/// Finished stream: the assembled video plus its event log and call counts.
pub struct StreamOutput {
    pub video: LatentVideo,
    pub events: Vec<StreamEvent>,
    pub denoise_calls: usize,
    pub model_calls: usize,
}

/// Live state of one stream. Drive it with [`StreamState::rollout_step`] (or
/// the [`stream`] convenience loop), or call [`StreamState::next_chunk`],
/// [`StreamState::predict_kf`] and [`StreamState::consume`] directly.
pub struct StreamState {
    config: SamplerConfig,
    /// Mutable copy: prompt updates rewrite segment tokens in place.
    prompts: PromptSchedule,
    cache: DualRegionKVCache,
    records: Vec<FrameRecord>,
    /// Positions emitted so far, ascending. The cache's past region always
    /// mirrors its tail.
    committed: Vec<usize>,
    /// Anchors of predicted-but-not-yet-reached keyframes, ascending; each
    /// spans `chunk_size` frames.
    pending: Vec<usize>,
    cursor: usize,
    rollout_index: usize,
    events: Vec<StreamEvent>,
    denoise_calls: usize,
    model_calls: usize,
    rng: ChaCha8Rng,
    started: Instant,
}

impl StreamState {
    /// Open a stream: validates the config, commits the conditioning frame
    /// as frame 0, and places the cursor at frame 1.
    pub fn new(
        config: SamplerConfig,
        params: &ModelParams,
        prompts: PromptSchedule,
        conditioning: &Tensor,
        seed: u64,
    ) -> SamplerResult<StreamState> {
        config.validate()?;
        prompts.validate(params.config.vocab)?;
        if prompts.num_frames() < config.total_frames {
            return Err(SamplerError::BadConfig {
                reason: format!(
                    "prompt schedule covers {} frames, stream needs {}",
                    prompts.num_frames(),
                    config.total_frames
                ),
            });
        }
        let p = params.config.tokens_per_frame;
        let d = params.config.latent_dim;
        if conditioning.shape() != [p, d] {
            return Err(SamplerError::ConditioningShape {
                got: conditioning.shape().to_vec(),
                expected: vec![p, d],
            });
        }

        let mut state = StreamState {
            cache: DualRegionKVCache::new(config.capacity_past, config.capacity_future)?,
            config,
            prompts,
            records: Vec::new(),
            committed: Vec::new(),
            pending: Vec::new(),
            cursor: 0,
            rollout_index: 0,
            events: Vec::new(),
            denoise_calls: 0,
            model_calls: 0,
            rng: substream(seed, "stream-noise"),
            started: Instant::now(),
        };
        let frame0 = LatentVideo::new(conditioning.reshape(vec![1, p, d])?, 0)?;
        state.commit_span(params, &frame0, vec![0], 0, false)?;
        state.committed.push(0);
        state.cursor = 1;
        Ok(state)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// The prompt schedule currently in force (updates mutate it).
    pub fn prompts(&self) -> &PromptSchedule {
        &self.prompts
    }

    /// Next frame index to generate.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn cache(&self) -> &DualRegionKVCache {
        &self.cache
    }

    pub fn pending_anchors(&self) -> &[usize] {
        &self.pending
    }

    pub fn events(&self) -> &[StreamEvent] {
        &self.events
    }

    pub fn denoise_calls(&self) -> usize {
        self.denoise_calls
    }

    pub fn model_calls(&self) -> usize {
        self.model_calls
    }

    pub fn done(&self) -> bool {
        self.cursor >= self.config.total_frames
    }

    /// Emitted frames so far as `(position, latent)` pairs, ascending.
    pub fn emitted(&self) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = self
            .records
            .iter()
            .filter(|r| r.position < self.cursor)
            .map(|r| (r.position, r.latent.clone()))
            .collect();
        out.sort_by_key(|(pos, _)| *pos);
        out
    }

    fn push_event(&mut self, kind: EventKind, frame_range: (usize, usize), note: Option<String>) {
        self.events.push(StreamEvent {
            kind,
            frame_range,
            wall_time: self.started.elapsed().as_secs_f64(),
            note,
        });
    }

    /// Committed positions the next query may attend to: the tail of the
    /// emission history that still fits the past region.
    fn past_tail(&self) -> Vec<usize> {
        let keep = self.committed.len().min(self.config.capacity_past);
        self.committed[self.committed.len() - keep..].to_vec()
    }

    fn pending_frames(&self) -> Vec<usize> {
        self.pending
            .iter()
            .flat_map(|&a| a..a + self.config.chunk_size)
            .collect()
    }

    /// Frame-level text-attention rows: row `i` admits the global tokens plus
    /// the local tokens of the segment containing `row_frames[i]` — or every
    /// token when temporal masking is disabled.
    fn text_rows(&self, row_frames: &[usize]) -> SamplerResult<AttentionMask> {
        let seg = self.prompts.segment_map()?;
        let n_text = self.prompts.num_text_tokens();
        if !self.config.temporal_masking {
            return Ok(AttentionMask::all_true(row_frames.len(), n_text));
        }
        let mut bits = Vec::with_capacity(row_frames.len() * n_text);
        for &f in row_frames {
            let row = kf_cross_mask(&seg, f, n_text)?;
            for j in 0..n_text {
                bits.push(row.get(0, j));
            }
        }
        Ok(AttentionMask::new(row_frames.len(), n_text, bits)?)
    }

    /// Denoise `len` fresh frames at `start` from noise. `past_only` is the
    /// keyframe setting: the query may not attend to pending future frames.
    /// Returns the denoised span and the absolute positions it attended to
    /// (itself included) for the commit record.
    fn denoise_span(
        &mut self,
        params: &ModelParams,
        start: usize,
        len: usize,
        past_only: bool,
    ) -> SamplerResult<(LatentVideo, Vec<usize>)> {
        let p = params.config.tokens_per_frame;
        let d = params.config.latent_dim;
        let past = self.past_tail();
        let pending = self.pending_frames();
        let own: Vec<usize> = (start..start + len).collect();
        let mut attended = past.clone();
        if !past_only {
            attended.extend_from_slice(&pending);
        }
        attended.extend_from_slice(&own);

        // Text rows: chunks follow each frame's own segment, keyframes use
        // the anchor's segment for every row.
        let cross_frames: Vec<usize> = if past_only {
            vec![start; len]
        } else {
            own.clone()
        };

        let init_noise = normal_tensor(&mut self.rng, &[len, p, d], 0.0, 1.0);
        let schedule = self.config.step_schedule.clone();

        let result = match self.config.cache_mode {
            CacheMode::Cached => {
                let (cache_pos, n_past) = self.cache.positions();
                let mut expect = past.clone();
                expect.extend_from_slice(&pending);
                if cache_pos != expect || n_past != past.len() {
                    return Err(SamplerError::InternalState {
                        reason: format!(
                            "cache geometry {cache_pos:?}/{n_past} diverged from \
                             bookkeeping {expect:?}/{}",
                            past.len()
                        ),
                    });
                }
                let n_cache = cache_pos.len();
                let self_mask = if past_only {
                    AttentionMask::from_fn(len, n_cache + len, |_, j| j < n_past || j >= n_cache)?
                } else {
                    AttentionMask::all_true(len, n_cache + len)
                };
                let cross_mask = self.text_rows(&cross_frames)?;
                let window = LatentVideo::new(Tensor::zeros(&[len, p, d]), start)?;
                let context_levels = NoiseLevels::uniform(0.0, len)?;
                few_step_denoise(&DenoiseRequest {
                    params,
                    window: &window,
                    context_levels: &context_levels,
                    query_start: 0,
                    query_len: len,
                    schedule: &schedule,
                    self_mask: &self_mask,
                    prompts: &self.prompts,
                    cross_mask: &cross_mask,
                    cache: Some(&self.cache),
                    positions: None,
                    init_noise: &init_noise,
                })?
            }
            CacheMode::DenseRecompute => {
                let n_rec = self.records.len();
                let mut mats: Vec<&Tensor> = self.records.iter().map(|r| &r.latent).collect();
                let query_zeros = Tensor::zeros(&[len * p, d]);
                mats.push(&query_zeros);
                let window = LatentVideo::from_matrix(&Tensor::concat(0, &mats)?, p, 0)?;

                let mut positions: Vec<usize> =
                    self.records.iter().map(|r| r.position).collect();
                positions.extend_from_slice(&own);
                let records = &self.records;
                let self_mask = AttentionMask::from_fn(n_rec + len, n_rec + len, |i, j| {
                    if i < n_rec {
                        // Replay: each committed row sees exactly what it saw
                        // when it was committed.
                        j < n_rec && records[i].visible.contains(&positions[j])
                    } else {
                        j >= n_rec || attended.contains(&positions[j])
                    }
                })?;
                let mut row_frames: Vec<usize> =
                    self.records.iter().map(|r| r.cross_frame).collect();
                row_frames.extend_from_slice(&cross_frames);
                let cross_mask = self.text_rows(&row_frames)?;
                let context_levels = NoiseLevels::uniform(0.0, n_rec + len)?;
                few_step_denoise(&DenoiseRequest {
                    params,
                    window: &window,
                    context_levels: &context_levels,
                    query_start: n_rec,
                    query_len: len,
                    schedule: &schedule,
                    self_mask: &self_mask,
                    prompts: &self.prompts,
                    cross_mask: &cross_mask,
                    cache: None,
                    positions: Some(&positions),
                    init_noise: &init_noise,
                })?
            }
        };
        self.denoise_calls += 1;
        self.model_calls += result.model_calls;

        let q_start = match self.config.cache_mode {
            CacheMode::Cached => 0,
            CacheMode::DenseRecompute => self.records.len(),
        };
        let span = LatentVideo::new(result.window.frames().slice(0, q_start, len)?, start)?;
        Ok((span, attended))
    }

    /// Record a denoised span and, in cached mode, run the level-0 commit
    /// pass that harvests its K/V into the cache (`to_future` picks the
    /// region). The commit pass replays the span's generation-time masks so
    /// deeper layers' K/V reflect the same attention context.
    fn commit_span(
        &mut self,
        params: &ModelParams,
        span: &LatentVideo,
        attended: Vec<usize>,
        cross_frame_anchor: usize,
        to_future: bool,
    ) -> SamplerResult<()> {
        let len = span.num_frames();
        let p = span.tokens_per_frame();
        let start = span.frame_offset();
        if self.config.cache_mode == CacheMode::Cached {
            let (cache_pos, n_past) = self.cache.positions();
            let n_cache = cache_pos.len();
            let self_mask = if to_future {
                AttentionMask::from_fn(len, n_cache + len, |_, j| j < n_past || j >= n_cache)?
            } else {
                AttentionMask::all_true(len, n_cache + len)
            };
            let cross_frames: Vec<usize> = if to_future {
                vec![cross_frame_anchor; len]
            } else {
                (start..start + len).collect()
            };
            let cross_mask = self.text_rows(&cross_frames)?;
            let out = params.infer(&crate::model::ForwardInputs {
                noisy: span,
                levels: &NoiseLevels::uniform(0.0, len)?,
                self_mask: &self_mask,
                prompts: &self.prompts,
                cross_mask: &cross_mask,
                cache: Some(&self.cache),
                positions: None,
            })?;
            self.model_calls += 1;
            for f in 0..len {
                let keys = out
                    .local_keys
                    .iter()
                    .map(|k| k.slice(0, f * p, p))
                    .collect::<Result<Vec<_>, _>>()?;
                let values = out
                    .local_values
                    .iter()
                    .map(|v| v.slice(0, f * p, p))
                    .collect::<Result<Vec<_>, _>>()?;
                let entry = CacheEntry::new(start + f, keys, values);
                if to_future {
                    self.cache.set_future(entry)?;
                } else {
                    self.cache.append_past(entry)?;
                }
            }
        }
        for f in 0..len {
            self.records.push(FrameRecord {
                position: start + f,
                latent: span.frame(f),
                visible: attended.clone(),
                cross_frame: if to_future { cross_frame_anchor } else { start + f },
            });
        }
        Ok(())
    }

    /// Generate the next chunk at the cursor, attending to committed history
    /// plus any pending keyframes, and commit it. The chunk shrinks at the
    /// stream end and just before a keyframe anchor so the cursor lands on
    /// the anchor exactly.
    pub fn next_chunk(&mut self, params: &ModelParams) -> SamplerResult<LatentVideo> {
        let total = self.config.total_frames;
        if self.cursor >= total {
            return Err(SamplerError::HorizonExceeded {
                cursor: self.cursor,
                total,
            });
        }
        let mut len = self.config.chunk_size.min(total - self.cursor);
        if let Some(&anchor) = self.pending.first() {
            if anchor == self.cursor {
                return Err(SamplerError::NoKeyframeDue {
                    cursor: self.cursor,
                    front: Some(anchor),
                });
            }
            len = len.min(anchor - self.cursor);
        }
        let start = self.cursor;
        let (span, attended) = self.denoise_span(params, start, len, false)?;
        self.commit_span(params, &span, attended, 0, false)?;
        self.committed.extend(start..start + len);
        self.cursor = start + len;
        self.push_event(EventKind::Chunk, (start, start + len), None);
        Ok(span)
    }

    /// Predict one chunk-sized keyframe anchored `kf_horizon` frames ahead of
    /// the cursor, conditioned on committed history only (never on other
    /// pending keyframes), with text attention on the anchor's segment.
    /// Returns `None` — with an annotated no-op event — when the keyframe
    /// would overrun the stream horizon or the future region has no room.
    pub fn predict_kf(&mut self, params: &ModelParams) -> SamplerResult<Option<LatentVideo>> {
        let anchor = self.cursor + self.config.kf_horizon;
        let len = self.config.chunk_size;
        if anchor + len > self.config.total_frames {
            self.push_event(
                EventKind::Kf,
                (anchor, anchor + len),
                Some("skipped: keyframe would overrun the stream horizon".into()),
            );
            return Ok(None);
        }
        let room = match self.config.cache_mode {
            CacheMode::Cached => self.cache.future_has_room(len),
            CacheMode::DenseRecompute => {
                (self.pending.len() + 1) * len <= self.config.capacity_future
            }
        };
        if !room {
            self.push_event(
                EventKind::Kf,
                (anchor, anchor + len),
                Some("skipped: future cache region is full".into()),
            );
            return Ok(None);
        }
        let span = self.predict_kf_at(params, anchor, None)?;
        Ok(Some(span))
    }

    /// Shared keyframe path for first predictions and re-predictions.
    fn predict_kf_at(
        &mut self,
        params: &ModelParams,
        anchor: usize,
        note: Option<String>,
    ) -> SamplerResult<LatentVideo> {
        let len = self.config.chunk_size;
        let (span, attended) = self.denoise_span(params, anchor, len, true)?;
        self.commit_span(params, &span, attended, anchor, true)?;
        self.pending.push(anchor);
        self.pending.sort_unstable();
        self.push_event(EventKind::Kf, (anchor, anchor + len), note);
        Ok(span)
    }

    /// The cursor reached the earliest pending keyframe: adopt its frames
    /// verbatim as the next chunk and move its K/V into the past region.
    pub fn consume(&mut self) -> SamplerResult<()> {
        let len = self.config.chunk_size;
        match self.pending.first() {
            Some(&anchor) if anchor == self.cursor => {
                if self.config.cache_mode == CacheMode::Cached {
                    for pos in anchor..anchor + len {
                        self.cache.consume_future(pos)?;
                    }
                }
                self.pending.remove(0);
                self.committed.extend(anchor..anchor + len);
                self.cursor = anchor + len;
                self.push_event(EventKind::Consume, (anchor, anchor + len), None);
                Ok(())
            }
            front => Err(SamplerError::NoKeyframeDue {
                cursor: self.cursor,
                front: front.copied(),
            }),
        }
    }

    /// Apply one prompt update. Returns `Ok(false)` — with an error event —
    /// when the update is rejected: unknown segment, token mismatch, or a
    /// segment whose frames have all been emitted already. An accepted
    /// update rewrites the segment's tokens and re-predicts every pending
    /// keyframe if any of them is anchored in the updated segment; frames
    /// already emitted are never touched.
    pub fn apply_update(
        &mut self,
        params: &ModelParams,
        update: &PromptUpdate,
    ) -> SamplerResult<bool> {
        let vocab = params.config.vocab;
        let reject = |state: &mut StreamState, range: (usize, usize), why: String| {
            state.push_event(EventKind::Error, range, Some(why));
            Ok(false)
        };
        let e = update.effective_from_frame;
        let Some(seg) = self.prompts.segments.get(update.segment_index) else {
            let why = format!("update rejected: no segment {}", update.segment_index);
            return reject(self, (e, e), why);
        };
        let range = (seg.frame_start, seg.frame_end);
        if update.tokens.len() != seg.tokens.len() {
            let why = format!(
                "update rejected: segment {} has {} tokens, update carries {}",
                update.segment_index,
                seg.tokens.len(),
                update.tokens.len()
            );
            return reject(self, range, why);
        }
        if let Some(&bad) = update.tokens.iter().find(|&&t| t >= vocab) {
            let why = format!("update rejected: token {bad} outside vocabulary {vocab}");
            return reject(self, range, why);
        }
        if seg.frame_end <= self.cursor {
            let why = format!(
                "update rejected: segment {} frames {}..{} were all emitted",
                update.segment_index, seg.frame_start, seg.frame_end
            );
            return reject(self, range, why);
        }

        self.prompts.segments[update.segment_index].tokens = update.tokens.clone();
        self.push_event(
            EventKind::PromptUpdate,
            range,
            Some(format!("segment {}", update.segment_index)),
        );

        let stale = self.pending.iter().any(|&a| {
            self.prompts.segment_of(a) == Some(update.segment_index)
        });
        if stale {
            let anchors = std::mem::take(&mut self.pending);
            if self.config.cache_mode == CacheMode::Cached {
                self.cache.clear_future();
            }
            let chunk = self.config.chunk_size;
            self.records
                .retain(|r| !anchors.iter().any(|&a| (a..a + chunk).contains(&r.position)));
            for anchor in anchors {
                self.predict_kf_at(
                    params,
                    anchor,
                    Some("re-predicted after prompt update".into()),
                )?;
            }
        }
        Ok(true)
    }

    /// One rollout iteration: keyframe prediction when the period fires,
    /// then either keyframe consumption (cursor at an anchor) or a chunk.
    pub fn rollout_step(&mut self, params: &ModelParams) -> SamplerResult<()> {
        if self.done() {
            return Err(SamplerError::HorizonExceeded {
                cursor: self.cursor,
                total: self.config.total_frames,
            });
        }
        let fires = self.config.mode == GuidanceMode::FutureGuided
            && self
                .config
                .kf_period
                .is_some_and(|p| self.rollout_index % p == 0);
        if fires {
            self.predict_kf(params)?;
        }
        if self.pending.first() == Some(&self.cursor) {
            self.consume()?;
        } else {
            self.next_chunk(params)?;
        }
        self.rollout_index += 1;
        Ok(())
    }

    /// Close the stream: every frame in `[0, total_frames)` must have been
    /// emitted exactly once and no keyframe may still be pending.
    pub fn finish(mut self) -> SamplerResult<StreamOutput> {
        if !self.done() {
            return Err(SamplerError::HorizonExceeded {
                cursor: self.cursor,
                total: self.config.total_frames,
            });
        }
        if !self.pending.is_empty() {
            return Err(SamplerError::InternalState {
                reason: format!("pending keyframes at stream end: {:?}", self.pending),
            });
        }
        self.records.sort_by_key(|r| r.position);
        let positions: Vec<usize> = self.records.iter().map(|r| r.position).collect();
        let expect: Vec<usize> = (0..self.config.total_frames).collect();
        if positions != expect {
            return Err(SamplerError::InternalState {
                reason: format!("emitted positions {positions:?} do not cover the horizon"),
            });
        }
        let mats: Vec<&Tensor> = self.records.iter().map(|r| &r.latent).collect();
        let matrix = Tensor::concat(0, &mats)?;
        let p = self.records[0].latent.shape()[0];
        let video = LatentVideo::from_matrix(&matrix, p, 0)?;
        Ok(StreamOutput {
            video,
            events: self.events,
            denoise_calls: self.denoise_calls,
            model_calls: self.model_calls,
        })
    }
}

/// Run a whole stream: timed prompt updates are applied once the cursor
/// reaches their effective frame, then rollouts proceed until the horizon.
/// Updates that never become effective before the stream ends are rejected
/// with error events.
pub fn stream(
    params: &ModelParams,
    config: &SamplerConfig,
    prompts: &PromptSchedule,
    conditioning: &Tensor,
    updates: &[PromptUpdate],
    seed: u64,
) -> SamplerResult<StreamOutput> {
    let mut state = StreamState::new(config.clone(), params, prompts.clone(), conditioning, seed)?;
    let mut feed: Vec<&PromptUpdate> = updates.iter().collect();
    feed.sort_by_key(|u| u.effective_from_frame);
    let mut next = 0;
    while !state.done() {
        while next < feed.len() && feed[next].effective_from_frame <= state.cursor() {
            state.apply_update(params, feed[next])?;
            next += 1;
        }
        state.rollout_step(params)?;
    }
    for u in &feed[next..] {
        state.push_event(
            EventKind::Error,
            (u.effective_from_frame, u.effective_from_frame),
            Some(format!(
                "update rejected: effective frame {} is past the stream horizon",
                u.effective_from_frame
            )),
        );
    }
    state.finish()
}
