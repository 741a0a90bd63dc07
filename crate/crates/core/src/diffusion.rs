//! Flow-matching noise schedules and the few-step Euler denoiser.
//!
//! Latents follow the linear path `x_t = (1−t)·x₀ + t·ε`, whose exact
//! velocity is the constant `ε − x₀`; the network is trained to predict it.
//! Denoising integrates the predicted velocity down a short descending level
//! schedule, with the last step landing exactly on `t = 0`.

use crate::kvcache::DualRegionKVCache;
use crate::masks::AttentionMask;
use crate::model::{
    ForwardInputs, LatentVideo, ModelError, ModelParams, NoiseLevels, PromptSchedule,
};
use crate::tensor::{Tensor, TensorError};

pub type DiffusionResult<T> = Result<T, DiffusionError>;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("bad step schedule: {reason}")]
    BadSchedule { reason: String },
    #[error("query frames {start}..{end} outside window of {frames} frames")]
    QueryRange {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("initial noise shape {got:?}, expected {expected:?}")]
    NoiseShape { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Descending noise levels visited while denoising. The first entry must be
/// exactly 1 (denoising starts from pure noise) and every entry lies in
/// (0, 1]; the implicit final target is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    levels: Vec<f64>,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            levels: vec![1.0, 0.75, 0.5, 0.25],
        }
    }
}

impl StepSchedule {
    pub fn new(levels: Vec<f64>) -> DiffusionResult<StepSchedule> {
        if levels.is_empty() {
            return Err(DiffusionError::BadSchedule {
                reason: "no levels".into(),
            });
        }
        if levels[0] != 1.0 {
            return Err(DiffusionError::BadSchedule {
                reason: format!("first level must be 1.0, got {}", levels[0]),
            });
        }
        for w in levels.windows(2) {
            if !(w[1] < w[0]) {
                return Err(DiffusionError::BadSchedule {
                    reason: format!("levels must strictly descend, got {} then {}", w[0], w[1]),
                });
            }
        }
        if let Some(&last) = levels.last() {
            if !(last > 0.0) || levels.iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::BadSchedule {
                    reason: "levels must stay in (0, 1]".into(),
                });
            }
        }
        Ok(StepSchedule { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn num_steps(&self) -> usize {
        self.levels.len()
    }

    /// `(from, to)` level pairs for Euler integration; the last pair ends at 0.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        (0..self.levels.len())
            .map(|i| (self.levels[i], self.levels.get(i + 1).copied().unwrap_or(0.0)))
            .collect()
    }

    /// Every level a denoising trajectory visits, endpoint included. Per-frame
    /// training levels are drawn from this set so clean context frames stay
    /// in-distribution.
    pub fn visited_levels(&self) -> Vec<f64> {
        let mut out = self.levels.clone();
        out.push(0.0);
        out
    }
}

/// Draw one level per frame, i.i.d. uniform over the schedule's visited set.
pub fn random_levels(
    rng: &mut impl rand::Rng,
    schedule: &StepSchedule,
    frames: usize,
) -> NoiseLevels {
    let set = schedule.visited_levels();
    let t = (0..frames)
        .map(|_| set[rng.random_range(0..set.len())])
        .collect();
    NoiseLevels::new(t).expect("visited levels are valid")
}

/// Per-frame linear interpolation `x_t[i] = (1−t_i)·clean[i] + t_i·noise[i]`.
pub fn interpolate(
    clean: &LatentVideo,
    noise: &Tensor,
    levels: &NoiseLevels,
) -> DiffusionResult<LatentVideo> {
    let shape = clean.frames().shape().to_vec();
    if noise.shape() != shape {
        return Err(DiffusionError::NoiseShape {
            got: noise.shape().to_vec(),
            expected: shape,
        });
    }
    if levels.len() != clean.num_frames() {
        return Err(DiffusionError::Model(ModelError::LevelCount {
            expected: clean.num_frames(),
            got: levels.len(),
        }));
    }
    let per_frame = shape[1] * shape[2];
    let mut data = Vec::with_capacity(clean.frames().data().len());
    for (i, (&c, &e)) in clean
        .frames()
        .data()
        .iter()
        .zip(noise.data())
        .enumerate()
    {
        let t = levels.values()[i / per_frame];
        data.push((1.0 - t) * c + t * e);
    }
    Ok(LatentVideo::new(
        Tensor::new(shape, data)?,
        clean.frame_offset(),
    )?)
}

/// The flow-matching regression target, `ε − x₀` (constant along the path).
pub fn target_velocity(clean: &LatentVideo, noise: &Tensor) -> DiffusionResult<Tensor> {
    let shape = clean.frames().shape();
    if noise.shape() != shape {
        return Err(DiffusionError::NoiseShape {
            got: noise.shape().to_vec(),
            expected: shape.to_vec(),
        });
    }
    Ok(noise.sub(clean.frames())?)
}

/// Euler-integrate `x` from level 1 down to 0 along `schedule`, querying
/// `velocity(x, level)` once per step: `x ← x + (to − from)·v`. Returns the
/// final state and the number of velocity evaluations.
pub fn integrate<F>(
    schedule: &StepSchedule,
    x1: Tensor,
    mut velocity: F,
) -> DiffusionResult<(Tensor, usize)>
where
    F: FnMut(&Tensor, f64) -> DiffusionResult<Tensor>,
{
    let mut x = x1;
    let mut calls = 0;
    for (from, to) in schedule.steps() {
        let v = velocity(&x, from)?;
        calls += 1;
        x = x.add(&v.scale(to - from))?;
    }
    Ok((x, calls))
}

/// One few-step denoise of a query span inside a local window.
pub struct DenoiseRequest<'a> {
    pub params: &'a ModelParams,
    /// Local window; non-query rows are fixed conditioning.
    pub window: &'a LatentVideo,
    /// Levels for the non-query rows (query entries are overwritten per step).
    pub context_levels: &'a NoiseLevels,
    pub query_start: usize,
    pub query_len: usize,
    pub schedule: &'a StepSchedule,
    pub self_mask: &'a AttentionMask,
    pub prompts: &'a PromptSchedule,
    pub cross_mask: &'a AttentionMask,
    pub cache: Option<&'a DualRegionKVCache>,
    /// Explicit per-frame rotary positions for the window (see
    /// [`ForwardInputs::positions`]).
    pub positions: Option<&'a [usize]>,
    /// `[query_len, P, d]` starting noise.
    pub init_noise: &'a Tensor,
}

#[derive(Debug)]
pub struct DenoiseResult {
    /// The window with query rows replaced by their denoised latents.
    pub window: LatentVideo,
    pub model_calls: usize,
}

/// Run the Euler sampler on the query span: at each level the whole window is
/// fed through the model (queries at the current level, context at its fixed
/// levels) and only the query rows move.
pub fn few_step_denoise(req: &DenoiseRequest) -> DiffusionResult<DenoiseResult> {
    let t_frames = req.window.num_frames();
    let p = req.window.tokens_per_frame();
    let d = req.window.channels();
    let end = req.query_start + req.query_len;
    if req.query_len == 0 || end > t_frames {
        return Err(DiffusionError::QueryRange {
            start: req.query_start,
            end,
            frames: t_frames,
        });
    }
    let expected = vec![req.query_len, p, d];
    if req.init_noise.shape() != expected {
        return Err(DiffusionError::NoiseShape {
            got: req.init_noise.shape().to_vec(),
            expected,
        });
    }
    if req.context_levels.len() != t_frames {
        return Err(DiffusionError::Model(ModelError::LevelCount {
            expected: t_frames,
            got: req.context_levels.len(),
        }));
    }

    let x1 = req.init_noise.reshape(vec![req.query_len * p, d])?;
    let window_matrix = req.window.to_matrix();
    let (x0, model_calls) = integrate(req.schedule, x1, |x_query, level| {
        // splice the moving query rows into the fixed window
        let mut parts = Vec::new();
        if req.query_start > 0 {
            parts.push(window_matrix.slice(0, 0, req.query_start * p)?);
        }
        parts.push(x_query.clone());
        if end < t_frames {
            parts.push(window_matrix.slice(0, end * p, (t_frames - end) * p)?);
        }
        let assembled = Tensor::concat(0, &parts.iter().collect::<Vec<_>>())?;
        let noisy = LatentVideo::from_matrix(&assembled, p, req.window.frame_offset())?;
        let mut levels = req.context_levels.values().to_vec();
        for l in levels.iter_mut().skip(req.query_start).take(req.query_len) {
            *l = level;
        }
        let levels = NoiseLevels::new(levels)?;
        let out = req.params.infer(&ForwardInputs {
            noisy: &noisy,
            levels: &levels,
            self_mask: req.self_mask,
            prompts: req.prompts,
            cross_mask: req.cross_mask,
            cache: req.cache,
            positions: req.positions,
        })?;
        Ok(out.velocity.slice(0, req.query_start * p, req.query_len * p)?)
    })?;

    // final window: context rows untouched, query rows denoised
    let mut parts = Vec::new();
    if req.query_start > 0 {
        parts.push(window_matrix.slice(0, 0, req.query_start * p)?);
    }
    parts.push(x0);
    if end < t_frames {
        parts.push(window_matrix.slice(0, end * p, (t_frames - end) * p)?);
    }
    let assembled = Tensor::concat(0, &parts.iter().collect::<Vec<_>>())?;
    Ok(DenoiseResult {
        window: LatentVideo::from_matrix(&assembled, p, req.window.frame_offset())?,
        model_calls,
    })
}
