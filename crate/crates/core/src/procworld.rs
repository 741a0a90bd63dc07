//! Synthetic procedural-video world and its oracle metrics.
//!
//! Episodes are trajectories of a piecewise-affine dynamical system: within a
//! segment the hidden state follows `s_{t+1} = A_k·s_t + b_k + ε` for the
//! segment's step `k`, and observed frames add a per-episode constant scene
//! vector. Because the true dynamics are known, prompt adherence, temporal
//! drift, and smoothness all have closed-form oracles — no learned scoring
//! model is required.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::model::{LatentVideo, ModelError, PromptSchedule, PromptSegment};
use crate::tensor::{Tensor, TensorError};

pub type WorldResult<T> = Result<T, WorldError>;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("world spec invalid: {reason}")]
    BadSpec { reason: String },
    #[error("cannot cut {frames} frames into {segments} segments")]
    BadSegmentation { frames: usize, segments: usize },
    #[error("video has {frames} frames, need at least {needed}")]
    ShortVideo { frames: usize, needed: usize },
    #[error("degenerate (zero) embedding for frame {frame}")]
    DegenerateEmbedding { frame: usize },
    #[error("episode inconsistent: {reason}")]
    Inconsistent { reason: String },
    #[error("episode io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// First global (task) token id; tasks occupy consecutive ids from here.
pub const TASK_TOKEN_BASE: usize = 1;
/// First local (step) token id; steps occupy consecutive ids from here.
pub const STEP_TOKEN_BASE: usize = 8;

/// One affine motion pattern: `s' = a·s + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDynamics {
    /// `[d, d]` transition matrix, operator norm ≤ 1.
    pub a: Tensor,
    /// `[d]` drift vector.
    pub b: Tensor,
}

/// The world definition: a library of step dynamics keyed by local-token id,
/// a library of tasks keyed by global-token id (each task lists the step
/// tokens it may use), and noise/scene scales. Fully determined by its
/// dimensions and `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub state_dim: usize,
    pub step_library: BTreeMap<usize, StepDynamics>,
    pub task_library: BTreeMap<usize, Vec<usize>>,
    pub observation_noise_std: f64,
    pub scene_component_std: f64,
    pub seed: u64,
}

impl WorldSpec {
    /// The default toy world: 16 state dims, 8 steps, 4 tasks, noise 0.02.
    pub fn build(seed: u64) -> WorldSpec {
        WorldSpec::with_dims(16, 8, 4, 0.02, 1.0, seed)
    }

    /// Deterministically derive libraries from `seed`. Each step's matrix is
    /// 0.9 × a random orthogonal matrix (so every trajectory is bounded);
    /// each task is allowed a window of half the step library.
    pub fn with_dims(
        state_dim: usize,
        num_steps: usize,
        num_tasks: usize,
        observation_noise_std: f64,
        scene_component_std: f64,
        seed: u64,
    ) -> WorldSpec {
        let mut rng = crate::rng::substream(seed, "world-spec");
        let mut step_library = BTreeMap::new();
        for j in 0..num_steps {
            let gaussian = crate::rng::normal_tensor(&mut rng, &[state_dim, state_dim], 0.0, 1.0);
            let q = orthogonalize(&gaussian);
            let a = q.scale(0.9);
            let b = crate::rng::normal_tensor(&mut rng, &[state_dim], 0.0, 0.05);
            step_library.insert(STEP_TOKEN_BASE + j, StepDynamics { a, b });
        }
        let mut task_library = BTreeMap::new();
        let window = (num_steps / 2).max(1);
        for k in 0..num_tasks {
            let allowed = (0..window)
                .map(|i| STEP_TOKEN_BASE + (2 * k + i) % num_steps)
                .collect();
            task_library.insert(TASK_TOKEN_BASE + k, allowed);
        }
        WorldSpec {
            state_dim,
            step_library,
            task_library,
            observation_noise_std,
            scene_component_std,
            seed,
        }
    }

    /// Check library shapes, nonemptiness, and the operator-norm bound that
    /// keeps trajectories from blowing up.
    pub fn validate(&self) -> WorldResult<()> {
        if self.step_library.is_empty() || self.task_library.is_empty() {
            return Err(WorldError::BadSpec {
                reason: "empty step or task library".into(),
            });
        }
        if self.observation_noise_std < 0.0 {
            return Err(WorldError::BadSpec {
                reason: "negative noise std".into(),
            });
        }
        let d = self.state_dim;
        for (token, step) in &self.step_library {
            if step.a.shape() != [d, d] || step.b.shape() != [d] {
                return Err(WorldError::BadSpec {
                    reason: format!("step {token} has wrong shapes"),
                });
            }
            let norm = operator_norm(&step.a);
            if norm > 1.0 + 1e-9 {
                return Err(WorldError::BadSpec {
                    reason: format!("step {token} operator norm {norm} > 1"),
                });
            }
        }
        for (task, allowed) in &self.task_library {
            if allowed.is_empty() {
                return Err(WorldError::BadSpec {
                    reason: format!("task {task} allows no steps"),
                });
            }
            for step in allowed {
                if !self.step_library.contains_key(step) {
                    return Err(WorldError::BadSpec {
                        reason: format!("task {task} references unknown step {step}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Columns orthonormalized by (twice-applied) Gram–Schmidt.
fn orthogonalize(m: &Tensor) -> Tensor {
    let d = m.shape()[0];
    // work on columns: cols[j][r]
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|r| m.data()[r * d + j]).collect())
        .collect();
    for _pass in 0..2 {
        for j in 0..d {
            for i in 0..j {
                let dot: f64 = (0..d).map(|r| cols[i][r] * cols[j][r]).sum();
                for r in 0..d {
                    cols[j][r] -= dot * cols[i][r];
                }
            }
            let norm: f64 = (0..d).map(|r| cols[j][r] * cols[j][r]).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for r in 0..d {
                    cols[j][r] /= norm;
                }
            }
        }
    }
    let mut data = vec![0.0; d * d];
    for r in 0..d {
        for (j, col) in cols.iter().enumerate() {
            data[r * d + j] = col[r];
        }
    }
    Tensor::new(vec![d, d], data).expect("orthogonalized matrix is finite")
}

/// Largest singular value, by power iteration on `AᵀA`.
fn operator_norm(a: &Tensor) -> f64 {
    let d = a.shape()[1];
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut sigma = 0.0;
    for _ in 0..100 {
        let av = mat_vec(a, &v);
        sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma < 1e-15 {
            return 0.0;
        }
        // v ← normalize(Aᵀ(Av))
        let atav = mat_vec_transposed(a, &av);
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-15 {
            return sigma;
        }
        v = atav.iter().map(|x| x / n).collect();
    }
    sigma
}

fn mat_vec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(m, v)| m * v).sum();
    }
    out
}

fn mat_vec_transposed(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * x[r];
        }
    }
    out
}

/// One ground-truth clip: observed frames, the prompt schedule that describes
/// them, and the per-frame active-step labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub spec: WorldSpec,
    pub video: LatentVideo,
    pub prompts: PromptSchedule,
    /// Active step token per frame; consistent with `prompts.segments`.
    pub labels: Vec<usize>,
    pub task_token: usize,
    /// `[d]` constant added to every frame (the "conditioning image" content).
    pub scene_component: Tensor,
}

impl Episode {
    /// Cross-check labels against the prompt segments.
    pub fn validate(&self) -> WorldResult<()> {
        if self.labels.len() != self.video.num_frames() {
            return Err(WorldError::Inconsistent {
                reason: format!(
                    "{} labels for {} frames",
                    self.labels.len(),
                    self.video.num_frames()
                ),
            });
        }
        for seg in &self.prompts.segments {
            let step = *seg.tokens.first().ok_or_else(|| WorldError::Inconsistent {
                reason: format!("segment at frame {} has no step token", seg.frame_start),
            })?;
            for f in seg.frame_start..seg.frame_end {
                if self.labels[f] != step {
                    return Err(WorldError::Inconsistent {
                        reason: format!("frame {f} labeled {} but prompted {step}", self.labels[f]),
                    });
                }
            }
        }
        Ok(())
    }

    /// Write: text header (spec dimensions + schedule), then the frame tensor
    /// and scene vector in the binary tensor format.
    pub fn save(&self, path: &Path) -> WorldResult<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| WorldError::Io(format!("create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| WorldError::Io(e.to_string());
        writeln!(w, "{EPISODE_TAG}").map_err(io)?;
        writeln!(w, "state_dim {}", self.spec.state_dim).map_err(io)?;
        writeln!(w, "num_steps {}", self.spec.step_library.len()).map_err(io)?;
        writeln!(w, "num_tasks {}", self.spec.task_library.len()).map_err(io)?;
        writeln!(w, "observation_noise_std {}", self.spec.observation_noise_std).map_err(io)?;
        writeln!(w, "scene_component_std {}", self.spec.scene_component_std).map_err(io)?;
        writeln!(w, "spec_seed {}", self.spec.seed).map_err(io)?;
        writeln!(w, "task_token {}", self.task_token).map_err(io)?;
        writeln!(w, "segments {}", self.prompts.segments.len()).map_err(io)?;
        for seg in &self.prompts.segments {
            writeln!(w, "segment {} {} {}", seg.frame_start, seg.frame_end, seg.tokens[0])
                .map_err(io)?;
        }
        self.video.frames().write_to(&mut w)?;
        self.scene_component.write_to(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> WorldResult<Episode> {
        let file = std::fs::File::open(path)
            .map_err(|e| WorldError::Io(format!("open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let next = |r: &mut BufReader<std::fs::File>, line: &mut String| -> WorldResult<String> {
            line.clear();
            r.read_line(line).map_err(|e| WorldError::Io(e.to_string()))?;
            Ok(line.trim_end().to_string())
        };
        if next(&mut r, &mut line)? != EPISODE_TAG {
            return Err(WorldError::Io("bad episode format tag".into()));
        }
        let field = |r: &mut BufReader<std::fs::File>,
                         line: &mut String,
                         key: &str|
         -> WorldResult<String> {
            let l = {
                line.clear();
                r.read_line(line).map_err(|e| WorldError::Io(e.to_string()))?;
                line.trim_end().to_string()
            };
            l.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| WorldError::Io(format!("expected '{key}' line, got '{l}'")))
        };
        let parse = |s: String, key: &str| -> WorldResult<f64> {
            s.parse()
                .map_err(|_| WorldError::Io(format!("bad {key} value '{s}'")))
        };
        let state_dim = parse(field(&mut r, &mut line, "state_dim")?, "state_dim")? as usize;
        let num_steps = parse(field(&mut r, &mut line, "num_steps")?, "num_steps")? as usize;
        let num_tasks = parse(field(&mut r, &mut line, "num_tasks")?, "num_tasks")? as usize;
        let noise = parse(
            field(&mut r, &mut line, "observation_noise_std")?,
            "observation_noise_std",
        )?;
        let scene_std = parse(
            field(&mut r, &mut line, "scene_component_std")?,
            "scene_component_std",
        )?;
        let seed = parse(field(&mut r, &mut line, "spec_seed")?, "spec_seed")? as u64;
        let task_token = parse(field(&mut r, &mut line, "task_token")?, "task_token")? as usize;
        let num_segments = parse(field(&mut r, &mut line, "segments")?, "segments")? as usize;
        let mut segments = Vec::with_capacity(num_segments);
        for _ in 0..num_segments {
            let l = next(&mut r, &mut line)?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "segment" {
                return Err(WorldError::Io(format!("bad segment line '{l}'")));
            }
            let nums: Vec<usize> = parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| WorldError::Io(format!("bad segment line '{l}'"))))
                .collect::<WorldResult<_>>()?;
            segments.push(PromptSegment {
                frame_start: nums[0],
                frame_end: nums[1],
                tokens: vec![nums[2]],
            });
        }
        let frames = Tensor::read_from(&mut r)?;
        let scene_component = Tensor::read_from(&mut r)?;
        let spec = WorldSpec::with_dims(state_dim, num_steps, num_tasks, noise, scene_std, seed);
        let prompts = PromptSchedule {
            global_tokens: vec![task_token],
            segments,
        };
        let mut labels = Vec::new();
        for seg in &prompts.segments {
            labels.extend(std::iter::repeat_n(seg.tokens[0], seg.frame_end - seg.frame_start));
        }
        let episode = Episode {
            spec,
            video: LatentVideo::new(frames, 0)?,
            prompts,
            labels,
            task_token,
            scene_component,
        };
        episode.validate()?;
        Ok(episode)
    }
}

const EPISODE_TAG: &str = "futurecast-episode v1";

/// Roll out one episode: pick a task, cut `num_frames` into `num_segments`
/// random-length segments, pick each segment's step from the task's allowed
/// set, then simulate `s_{t+1} = A·s_t + b + ε` and observe `s_t + scene`.
pub fn generate_episode(
    spec: &WorldSpec,
    rng: &mut impl Rng,
    num_frames: usize,
    num_segments: usize,
) -> WorldResult<Episode> {
    spec.validate()?;
    if num_segments == 0 || num_frames < num_segments {
        return Err(WorldError::BadSegmentation {
            frames: num_frames,
            segments: num_segments,
        });
    }
    let d = spec.state_dim;

    let tasks: Vec<usize> = spec.task_library.keys().copied().collect();
    let task_token = tasks[rng.random_range(0..tasks.len())];
    let allowed = &spec.task_library[&task_token];

    // random segment boundaries: num_segments−1 distinct interior cuts
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, num_frames - 1, num_segments - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(num_frames);

    let mut segments = Vec::with_capacity(num_segments);
    let mut labels = Vec::with_capacity(num_frames);
    for w in bounds.windows(2) {
        let step = allowed[rng.random_range(0..allowed.len())];
        segments.push(PromptSegment {
            frame_start: w[0],
            frame_end: w[1],
            tokens: vec![step],
        });
        labels.extend(std::iter::repeat_n(step, w[1] - w[0]));
    }

    let scene: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * spec.scene_component_std
        })
        .collect();
    let mut state: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();

    let mut data = Vec::with_capacity(num_frames * d);
    for &label in &labels {
        for (s, c) in state.iter().zip(&scene) {
            data.push(s + c);
        }
        let dyn_ = &spec.step_library[&label];
        let mut nxt = mat_vec(&dyn_.a, &state);
        for (i, v) in nxt.iter_mut().enumerate() {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            *v += dyn_.b.data()[i] + eps * spec.observation_noise_std;
        }
        state = nxt;
    }

    let episode = Episode {
        spec: spec.clone(),
        video: LatentVideo::new(Tensor::new(vec![num_frames, 1, d], data)?, 0)?,
        prompts: PromptSchedule {
            global_tokens: vec![task_token],
            segments,
        },
        labels,
        task_token,
        scene_component: Tensor::new(vec![d], scene)?,
    };
    episode.validate()?;
    Ok(episode)
}

/// Deterministic 9:1 train/validation split over episode indices; an episode
/// index always lands in the same split, so re-generated corpora never leak.
pub fn train_val_split(num_episodes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..num_episodes {
        if i % 10 == 9 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// How far generated frames wander from the first frame, sampled every 10
/// frames in an embedding space, with linear and quadratic least-squares
/// summaries of the curve.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// Cosine distance to frame 0 at frames 0, 10, 20, …
    pub curve: Vec<f64>,
    pub average: f64,
    pub max: f64,
    /// Slope of the degree-1 least-squares fit (per 10 frames).
    pub ratio: f64,
    /// Quadratic coefficient of the degree-2 least-squares fit.
    pub acceleration: f64,
}

/// Sample interval (in frames) of the drift curve.
pub const DRIFT_STRIDE: usize = 10;
/// Minimum frames for a meaningful quadratic fit (3 curve samples).
pub const DRIFT_MIN_FRAMES: usize = 30;

/// Measure drift of `video` under a frame-embedding function. `embed` maps a
/// `[P, d]` frame to an embedding vector; use [`raw_state_embed`] for the
/// identity oracle or a model's penultimate features for the learned space.
pub fn drift_report(
    video: &LatentVideo,
    embed: &dyn Fn(&Tensor) -> Tensor,
) -> WorldResult<DriftReport> {
    let t = video.num_frames();
    if t < DRIFT_MIN_FRAMES {
        return Err(WorldError::ShortVideo {
            frames: t,
            needed: DRIFT_MIN_FRAMES,
        });
    }
    let reference = embed(&video.frame(0));
    if reference.norm() < 1e-12 {
        return Err(WorldError::DegenerateEmbedding { frame: 0 });
    }
    let mut curve = Vec::new();
    let mut frame = 0;
    while frame < t {
        let e = embed(&video.frame(frame));
        if e.norm() < 1e-12 {
            return Err(WorldError::DegenerateEmbedding { frame });
        }
        curve.push(1.0 - reference.cosine_similarity(&e)?.item());
        frame += DRIFT_STRIDE;
    }
    let xs: Vec<f64> = (0..curve.len()).map(|m| m as f64).collect();
    let linear = polyfit(&xs, &curve, 1);
    let quadratic = polyfit(&xs, &curve, 2);
    Ok(DriftReport {
        average: curve.iter().sum::<f64>() / curve.len() as f64,
        max: curve.iter().fold(f64::MIN, |m, &v| m.max(v)),
        ratio: linear[1],
        acceleration: quadratic[2],
        curve,
    })
}

/// Identity embedding: the frame's raw state vector.
pub fn raw_state_embed(frame: &Tensor) -> Tensor {
    let n = frame.data().len();
    frame.reshape(vec![n]).expect("flatten frame")
}

/// Least-squares polynomial fit, coefficients ascending (c₀ + c₁x + …).
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let n = degree + 1;
    // normal equations: (XᵀX) β = Xᵀy
    let mut xtx = vec![vec![0.0; n]; n];
    let mut xty = vec![0.0; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut powers = vec![1.0; n];
        for p in 1..n {
            powers[p] = powers[p - 1] * x;
        }
        for i in 0..n {
            xty[i] += powers[i] * y;
            for j in 0..n {
                xtx[i][j] += powers[i] * powers[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| xtx[a][col].abs().total_cmp(&xtx[b][col].abs()))
            .unwrap();
        xtx.swap(col, pivot);
        xty.swap(col, pivot);
        let diag = xtx[col][col];
        if diag.abs() < 1e-300 {
            continue;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = xtx[row][col] / diag;
            for k in col..n {
                xtx[row][k] -= factor * xtx[col][k];
            }
            xty[row] -= factor * xty[col];
        }
    }
    (0..n)
        .map(|i| {
            if xtx[i][i].abs() < 1e-300 {
                0.0
            } else {
                xty[i] / xtx[i][i]
            }
        })
        .collect()
}

/// Per-segment prompt-adherence scoring against the step library.
#[derive(Debug, Clone, PartialEq)]
pub struct AdherenceReport {
    /// Fraction of scored segments whose best-fit step matches the prompt.
    pub fraction: f64,
    pub scored: usize,
    /// Segments too short to score (fewer than 3 frames).
    pub skipped: usize,
}

/// Score how well `video` follows `episode`'s prompted steps. For each
/// segment, consecutive frame differences must evolve as `Δ_{t+1} = A·Δ_t`
/// under the true step — both the drift vector and the scene offset cancel —
/// so the best-fit step is the library entry with least residual. A segment
/// needs ≥ 3 frames (one difference pair); shorter ones are skipped and
/// counted.
pub fn segment_adherence(video: &LatentVideo, episode: &Episode) -> WorldResult<AdherenceReport> {
    if video.num_frames() != episode.video.num_frames() {
        return Err(WorldError::Inconsistent {
            reason: format!(
                "video has {} frames, episode schedule covers {}",
                video.num_frames(),
                episode.video.num_frames()
            ),
        });
    }
    let d = episode.spec.state_dim;
    let frame_vec = |f: usize| -> Vec<f64> { video.frame(f).data().to_vec() };
    let mut scored = 0;
    let mut correct = 0;
    let mut skipped = 0;
    for seg in &episode.prompts.segments {
        let len = seg.frame_end - seg.frame_start;
        if len < 3 {
            skipped += 1;
            continue;
        }
        // Δ_t for t in [start, end-1)
        let diffs: Vec<Vec<f64>> = (seg.frame_start..seg.frame_end - 1)
            .map(|f| {
                let a = frame_vec(f);
                let b = frame_vec(f + 1);
                (0..d).map(|i| b[i] - a[i]).collect()
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (&token, step) in &episode.spec.step_library {
            let mut residual = 0.0;
            for pair in diffs.windows(2) {
                let predicted = mat_vec(&step.a, &pair[0]);
                residual += pair[1]
                    .iter()
                    .zip(&predicted)
                    .map(|(x, p)| (x - p) * (x - p))
                    .sum::<f64>();
            }
            if best.is_none_or(|(_, r)| residual < r) {
                best = Some((token, residual));
            }
        }
        scored += 1;
        if best.expect("library nonempty").0 == seg.tokens[0] {
            correct += 1;
        }
    }
    Ok(AdherenceReport {
        fraction: if scored == 0 {
            0.0
        } else {
            correct as f64 / scored as f64
        },
        scored,
        skipped,
    })
}

/// Mean cosine similarity between consecutive frame embeddings.
pub fn smoothness(video: &LatentVideo, embed: &dyn Fn(&Tensor) -> Tensor) -> WorldResult<f64> {
    let t = video.num_frames();
    if t < 2 {
        return Err(WorldError::ShortVideo { frames: t, needed: 2 });
    }
    let mut total = 0.0;
    let mut prev = embed(&video.frame(0));
    for f in 1..t {
        let cur = embed(&video.frame(f));
        total += prev.cosine_similarity(&cur)?.item();
        prev = cur;
    }
    Ok(total / (t - 1) as f64)
}

/// Append metric rows (`run_id,metric,value`) to a CSV file, writing the
/// header when the file is new.
pub fn write_metrics_csv(path: &Path, rows: &[(String, String, f64)]) -> WorldResult<()> {
    let new = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| WorldError::Io(format!("open {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| WorldError::Io(e.to_string());
    if new {
        writeln!(w, "run_id,metric,value").map_err(io)?;
    }
    for (run, metric, value) in rows {
        writeln!(w, "{run},{metric},{value}").map_err(io)?;
    }
    Ok(())
}

// ───────────────────────── PNG projection rendering ─────────────────────────

/// Render the video's frames as a 2-D principal-component trajectory into a
/// grayscale PNG (one dot per frame, brightness increasing with time).
pub fn render_projection_png(video: &LatentVideo, path: &Path) -> WorldResult<()> {
    const SIZE: usize = 128;
    let t = video.num_frames();
    let d = video.channels() * video.tokens_per_frame();
    let points: Vec<Vec<f64>> = (0..t).map(|f| video.frame(f).data().to_vec()).collect();
    let mean: Vec<f64> = (0..d)
        .map(|i| points.iter().map(|p| p[i]).sum::<f64>() / t as f64)
        .collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    // top-2 principal directions by power iteration with deflation
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    let axes = principal_axes(&mut cov, d);
    let project = |p: &[f64], axis: &[f64]| -> f64 { p.iter().zip(axis).map(|(x, a)| x * a).sum() };
    let coords: Vec<(f64, f64)> = centered
        .iter()
        .map(|p| (project(p, &axes.0), project(p, &axes.1)))
        .collect();
    let span = coords
        .iter()
        .flat_map(|&(x, y)| [x.abs(), y.abs()])
        .fold(1e-9f64, f64::max);

    let mut pixels = vec![0u8; SIZE * SIZE];
    for (f, &(x, y)) in coords.iter().enumerate() {
        let px = (((x / span) * 0.45 + 0.5) * SIZE as f64) as isize;
        let py = (((y / span) * 0.45 + 0.5) * SIZE as f64) as isize;
        let level = 80 + (175 * f / t.max(1)) as u8;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (ix, iy) = (px + dx, py + dy);
                if (0..SIZE as isize).contains(&ix) && (0..SIZE as isize).contains(&iy) {
                    let idx = iy as usize * SIZE + ix as usize;
                    pixels[idx] = pixels[idx].max(level);
                }
            }
        }
    }
    write_grayscale_png(path, SIZE, SIZE, &pixels)
}

fn principal_axes(cov: &mut [Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let power = |cov: &[Vec<f64>]| -> (Vec<f64>, f64) {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; d];
            for (i, row) in cov.iter().enumerate() {
                next[i] = row.iter().zip(&v).map(|(c, x)| c * x).sum();
            }
            lambda = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if lambda < 1e-15 {
                return (v, 0.0);
            }
            v = next.iter().map(|x| x / lambda).collect();
        }
        (v, lambda)
    };
    let (v1, l1) = power(cov);
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, _) = power(cov);
    (v1, v2)
}

/// Minimal PNG writer: 8-bit grayscale, zlib "stored" blocks (no compression).
fn write_grayscale_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> WorldResult<()> {
    assert_eq!(pixels.len(), width * height);
    // raw scanlines, each prefixed with filter byte 0
    let mut raw = Vec::with_capacity((width + 1) * height);
    for row in 0..height {
        raw.push(0u8);
        raw.extend_from_slice(&pixels[row * width..(row + 1) * width]);
    }
    // zlib stream with stored deflate blocks
    let mut z = vec![0x78, 0x01];
    for (i, chunk) in raw.chunks(65535).enumerate() {
        let last = (i + 1) * 65535 >= raw.len();
        z.push(if last { 1 } else { 0 });
        let len = chunk.len() as u16;
        z.extend_from_slice(&len.to_le_bytes());
        z.extend_from_slice(&(!len).to_le_bytes());
        z.extend_from_slice(chunk);
    }
    z.extend_from_slice(&adler32(&raw).to_be_bytes());

    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 0, 0, 0, 0]); // bit depth 8, grayscale

    let mut out = Vec::new();
    out.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]);
    png_chunk(&mut out, b"IHDR", &ihdr);
    png_chunk(&mut out, b"IDAT", &z);
    png_chunk(&mut out, b"IEND", &[]);
    std::fs::write(path, out).map_err(|e| WorldError::Io(format!("write {}: {e}", path.display())))
}

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let mut crc_input = kind.to_vec();
    crc_input.extend_from_slice(data);
    out.extend_from_slice(&crc32(&crc_input).to_be_bytes());
}

fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xedb8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for &byte in data {
        a = (a + byte as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn identity_step(d: usize, b: Vec<f64>) -> StepDynamics {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = 1.0;
        }
        StepDynamics {
            a: Tensor::new(vec![d, d], a).unwrap(),
            b: Tensor::new(vec![d], b).unwrap(),
        }
    }

    fn tiny_spec(step: StepDynamics) -> WorldSpec {
        let d = step.b.shape()[0];
        let mut step_library = BTreeMap::new();
        step_library.insert(STEP_TOKEN_BASE, step);
        let mut task_library = BTreeMap::new();
        task_library.insert(TASK_TOKEN_BASE, vec![STEP_TOKEN_BASE]);
        WorldSpec {
            state_dim: d,
            step_library,
            task_library,
            observation_noise_std: 0.0,
            scene_component_std: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn identity_dynamics_give_constant_video() {
        let spec = tiny_spec(identity_step(4, vec![0.0; 4]));
        let ep = generate_episode(&spec, &mut substream(1, "ep"), 10, 1).unwrap();
        let first = ep.video.frame(0);
        for f in 1..10 {
            assert_eq!(ep.video.frame(f), first);
        }
    }

    #[test]
    fn unit_drift_telescopes_on_first_channel() {
        let mut b = vec![0.0; 4];
        b[0] = 1.0;
        let spec = tiny_spec(identity_step(4, b));
        let ep = generate_episode(&spec, &mut substream(2, "ep"), 12, 1).unwrap();
        let f0 = ep.video.frame(0);
        for t in 0..12 {
            let ft = ep.video.frame(t);
            for c in 0..4 {
                let expected = f0.data()[c] + if c == 0 { t as f64 } else { 0.0 };
                assert!((ft.data()[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn episodes_are_deterministic_given_seed() {
        let spec = WorldSpec::build(7);
        let a = generate_episode(&spec, &mut substream(3, "ep"), 48, 4).unwrap();
        let b = generate_episode(&spec, &mut substream(3, "ep"), 48, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(&spec, &mut substream(4, "ep"), 48, 4).unwrap();
        assert!(a.video != c.video);
    }

    #[test]
    fn default_spec_is_valid_and_bounded() {
        let spec = WorldSpec::build(11);
        spec.validate().unwrap();
        assert_eq!(spec.step_library.len(), 8);
        assert_eq!(spec.task_library.len(), 4);
        // scaled-orthogonal steps have operator norm exactly 0.9
        for step in spec.step_library.values() {
            let norm = operator_norm(&step.a);
            assert!((norm - 0.9).abs() < 1e-9, "norm {norm}");
        }
        // long rollouts stay bounded
        let ep = generate_episode(&spec, &mut substream(5, "ep"), 200, 4).unwrap();
        assert!(ep.video.frames().data().iter().all(|v| v.abs() < 100.0));
    }

    #[test]
    fn spec_validation_rejects_bad_worlds() {
        let mut spec = WorldSpec::build(1);
        spec.task_library.insert(TASK_TOKEN_BASE, vec![999]);
        assert!(matches!(spec.validate(), Err(WorldError::BadSpec { .. })));

        let expanding = tiny_spec(StepDynamics {
            a: Tensor::filled(&[2, 2], 1.5),
            b: Tensor::zeros(&[2]),
        });
        assert!(matches!(expanding.validate(), Err(WorldError::BadSpec { .. })));

        let spec = WorldSpec::build(1);
        assert!(matches!(
            generate_episode(&spec, &mut substream(1, "x"), 3, 5),
            Err(WorldError::BadSegmentation { frames: 3, segments: 5 })
        ));
    }

    #[test]
    fn labels_match_prompt_segments() {
        let spec = WorldSpec::build(13);
        let ep = generate_episode(&spec, &mut substream(6, "ep"), 48, 4).unwrap();
        ep.validate().unwrap();
        assert_eq!(ep.labels.len(), 48);
        assert_eq!(ep.prompts.segments.len(), 4);
        assert_eq!(ep.prompts.global_tokens, vec![ep.task_token]);
        let allowed = &spec.task_library[&ep.task_token];
        for seg in &ep.prompts.segments {
            assert!(allowed.contains(&seg.tokens[0]));
        }
    }

    #[test]
    fn noiseless_segments_are_recovered_by_the_dynamics_fit() {
        // the oracle classifier: ≥ 99% of prompted steps recovered exactly
        let spec = WorldSpec::with_dims(16, 8, 4, 0.0, 1.0, 17);
        let mut scored = 0;
        let mut correct = 0;
        for e in 0..20 {
            let ep = generate_episode(&spec, &mut substream(100 + e, "ep"), 48, 4).unwrap();
            let report = segment_adherence(&ep.video, &ep).unwrap();
            scored += report.scored;
            correct += (report.fraction * report.scored as f64).round() as usize;
        }
        assert!(scored >= 60, "scored {scored}");
        assert!(
            correct as f64 / scored as f64 >= 0.99,
            "recovered {correct}/{scored}"
        );
    }

    #[test]
    fn adherence_of_mismatched_prompts_is_near_chance() {
        let spec = WorldSpec::with_dims(16, 8, 4, 0.0, 1.0, 19);
        let mut scored = 0;
        let mut correct = 0;
        let mut rng = substream(20, "permute");
        for e in 0..20 {
            let ep = generate_episode(&spec, &mut substream(200 + e, "ep"), 48, 4).unwrap();
            // relabel every segment with a uniformly random step token
            let mut shuffled = ep.clone();
            let steps: Vec<usize> = spec.step_library.keys().copied().collect();
            for seg in &mut shuffled.prompts.segments {
                seg.tokens = vec![steps[rng.random_range(0..steps.len())]];
            }
            let report = segment_adherence(&ep.video, &shuffled).unwrap();
            scored += report.scored;
            correct += (report.fraction * report.scored as f64).round() as usize;
        }
        let rate = correct as f64 / scored as f64;
        // chance is 1/8; allow generous Monte Carlo slack
        assert!(rate < 0.35, "rate {rate} not near chance");
    }

    #[test]
    fn adherence_ignores_scene_offset() {
        let spec = WorldSpec::with_dims(8, 4, 2, 0.0, 1.0, 23);
        let ep = generate_episode(&spec, &mut substream(7, "ep"), 24, 3).unwrap();
        let base = segment_adherence(&ep.video, &ep).unwrap();
        let shifted = Tensor::new(
            ep.video.frames().shape().to_vec(),
            ep.video.frames().data().iter().map(|v| v + 42.0).collect(),
        )
        .unwrap();
        let shifted = LatentVideo::new(shifted, 0).unwrap();
        let moved = segment_adherence(&shifted, &ep).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn short_segments_are_skipped_and_counted() {
        let spec = tiny_spec(identity_step(3, vec![0.1, 0.0, 0.0]));
        let mut ep = generate_episode(&spec, &mut substream(8, "ep"), 10, 1).unwrap();
        // hand-craft a schedule with a 2-frame segment (unscorable)
        ep.prompts.segments = vec![
            PromptSegment { frame_start: 0, frame_end: 2, tokens: vec![STEP_TOKEN_BASE] },
            PromptSegment { frame_start: 2, frame_end: 10, tokens: vec![STEP_TOKEN_BASE] },
        ];
        let report = segment_adherence(&ep.video, &ep).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.scored, 1);
    }

    #[test]
    fn drift_of_constant_video_is_zero() {
        let frames = Tensor::filled(&[30, 1, 4], 1.5);
        let video = LatentVideo::new(frames, 0).unwrap();
        let report = drift_report(&video, &|f| raw_state_embed(f)).unwrap();
        assert_eq!(report.curve.len(), 3);
        assert!(report.curve.iter().all(|&v| v.abs() < 1e-12));
        assert!(report.ratio.abs() < 1e-12);
        assert!(report.acceleration.abs() < 1e-12);
        assert!(report.average.abs() < 1e-12);
    }

    /// Frames whose embeddings sit at planted angles from frame 0, so the
    /// drift curve is exactly a chosen polynomial.
    fn planted_curve_video(values: &[f64]) -> (LatentVideo, impl Fn(&Tensor) -> Tensor + '_) {
        let t = values.len() * DRIFT_STRIDE;
        let data: Vec<f64> = (0..t).map(|f| f as f64).collect();
        let video = LatentVideo::new(Tensor::new(vec![t, 1, 1], data).unwrap(), 0).unwrap();
        let embed = move |frame: &Tensor| -> Tensor {
            let f = frame.data()[0] as usize;
            let distance = if f % DRIFT_STRIDE == 0 {
                values[f / DRIFT_STRIDE]
            } else {
                0.0
            };
            let angle = (1.0 - distance).clamp(-1.0, 1.0).acos();
            Tensor::new(vec![2], vec![angle.cos(), angle.sin()]).unwrap()
        };
        (video, embed)
    }

    #[test]
    fn planted_linear_curve_recovers_slope_exactly() {
        let c = 0.07;
        let values: Vec<f64> = (0..5).map(|m| c * m as f64).collect();
        let (video, embed) = planted_curve_video(&values);
        let report = drift_report(&video, &embed).unwrap();
        for (got, want) in report.curve.iter().zip(&values) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((report.ratio - c).abs() < 1e-9, "ratio {}", report.ratio);
        assert!(report.acceleration.abs() < 1e-9);
        assert!((report.max - c * 4.0).abs() < 1e-9);
    }

    #[test]
    fn planted_quadratic_curve_recovers_coefficient() {
        let (a, b) = (0.01, 0.02);
        let values: Vec<f64> = (0..5).map(|m| a * (m * m) as f64 + b * m as f64).collect();
        let (video, embed) = planted_curve_video(&values);
        let report = drift_report(&video, &embed).unwrap();
        assert!(
            (report.acceleration - a).abs() < 1e-9,
            "acceleration {}",
            report.acceleration
        );
    }

    #[test]
    fn drift_report_validates_inputs() {
        let short = LatentVideo::new(Tensor::zeros(&[10, 1, 4]), 0).unwrap();
        assert!(matches!(
            drift_report(&short, &|f| raw_state_embed(f)),
            Err(WorldError::ShortVideo { frames: 10, needed: 30 })
        ));
        let zeros = LatentVideo::new(Tensor::zeros(&[30, 1, 4]), 0).unwrap();
        assert!(matches!(
            drift_report(&zeros, &|f| raw_state_embed(f)),
            Err(WorldError::DegenerateEmbedding { frame: 0 })
        ));
    }

    #[test]
    fn smoothness_of_constant_and_alternating_videos() {
        let constant = LatentVideo::new(Tensor::filled(&[6, 1, 3], 2.0), 0).unwrap();
        let s = smoothness(&constant, &|f| raw_state_embed(f)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        let mut data = Vec::new();
        for t in 0..6 {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            data.extend_from_slice(&[sign, 2.0 * sign, -sign]);
        }
        let alternating = LatentVideo::new(Tensor::new(vec![6, 1, 3], data).unwrap(), 0).unwrap();
        let s = smoothness(&alternating, &|f| raw_state_embed(f)).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_direct_formula_on_a_random_walk() {
        let mut rng = substream(31, "walk");
        let video = LatentVideo::new(
            crate::rng::normal_tensor(&mut rng, &[12, 1, 5], 0.0, 1.0),
            0,
        )
        .unwrap();
        let got = smoothness(&video, &|f| raw_state_embed(f)).unwrap();
        let mut expected = 0.0;
        for t in 0..11 {
            let a = video.frame(t);
            let b = video.frame(t + 1);
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            expected += dot / (a.norm() * b.norm());
        }
        expected /= 11.0;
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn episode_files_round_trip() {
        let spec = WorldSpec::build(29);
        let ep = generate_episode(&spec, &mut substream(9, "ep"), 48, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode.bin");
        ep.save(&path).unwrap();
        let loaded = Episode::load(&path).unwrap();
        assert_eq!(ep, loaded);
    }

    #[test]
    fn split_is_nine_to_one_and_disjoint() {
        let (train, val) = train_val_split(100);
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
        for i in &val {
            assert!(!train.contains(i));
        }
        // stable under corpus growth: an index never switches splits
        let (train2, _) = train_val_split(50);
        assert!(train2.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn metrics_csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[("run1".into(), "loss".into(), 0.5)]).unwrap();
        write_metrics_csv(&path, &[("run1".into(), "drift_ratio".into(), 0.01)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,metric,value");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("run1,drift_ratio,"));
    }

    #[test]
    fn projection_png_is_well_formed() {
        let spec = WorldSpec::build(31);
        let ep = generate_episode(&spec, &mut substream(10, "ep"), 48, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.png");
        render_projection_png(&ep.video, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]);
        // walk the chunks, verifying lengths and CRCs
        let mut at = 8;
        let mut kinds = Vec::new();
        while at < bytes.len() {
            let len = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            let kind = &bytes[at + 4..at + 8];
            let data = &bytes[at + 8..at + 8 + len];
            let crc = u32::from_be_bytes(bytes[at + 8 + len..at + 12 + len].try_into().unwrap());
            let mut checked = kind.to_vec();
            checked.extend_from_slice(data);
            assert_eq!(crc, crc32(&checked), "bad crc in {:?}", std::str::from_utf8(kind));
            kinds.push(kind.to_vec());
            at += 12 + len;
        }
        assert_eq!(kinds[0], b"IHDR");
        assert_eq!(kinds.last().unwrap(), b"IEND");
        // IHDR says 128×128, grayscale, bit depth 8
        let ihdr = &bytes[16..29];
        assert_eq!(u32::from_be_bytes(ihdr[0..4].try_into().unwrap()), 128);
        assert_eq!(u32::from_be_bytes(ihdr[4..8].try_into().unwrap()), 128);
        assert_eq!(ihdr[8], 8);
        assert_eq!(ihdr[9], 0);
    }
}
