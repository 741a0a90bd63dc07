//! The five subcommands: `train`, `stream`, `eval`, `ablate`, `bench`.
//!
//! Every command reads one [`RunConfig`], derives all randomness from its
//! seed through named sub-streams, writes artifacts under the output
//! directory, and appends metrics rows keyed by `command-confighash` so any
//! number can be traced back to the exact settings that produced it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, Context};

use futurecast_core::procworld::{
    drift_report, generate_episode, raw_state_embed, render_projection_png, segment_adherence,
    smoothness, write_metrics_csv, DRIFT_MIN_FRAMES, STEP_TOKEN_BASE, TASK_TOKEN_BASE,
};
use futurecast_core::rng::{fnv1a, substream};
use futurecast_core::sampler::{events_to_jsonl, stream, EventKind, SamplerError};
use futurecast_core::training::{fsf_train, pca_distill, train_teacher};
use futurecast_core::{
    DiscriminatorParams, Episode, LatentVideo, ModelParams, PromptSchedule, PromptUpdate,
    SamplerConfig, StreamOutput, TensorError, TrainError, TrainStage,
};

use crate::config::RunConfig;

/// Failure classes, mapped to process exit codes by `main`.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, inputs, or environment — exit code 1.
    Usage(anyhow::Error),
    /// Training or generation produced non-finite numbers — exit code 2.
    Numeric(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e:#}"),
            CliError::Numeric(e) => write!(f, "numerical failure: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> CliError {
        CliError::Usage(e)
    }
}

pub type CmdResult<T> = Result<T, CliError>;

/// Divergence and non-finite numbers are numerical failures; everything
/// else that training reports is a problem with the run's setup.
fn classify_train(err: TrainError) -> CliError {
    match &err {
        TrainError::Diverged { .. } | TrainError::AboveLossLimit { .. } => {
            CliError::Numeric(err.into())
        }
        TrainError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(err.into()),
        _ => CliError::Usage(err.into()),
    }
}

fn classify_sampler(err: SamplerError) -> CliError {
    match &err {
        SamplerError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(err.into()),
        _ => CliError::Usage(err.into()),
    }
}

/// Mix a named role into the root seed so each consumer gets an
/// independent, reproducible stream.
fn derived_seed(seed: u64, name: &str) -> u64 {
    seed ^ fnv1a(name.as_bytes())
}

fn ensure_out(config: &RunConfig) -> CmdResult<()> {
    std::fs::create_dir_all(&config.out)
        .with_context(|| format!("create output directory {}", config.out.display()))?;
    Ok(())
}

fn append_metrics(config: &RunConfig, rows: &[(String, String, f64)]) -> CmdResult<()> {
    let path = config.out.join("metrics.csv");
    write_metrics_csv(&path, rows)
        .map_err(|e| CliError::Usage(anyhow!("write {}: {e}", path.display())))?;
    Ok(())
}

/// The training dataset is a fixed function of the seed and world geometry.
fn build_dataset(config: &RunConfig) -> CmdResult<Vec<Episode>> {
    let spec = config.world.spec(config.seed);
    let mut rng = substream(config.seed, "dataset");
    let mut dataset = Vec::with_capacity(config.world.episodes);
    for _ in 0..config.world.episodes {
        let ep = generate_episode(&spec, &mut rng, config.world.frames, config.world.segments)
            .map_err(|e| CliError::Usage(anyhow!("generate training episode: {e}")))?;
        dataset.push(ep);
    }
    Ok(dataset)
}

/// Check that world tokens fit the model's vocabulary before training or
/// generating conditions on them.
fn check_vocab(config: &RunConfig) -> CmdResult<()> {
    let needed = (STEP_TOKEN_BASE + config.world.num_steps)
        .max(TASK_TOKEN_BASE + config.world.num_tasks);
    if config.model.vocab < needed {
        return Err(CliError::Usage(anyhow!(
            "model vocab {} too small for world tokens (needs at least {needed})",
            config.model.vocab
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> CmdResult<ModelParams> {
    ModelParams::load(path)
        .map_err(|e| CliError::Usage(anyhow!("load checkpoint {}: {e}", path.display())))
}

/// A stage's prerequisite checkpoint, with a remediation hint when absent.
fn require_checkpoint(path: &Path, produced_by: &str) -> CmdResult<ModelParams> {
    if !path.exists() {
        return Err(CliError::Usage(anyhow!(
            "missing checkpoint {}; run `futurecast train --stage {produced_by}` first",
            path.display()
        )));
    }
    load_model(path)
}

/// Most-finetuned checkpoint present: final stage, then the distilled
/// student, then the raw teacher.
fn resolve_checkpoint(config: &RunConfig, explicit: Option<&Path>) -> CmdResult<PathBuf> {
    if let Some(p) = explicit {
        if !p.exists() {
            return Err(CliError::Usage(anyhow!(
                "checkpoint {} does not exist",
                p.display()
            )));
        }
        return Ok(p.to_path_buf());
    }
    let candidates = [
        config.checkpoints.fsf_path(&config.out),
        config.checkpoints.pca_path(&config.out),
        config.checkpoints.teacher_path(&config.out),
    ];
    for c in &candidates {
        if c.exists() {
            return Ok(c.clone());
        }
    }
    Err(CliError::Usage(anyhow!(
        "no checkpoint found under {}; run `futurecast train --stage teacher` first (then pca, then fsf)",
        config.out.display()
    )))
}

fn save_model(params: &ModelParams, path: &Path) -> CmdResult<()> {
    params
        .save(path)
        .map_err(|e| CliError::Usage(anyhow!("save checkpoint {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(config: &RunConfig, stage: TrainStage) -> CmdResult<()> {
    ensure_out(config)?;
    check_vocab(config)?;
    let run_id = config.run_id("train");
    let mut tc = config.train.clone();
    tc.stage = stage;
    tc.seed = config.seed;
    tc.validate().map_err(classify_train)?;

    let dataset = build_dataset(config)?;
    println!(
        "training stage {stage}: {} iterations on {} episodes ({} frames each)",
        tc.iterations,
        dataset.len(),
        config.world.frames
    );
    let started = Instant::now();

    let report = match stage {
        TrainStage::Teacher => {
            let (params, report) =
                train_teacher(&config.model, &tc, &dataset).map_err(classify_train)?;
            save_model(&params, &config.checkpoints.teacher_path(&config.out))?;
            report
        }
        TrainStage::Pca => {
            let teacher =
                require_checkpoint(&config.checkpoints.teacher_path(&config.out), "teacher")?;
            let (params, report) = pca_distill(&teacher, &tc, &dataset).map_err(classify_train)?;
            save_model(&params, &config.checkpoints.pca_path(&config.out))?;
            report
        }
        TrainStage::Fsf => {
            let teacher =
                require_checkpoint(&config.checkpoints.teacher_path(&config.out), "teacher")?;
            let student = require_checkpoint(&config.checkpoints.pca_path(&config.out), "pca")?;
            let disc = DiscriminatorParams::init(
                teacher.config.model_dim,
                &mut substream(config.seed, "disc-init"),
            );
            let (params, disc, report) =
                fsf_train(&student, &teacher, &disc, &tc, &dataset).map_err(classify_train)?;
            save_model(&params, &config.checkpoints.fsf_path(&config.out))?;
            let disc_path = config.checkpoints.disc_path(&config.out);
            disc.save(&disc_path)
                .map_err(|e| CliError::Usage(anyhow!("save {}: {e}", disc_path.display())))?;
            report
        }
    };

    for (iteration, message) in &report.warnings {
        eprintln!("warning (iteration {iteration}): {message}");
    }
    let stride = (tc.iterations / 50).max(1);
    append_metrics(config, &report.csv_rows(&run_id, stride))?;
    let final_loss = report.loss_curve.last().copied().unwrap_or(f64::NAN);
    let final_val = report.val_curve.last().map(|&(_, v)| v);
    println!(
        "stage {stage} done in {:.1}s: final loss {final_loss:.6}{}",
        started.elapsed().as_secs_f64(),
        match final_val {
            Some(v) => format!(", validation loss {v:.6}"),
            None => String::new(),
        }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// stream

/// Return the episode to stream against: the configured file, or a fresh one
/// (saved next to the other artifacts so the run can be replayed).
fn stream_episode(config: &RunConfig, total_frames: usize) -> CmdResult<Episode> {
    match &config.stream.episode {
        Some(path) => {
            let ep = Episode::load(path)
                .map_err(|e| CliError::Usage(anyhow!("load episode {}: {e}", path.display())))?;
            if ep.video.num_frames() < total_frames {
                return Err(CliError::Usage(anyhow!(
                    "episode {} has {} frames but the stream needs {total_frames}; \
                     lower sampler.total_frames or pick a longer episode",
                    path.display(),
                    ep.video.num_frames()
                )));
            }
            Ok(ep)
        }
        None => {
            let spec = config.world.spec(config.seed);
            let mut rng = substream(config.seed, "stream-episode");
            let ep = generate_episode(&spec, &mut rng, total_frames, config.world.segments)
                .map_err(|e| CliError::Usage(anyhow!("generate episode: {e}")))?;
            let path = config.out.join("episode.bin");
            ep.save(&path)
                .map_err(|e| CliError::Usage(anyhow!("save {}: {e}", path.display())))?;
            Ok(ep)
        }
    }
}

fn load_prompt_schedule(path: &Path, vocab: usize) -> CmdResult<PromptSchedule> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("read prompts {}", path.display()))?;
    let prompts: PromptSchedule = serde_json::from_str(&text)
        .with_context(|| format!("parse prompts {}", path.display()))?;
    prompts
        .validate(vocab)
        .map_err(|e| CliError::Usage(anyhow!("prompts {}: {e}", path.display())))?;
    Ok(prompts)
}

/// Updates are best-effort: a file that fails to parse becomes an error
/// event in the log rather than a failed run.
fn load_updates(path: &Path) -> Result<Vec<PromptUpdate>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("read updates {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("parse updates {}: {e}", path.display()))
}

/// Metric rows shared by `stream`, `eval`, and `ablate`: prompt adherence,
/// frame-to-frame smoothness, and long-horizon drift (when the video is
/// long enough to measure it).
fn quality_rows(
    run_id: &str,
    prefix: &str,
    video: &LatentVideo,
    episode: Option<&Episode>,
) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| rows.push((run_id.to_string(), metric, value));
    if let Some(ep) = episode {
        if let Ok(report) = segment_adherence(video, ep) {
            push(format!("{prefix}adherence"), report.fraction);
            push(format!("{prefix}segments_scored"), report.scored as f64);
            push(format!("{prefix}segments_skipped"), report.skipped as f64);
        }
    }
    if let Ok(s) = smoothness(video, &|f| raw_state_embed(f)) {
        push(format!("{prefix}smoothness"), s);
    }
    if video.num_frames() >= DRIFT_MIN_FRAMES {
        if let Ok(d) = drift_report(video, &|f| raw_state_embed(f)) {
            push(format!("{prefix}drift_ratio"), d.ratio);
            push(format!("{prefix}drift_average"), d.average);
        }
    }
    rows
}

pub fn cmd_stream(config: &RunConfig) -> CmdResult<()> {
    ensure_out(config)?;
    let run_id = config.run_id("stream");
    let ckpt = resolve_checkpoint(config, config.stream.checkpoint.as_deref())?;
    let params = load_model(&ckpt)?;
    let sampler = config.sampler.to_config();
    sampler
        .validate()
        .map_err(|e| CliError::Usage(anyhow!("sampler config: {e}")))?;

    let episode = stream_episode(config, sampler.total_frames)?;
    let (prompts, prompts_overridden) = match &config.stream.prompts {
        Some(path) => (load_prompt_schedule(path, params.config.vocab)?, true),
        None => (episode.prompts.clone(), false),
    };

    let mut update_error = None;
    let updates = match &config.stream.updates {
        Some(path) => match load_updates(path) {
            Ok(u) => u,
            Err(why) => {
                eprintln!("ignoring updates: {why}");
                update_error = Some(why);
                Vec::new()
            }
        },
        None => Vec::new(),
    };

    println!(
        "streaming {} frames with {} (cache {:?}, guidance {:?}, temporal masking {})",
        sampler.total_frames,
        ckpt.display(),
        sampler.cache_mode,
        sampler.mode,
        if sampler.temporal_masking { "on" } else { "off" }
    );
    let started = Instant::now();
    let mut out = stream(
        &params,
        &sampler,
        &prompts,
        &episode.video.frame(0),
        &updates,
        derived_seed(config.seed, "stream"),
    )
    .map_err(classify_sampler)?;
    let elapsed = started.elapsed().as_secs_f64();
    if let Some(why) = update_error {
        out.events.push(futurecast_core::StreamEvent {
            kind: EventKind::Error,
            frame_range: (0, 0),
            wall_time: elapsed,
            note: Some(why),
        });
    }

    let video_path = config.out.join("stream_video.bin");
    {
        let file = std::fs::File::create(&video_path)
            .with_context(|| format!("create {}", video_path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        out.video
            .frames()
            .write_to(&mut w)
            .map_err(|e| CliError::Usage(anyhow!("write {}: {e}", video_path.display())))?;
    }
    let events_path = config.out.join("stream_events.jsonl");
    std::fs::write(&events_path, events_to_jsonl(&out.events))
        .with_context(|| format!("write {}", events_path.display()))?;
    if config.stream.render_png {
        let png_path = config.out.join("stream_projection.png");
        render_projection_png(&out.video, &png_path)
            .map_err(|e| CliError::Usage(anyhow!("render {}: {e}", png_path.display())))?;
    }

    // Prompt overrides (and mid-stream updates) detach the generated video
    // from the episode's labels, so adherence is only scored against the
    // episode when it still describes what was asked for.
    let reference = if prompts_overridden || !updates.is_empty() {
        None
    } else {
        Some(&episode)
    };
    let mut rows = quality_rows(&run_id, "stream.", &out.video, reference);
    rows.push((run_id.clone(), "stream.seconds".into(), elapsed));
    rows.push((
        run_id.clone(),
        "stream.denoise_calls".into(),
        out.denoise_calls as f64,
    ));
    rows.push((
        run_id.clone(),
        "stream.model_calls".into(),
        out.model_calls as f64,
    ));
    append_metrics(config, &rows)?;

    println!(
        "wrote {} frames to {} ({} events, {:.1}s)",
        out.video.num_frames(),
        video_path.display(),
        out.events.len(),
        elapsed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Per-episode results from one evaluation pass.
struct EpisodeScore {
    index: usize,
    adherence: f64,
    scored: usize,
    skipped: usize,
    smoothness: f64,
    drift_ratio: Option<f64>,
}

/// Stream every episode through the model and score it, fanning episodes out
/// over `workers` threads. Episode order in the result is deterministic; the
/// pool only changes wall time.
fn score_episodes(
    params: &ModelParams,
    sampler: &SamplerConfig,
    episodes: &[Episode],
    seed: u64,
    label: &str,
    workers: usize,
) -> CmdResult<Vec<EpisodeScore>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<EpisodeScore>> = Mutex::new(Vec::with_capacity(episodes.len()));
    let failure: Mutex<Option<SamplerError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(episodes.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= episodes.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let ep = &episodes[i];
                let mut config = sampler.clone();
                config.total_frames = ep.video.num_frames();
                let stream_seed = derived_seed(seed, &format!("{label}-{i}"));
                match stream(
                    params,
                    &config,
                    &ep.prompts,
                    &ep.video.frame(0),
                    &[],
                    stream_seed,
                ) {
                    Ok(out) => {
                        let report = segment_adherence(&out.video, ep).ok();
                        let smooth = smoothness(&out.video, &|f| raw_state_embed(f)).unwrap_or(0.0);
                        let drift = if out.video.num_frames() >= DRIFT_MIN_FRAMES {
                            drift_report(&out.video, &|f| raw_state_embed(f))
                                .ok()
                                .map(|d| d.ratio)
                        } else {
                            None
                        };
                        results.lock().unwrap().push(EpisodeScore {
                            index: i,
                            adherence: report.as_ref().map_or(0.0, |r| r.fraction),
                            scored: report.as_ref().map_or(0, |r| r.scored),
                            skipped: report.as_ref().map_or(0, |r| r.skipped),
                            smoothness: smooth,
                            drift_ratio: drift,
                        });
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(classify_sampler(e));
    }
    let mut scores = results.into_inner().unwrap();
    scores.sort_by_key(|s| s.index);
    Ok(scores)
}

/// Held-out episodes: same world, separate generation stream from training.
fn eval_episodes(config: &RunConfig) -> CmdResult<Vec<Episode>> {
    let spec = config.world.spec(config.seed);
    let mut rng = substream(config.seed, "eval-episodes");
    let mut episodes = Vec::with_capacity(config.eval.episodes);
    for _ in 0..config.eval.episodes {
        let ep = generate_episode(&spec, &mut rng, config.eval.frames, config.eval.segments)
            .map_err(|e| CliError::Usage(anyhow!("generate eval episode: {e}")))?;
        episodes.push(ep);
    }
    Ok(episodes)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregate rows (and optional per-episode rows) for one scored pass.
fn score_rows(
    run_id: &str,
    prefix: &str,
    scores: &[EpisodeScore],
    per_episode: bool,
) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| rows.push((run_id.to_string(), metric, value));
    if per_episode {
        for s in scores {
            push(format!("{prefix}ep{:03}.adherence", s.index), s.adherence);
            push(format!("{prefix}ep{:03}.smoothness", s.index), s.smoothness);
            if let Some(d) = s.drift_ratio {
                push(format!("{prefix}ep{:03}.drift_ratio", s.index), d);
            }
        }
    }
    push(
        format!("{prefix}adherence"),
        mean(scores.iter().map(|s| s.adherence)),
    );
    push(
        format!("{prefix}smoothness"),
        mean(scores.iter().map(|s| s.smoothness)),
    );
    let drifts: Vec<f64> = scores.iter().filter_map(|s| s.drift_ratio).collect();
    if !drifts.is_empty() {
        push(format!("{prefix}drift_ratio"), mean(drifts.iter().copied()));
    }
    push(
        format!("{prefix}segments_scored"),
        scores.iter().map(|s| s.scored as f64).sum(),
    );
    push(
        format!("{prefix}segments_skipped"),
        scores.iter().map(|s| s.skipped as f64).sum(),
    );
    rows
}

pub fn cmd_eval(config: &RunConfig) -> CmdResult<()> {
    ensure_out(config)?;
    let run_id = config.run_id("eval");
    let ckpt = resolve_checkpoint(config, config.eval.checkpoint.as_deref())?;
    let params = load_model(&ckpt)?;
    let sampler = config.sampler.to_config();
    sampler
        .validate()
        .map_err(|e| CliError::Usage(anyhow!("sampler config: {e}")))?;
    let episodes = eval_episodes(config)?;
    println!(
        "evaluating {} on {} episodes of {} frames ({} workers)",
        ckpt.display(),
        episodes.len(),
        config.eval.frames,
        config.workers
    );
    let started = Instant::now();
    let scores = score_episodes(
        &params,
        &sampler,
        &episodes,
        config.seed,
        "eval",
        config.workers,
    )?;
    let mut rows = score_rows(&run_id, "eval.", &scores, true);
    rows.push((
        run_id.clone(),
        "eval.seconds".into(),
        started.elapsed().as_secs_f64(),
    ));
    append_metrics(config, &rows)?;
    println!(
        "eval done in {:.1}s: mean adherence {:.3}, mean smoothness {:.3}",
        started.elapsed().as_secs_f64(),
        mean(scores.iter().map(|s| s.adherence)),
        mean(scores.iter().map(|s| s.smoothness)),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

/// One ablation row: which checkpoint to stream with and whether per-segment
/// text masking is active.
struct AblationRow {
    name: &'static str,
    checkpoint: fn(&RunConfig) -> PathBuf,
    temporal_masking: bool,
}

/// The fixed grid: each training stage with segment-masked text attention
/// off, then the same three with it on.
const ABLATION_ROWS: [AblationRow; 6] = [
    AblationRow {
        name: "base",
        checkpoint: |c| c.checkpoints.teacher_path(&c.out),
        temporal_masking: false,
    },
    AblationRow {
        name: "pca",
        checkpoint: |c| c.checkpoints.pca_path(&c.out),
        temporal_masking: false,
    },
    AblationRow {
        name: "pca_fsf",
        checkpoint: |c| c.checkpoints.fsf_path(&c.out),
        temporal_masking: false,
    },
    AblationRow {
        name: "tm",
        checkpoint: |c| c.checkpoints.teacher_path(&c.out),
        temporal_masking: true,
    },
    AblationRow {
        name: "pca_tm",
        checkpoint: |c| c.checkpoints.pca_path(&c.out),
        temporal_masking: true,
    },
    AblationRow {
        name: "all",
        checkpoint: |c| c.checkpoints.fsf_path(&c.out),
        temporal_masking: true,
    },
];

pub fn cmd_ablate(config: &RunConfig) -> CmdResult<()> {
    ensure_out(config)?;
    let run_id = config.run_id("ablate");
    let episodes = eval_episodes(config)?;
    let base_sampler = config.sampler.to_config();
    base_sampler
        .validate()
        .map_err(|e| CliError::Usage(anyhow!("sampler config: {e}")))?;
    println!(
        "ablating {} variants on {} episodes ({} workers)",
        ABLATION_ROWS.len(),
        episodes.len(),
        config.workers
    );

    let mut rows = Vec::new();
    for variant in &ABLATION_ROWS {
        let ckpt = (variant.checkpoint)(config);
        if !ckpt.exists() {
            eprintln!(
                "variant {}: checkpoint {} missing, marking absent",
                variant.name,
                ckpt.display()
            );
            rows.push((run_id.clone(), format!("{}.absent", variant.name), 1.0));
            continue;
        }
        let params = load_model(&ckpt)?;
        let mut sampler = base_sampler.clone();
        sampler.temporal_masking = variant.temporal_masking;
        let started = Instant::now();
        let scores = score_episodes(
            &params,
            &sampler,
            &episodes,
            config.seed,
            // Same per-episode stream seeds for every variant, so rows
            // differ only by checkpoint and masking.
            "ablate",
            config.workers,
        )?;
        rows.extend(score_rows(
            &run_id,
            &format!("{}.", variant.name),
            &scores,
            false,
        ));
        println!(
            "variant {}: adherence {:.3}, smoothness {:.3} ({:.1}s)",
            variant.name,
            mean(scores.iter().map(|s| s.adherence)),
            mean(scores.iter().map(|s| s.smoothness)),
            started.elapsed().as_secs_f64()
        );
    }
    append_metrics(config, &rows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

/// One timed full-stream pass; returns (seconds, first-chunk latency,
/// chunks, denoise calls).
fn timed_stream(
    params: &ModelParams,
    sampler: &SamplerConfig,
    episode: &Episode,
    seed: u64,
) -> CmdResult<(f64, f64, usize, StreamOutput)> {
    let started = Instant::now();
    let out = stream(
        params,
        sampler,
        &episode.prompts,
        &episode.video.frame(0),
        &[],
        seed,
    )
    .map_err(classify_sampler)?;
    let seconds = started.elapsed().as_secs_f64();
    let chunk_events: Vec<_> = out
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Chunk)
        .collect();
    let first_chunk = chunk_events.first().map_or(0.0, |e| e.wall_time);
    let chunks = chunk_events.len();
    Ok((seconds, first_chunk, chunks, out))
}

pub fn cmd_bench(config: &RunConfig) -> CmdResult<()> {
    ensure_out(config)?;
    check_vocab(config)?;
    let run_id = config.run_id("bench");
    let mut rows: Vec<(String, String, f64)> = Vec::new();

    // Throughput depends on shapes, not weights, so a missing checkpoint
    // falls back to fresh random weights rather than demanding a training
    // run first.
    let params = match resolve_checkpoint(config, config.eval.checkpoint.as_deref()) {
        Ok(ckpt) => {
            println!("benchmarking {}", ckpt.display());
            load_model(&ckpt)?
        }
        Err(_) => {
            println!("no checkpoint found; benchmarking randomly initialized weights");
            rows.push((run_id.clone(), "bench.random_init".into(), 1.0));
            ModelParams::init(&config.model, &mut substream(config.seed, "bench-init"))
                .map_err(|e| CliError::Usage(anyhow!("init model: {e}")))?
        }
    };

    let cached = config.sampler.to_config();
    cached
        .validate()
        .map_err(|e| CliError::Usage(anyhow!("sampler config: {e}")))?;
    let mut dense = cached.clone();
    dense.cache_mode = futurecast_core::CacheMode::DenseRecompute;
    let spec = config.world.spec(config.seed);
    let mut rng = substream(config.seed, "bench-episode");
    let episode = generate_episode(&spec, &mut rng, cached.total_frames, config.world.segments)
        .map_err(|e| CliError::Usage(anyhow!("generate bench episode: {e}")))?;
    let seed = derived_seed(config.seed, "bench");

    // Warm up allocators and caches off the clock.
    let mut warm = cached.clone();
    warm.total_frames = (cached.chunk_size + 1).max(2);
    timed_stream(&params, &warm, &episode, seed)?;

    let mut report = |label: &str, sampler: &SamplerConfig| -> CmdResult<f64> {
        let (seconds, first_chunk, chunks, out) = timed_stream(&params, sampler, &episode, seed)?;
        let chunks_per_sec = chunks as f64 / seconds.max(1e-12);
        println!(
            "{label}: {seconds:.2}s total, {chunks_per_sec:.2} chunks/s, \
             first chunk after {first_chunk:.3}s, {} denoise calls",
            out.denoise_calls
        );
        rows.push((run_id.clone(), format!("bench.{label}.seconds"), seconds));
        rows.push((
            run_id.clone(),
            format!("bench.{label}.chunks_per_sec"),
            chunks_per_sec,
        ));
        rows.push((
            run_id.clone(),
            format!("bench.{label}.first_chunk_seconds"),
            first_chunk,
        ));
        rows.push((
            run_id.clone(),
            format!("bench.{label}.denoise_calls"),
            out.denoise_calls as f64,
        ));
        Ok(seconds)
    };
    let cached_s = report("cached", &cached)?;
    let dense_s = report("dense", &dense)?;
    let speedup = dense_s / cached_s.max(1e-12);
    rows.push((run_id.clone(), "bench.speedup".into(), speedup));
    println!("cached is {speedup:.2}x faster than dense recompute");
    append_metrics(config, &rows)?;
    Ok(())
}
