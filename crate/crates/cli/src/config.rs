//! Run configuration: one JSON file per run, command-line flags override
//! file values, and every artifact carries a hash of the effective config so
//! runs are reproducible from the file plus the seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use futurecast_core::rng::fnv1a;
use futurecast_core::sampler::{CacheMode, GuidanceMode, SamplerConfig};
use futurecast_core::{ModelConfig, StepSchedule, TrainConfig, WorldSpec};

/// Everything a run needs. Missing fields take defaults, unknown top-level
/// keys are rejected so config typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; all randomness flows from it through named sub-streams.
    pub seed: u64,
    /// Directory all artifacts land in.
    pub out: PathBuf,
    /// Worker threads for episode-parallel evaluation.
    pub workers: usize,
    pub model: ModelConfig,
    pub world: WorldSection,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub checkpoints: CheckpointSection,
    pub stream: StreamSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            workers: 1,
            model: ModelConfig::default(),
            world: WorldSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            checkpoints: CheckpointSection::default(),
            stream: StreamSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Procedural-world geometry and the training dataset cut from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    pub state_dim: usize,
    pub num_steps: usize,
    pub num_tasks: usize,
    pub observation_noise_std: f64,
    pub scene_component_std: f64,
    /// Episodes in the training dataset.
    pub episodes: usize,
    /// Frames per episode.
    pub frames: usize,
    /// Prompt segments per episode.
    pub segments: usize,
}

impl Default for WorldSection {
    fn default() -> WorldSection {
        WorldSection {
            state_dim: 16,
            num_steps: 8,
            num_tasks: 4,
            observation_noise_std: 0.02,
            scene_component_std: 1.0,
            episodes: 60,
            frames: 48,
            segments: 4,
        }
    }
}

impl WorldSection {
    pub fn spec(&self, seed: u64) -> WorldSpec {
        WorldSpec::with_dims(
            self.state_dim,
            self.num_steps,
            self.num_tasks,
            self.observation_noise_std,
            self.scene_component_std,
            seed,
        )
    }
}

/// Serializable mirror of the streaming sampler's knobs; the denoising step
/// schedule always uses the built-in default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub chunk_size: usize,
    /// `null` disables keyframe prediction.
    pub kf_period: Option<usize>,
    pub kf_horizon: usize,
    pub total_frames: usize,
    pub mode: GuidanceMode,
    pub cache_mode: CacheMode,
    pub capacity_past: usize,
    pub capacity_future: usize,
    pub temporal_masking: bool,
}

impl Default for SamplerSection {
    fn default() -> SamplerSection {
        let base = SamplerConfig::default();
        SamplerSection {
            chunk_size: base.chunk_size,
            kf_period: base.kf_period,
            kf_horizon: base.kf_horizon,
            total_frames: base.total_frames,
            mode: base.mode,
            cache_mode: base.cache_mode,
            capacity_past: base.capacity_past,
            capacity_future: base.capacity_future,
            temporal_masking: base.temporal_masking,
        }
    }
}

impl SamplerSection {
    pub fn to_config(&self) -> SamplerConfig {
        SamplerConfig {
            chunk_size: self.chunk_size,
            kf_period: self.kf_period,
            kf_horizon: self.kf_horizon,
            total_frames: self.total_frames,
            mode: self.mode,
            cache_mode: self.cache_mode,
            step_schedule: StepSchedule::default(),
            capacity_past: self.capacity_past,
            capacity_future: self.capacity_future,
            temporal_masking: self.temporal_masking,
        }
    }
}

/// Explicit checkpoint locations; unset paths default to files in the
/// output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointSection {
    pub teacher: Option<PathBuf>,
    pub pca: Option<PathBuf>,
    pub fsf: Option<PathBuf>,
    pub disc: Option<PathBuf>,
}

impl CheckpointSection {
    pub fn teacher_path(&self, out: &Path) -> PathBuf {
        self.teacher.clone().unwrap_or_else(|| out.join("teacher.ckpt"))
    }

    pub fn pca_path(&self, out: &Path) -> PathBuf {
        self.pca.clone().unwrap_or_else(|| out.join("pca.ckpt"))
    }

    pub fn fsf_path(&self, out: &Path) -> PathBuf {
        self.fsf.clone().unwrap_or_else(|| out.join("fsf.ckpt"))
    }

    pub fn disc_path(&self, out: &Path) -> PathBuf {
        self.disc.clone().unwrap_or_else(|| out.join("disc.ckpt"))
    }
}

/// Inputs and extras for the `stream` subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSection {
    /// Model to generate with; defaults to the most finetuned checkpoint
    /// present in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Episode file supplying conditioning, prompts, and the adherence
    /// reference; a fresh episode is generated when unset.
    pub episode: Option<PathBuf>,
    /// JSON prompt schedule overriding the episode's prompts.
    pub prompts: Option<PathBuf>,
    /// JSON list of mid-stream prompt updates.
    pub updates: Option<PathBuf>,
    /// Also render a 2-D projection PNG of the generated latents.
    pub render_png: bool,
}

/// Validation-set geometry for `eval` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub episodes: usize,
    pub frames: usize,
    pub segments: usize,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            checkpoint: None,
            episodes: 50,
            frames: 48,
            segments: 4,
        }
    }
}

/// Command-line values that override whatever the config file says.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides<'a> {
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Read `path` (or start from defaults when `None`) and apply flag
    /// overrides.
    pub fn load(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("read config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parse config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = overrides.out {
            config.out = out.to_path_buf();
        }
        if let Some(workers) = overrides.workers {
            config.workers = workers;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.model
            .validate()
            .map_err(|e| anyhow::anyhow!("model config: {e}"))?;
        if self.world.state_dim != self.model.latent_dim {
            bail!(
                "world state_dim {} must match model latent_dim {} (frames are the observations)",
                self.world.state_dim,
                self.model.latent_dim
            );
        }
        if self.world.episodes == 0 || self.world.frames == 0 || self.world.segments == 0 {
            bail!("world episodes, frames, and segments must be positive");
        }
        if self.eval.episodes == 0 || self.eval.frames == 0 || self.eval.segments == 0 {
            bail!("eval episodes, frames, and segments must be positive");
        }
        Ok(())
    }

    /// Stable hash of the effective config; artifact run ids carry it so any
    /// output can be traced back to the exact settings that produced it.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serialization");
        fnv1a(json.as_bytes())
    }

    /// `command-hash` identifier used as the CSV run id.
    pub fn run_id(&self, command: &str) -> String {
        format!("{command}-{:016x}", self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_stable() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.clone().hash());
        let id = config.run_id("train");
        assert!(id.starts_with("train-"));
        assert_eq!(id.len(), "train-".len() + 16);
    }

    #[test]
    fn file_values_and_flags_compose() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"seed": 5, "workers": 2, "sampler": {"kf_period": null}}"#,
        )
        .unwrap();
        let config = RunConfig::load(Some(&path), Overrides::default()).unwrap();
        assert_eq!(config.seed, 5);
        assert_eq!(config.workers, 2);
        assert_eq!(config.sampler.kf_period, None);

        let out = dir.path().join("elsewhere");
        let with_flags = RunConfig::load(
            Some(&path),
            Overrides {
                seed: Some(9),
                out: Some(&out),
                workers: None,
            },
        )
        .unwrap();
        assert_eq!(with_flags.seed, 9);
        assert_eq!(with_flags.out, out);
        assert_eq!(with_flags.workers, 2);
        assert_ne!(config.hash(), with_flags.hash());
    }

    #[test]
    fn unknown_keys_and_bad_geometry_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"sede": 5}"#).unwrap();
        assert!(RunConfig::load(Some(&path), Overrides::default()).is_err());

        std::fs::write(&path, r#"{"world": {"state_dim": 7}}"#).unwrap();
        let err = RunConfig::load(Some(&path), Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("state_dim"));
    }

    #[test]
    fn sampler_section_mirrors_core_defaults() {
        let section = SamplerSection::default();
        let config = section.to_config();
        let base = SamplerConfig::default();
        assert_eq!(config.chunk_size, base.chunk_size);
        assert_eq!(config.kf_period, base.kf_period);
        assert_eq!(config.kf_horizon, base.kf_horizon);
        assert_eq!(config.total_frames, base.total_frames);
        assert_eq!(config.temporal_masking, base.temporal_masking);
        config.validate().unwrap();
    }
}
