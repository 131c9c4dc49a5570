//! Run configuration: one JSON document drives every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sugar_core::datapipe::PipelineConfig;
use sugar_core::diffusion::ScheduleConfig;
use sugar_core::model::{AttentionDesign, ModelConfig};
use sugar_core::sampler::{DropSet, GuidanceConfig};
use sugar_core::training::{DropoutConfig, StrategyConfig, StrategyKind};

use crate::CliError;

/// Where commands read their inputs. Unset paths fall back to the matching
/// output directory of the same `--out` root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Probe subjects, prompts and initial noise all derive from this seed.
    pub seed: u64,
    pub n_samples: usize,
    pub steps: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { seed: 0, n_samples: 8, steps: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidancePoint {
    pub omega_t: f64,
    pub omega_i: f64,
}

/// Sampling-time drop settings plus a model trained with identity dropout
/// disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropAxis {
    None,
    FineOnly,
    FineAndCoarse,
    TrainedWithoutDropping,
}

impl DropAxis {
    pub const ALL: [DropAxis; 4] =
        [DropAxis::None, DropAxis::FineOnly, DropAxis::FineAndCoarse, DropAxis::TrainedWithoutDropping];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataAxis {
    /// Stage 2 trains on the synthetic videos.
    Video,
    /// Stage 2 trains on one frame of each synthetic video.
    Image,
}

/// Sweep axes. An empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub guidance: Vec<GuidancePoint>,
    pub drop: Vec<DropAxis>,
    pub designs: Vec<AttentionDesign>,
    pub strategies: Vec<StrategyKind>,
    pub data: Vec<DataAxis>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { guidance: vec![], drop: vec![], designs: vec![], strategies: vec![], data: vec![], workers: 1 }
    }
}

impl SweepConfig {
    /// ω_I fixed at 7.5, ω_T from 7.5 down to 2.5.
    pub fn table1_guidance() -> Vec<GuidancePoint> {
        [7.5, 5.0, 4.0, 3.0, 2.5].map(|omega_t| GuidancePoint { omega_t, omega_i: 7.5 }).to_vec()
    }

    /// ω_T fixed at 7.5, ω_I from 2.5 up to 7.5.
    pub fn design_ablation_guidance() -> Vec<GuidancePoint> {
        [2.5, 3.0, 4.0, 5.0, 7.5].map(|omega_i| GuidancePoint { omega_t: 7.5, omega_i }).to_vec()
    }

    pub fn is_empty(&self) -> bool {
        self.guidance.is_empty()
            && self.drop.is_empty()
            && self.designs.is_empty()
            && self.strategies.is_empty()
            && self.data.is_empty()
    }

    /// True when some axis changes how the model is trained.
    pub fn varies_training(&self) -> bool {
        !self.designs.is_empty()
            || !self.strategies.is_empty()
            || !self.data.is_empty()
            || self.drop.contains(&DropAxis::TrainedWithoutDropping)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset construction, model init and training batches derive from this seed.
    pub seed: u64,
    pub model: ModelConfig,
    /// Authoritative; copied into `model.schedule` on resolve.
    pub schedule: ScheduleConfig,
    pub strategy: StrategyConfig,
    pub dropout: DropoutConfig,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineConfig,
    pub sampling: SamplingConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            schedule: model.schedule,
            model,
            strategy: StrategyConfig::default(),
            dropout: DropoutConfig::default(),
            guidance: GuidanceConfig::default(),
            pipeline: PipelineConfig::default(),
            sampling: SamplingConfig::default(),
            sweep: SweepConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Synchronizes derived fields and validates every section.
    pub fn resolve(mut self) -> Result<RunConfig, CliError> {
        self.model.schedule = self.schedule;
        self.model.validate()?;
        let timesteps = self.schedule.build()?.len();
        self.strategy.validate()?;
        self.dropout.validate()?;
        self.guidance.validate(timesteps)?;
        self.pipeline.validate()?;
        if self.sampling.n_samples == 0 || self.sampling.steps == 0 {
            return Err(CliError::Config("sampling.n_samples and sampling.steps must be >= 1".into()));
        }
        let bad_scale = |w: f64| !(w.is_finite() && w >= 0.0);
        if self.sweep.guidance.iter().any(|g| bad_scale(g.omega_t) || bad_scale(g.omega_i)) {
            return Err(CliError::Config("sweep guidance scales must be finite and >= 0".into()));
        }
        if self.sweep.workers == 0 {
            return Err(CliError::Config("sweep.workers must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// The guidance a drop-axis value implies for sampling.
    pub fn guidance_with_drop(&self, drop: DropAxis) -> GuidanceConfig {
        let drop_set = match drop {
            DropAxis::None | DropAxis::TrainedWithoutDropping => DropSet::None,
            DropAxis::FineOnly => DropSet::FineOnly,
            DropAxis::FineAndCoarse => DropSet::FineAndCoarse,
        };
        GuidanceConfig { drop_set, ..self.guidance }
    }
}
