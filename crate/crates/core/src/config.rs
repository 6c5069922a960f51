//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::METRIC_NAMES;
use crate::flow::{SamplerConfig, SamplerMode};
use crate::grpo::GrpoConfig;
use crate::hia::BackboneConfig;
use crate::params::AdamWConfig;
use crate::reward::RewardWeights;
use crate::sprite::{Dims, SPRITE_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Held-out evaluation scenes are drawn from this seed.
    pub eval_seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 0,
            eval_seed: 1_000_003,
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub optimizer: AdamWConfig,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            cond_dropout: 0.1,
            optimizer: AdamWConfig {
                lr: 2e-3,
                beta2: 0.99,
                ..AdamWConfig::default()
            },
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub count: usize,
    pub sampler: SamplerConfig,
    /// Total-score weights in `METRIC_NAMES` order.
    pub weights: Vec<f64>,
    /// Score the dataset's own videos instead of model samples.
    pub ground_truth: bool,
    pub gammas: Vec<f64>,
    /// GRPO steps per γ on the bandit.
    pub bandit_steps: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 50,
            sampler: SamplerConfig::default(),
            weights: crate::eval::equal_weights(),
            ground_truth: false,
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            bandit_steps: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Write SVG charts next to metric CSVs.
    pub svg: bool,
    /// Print a progress line every this many steps (0 = quiet).
    pub log_every: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub flow: FlowConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let c = Self::default();
                c.validate()?;
                Ok(c)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height < SPRITE_SIZE || d.width < SPRITE_SIZE || d.frames == 0 {
            return Err(Error::Config(format!(
                "data dims {}×{}×{} too small for {SPRITE_SIZE}-pixel sprites",
                d.frames, d.height, d.width
            )));
        }
        self.model.validate()?;
        if [self.model.frames, self.model.height, self.model.width] != [d.frames, d.height, d.width] {
            return Err(Error::Config("model video dims must match data dims".into()));
        }
        if self.model.channels != 3 {
            return Err(Error::Config("model.channels must be 3 for RGB sprites".into()));
        }
        let f = &self.flow;
        if f.batch_size == 0 {
            return Err(Error::Config("flow.batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&f.cond_dropout) {
            return Err(Error::Config(format!("flow.cond_dropout = {} outside [0, 1]", f.cond_dropout)));
        }
        if !(f.optimizer.lr > 0.0) || !(f.max_grad_norm > 0.0) {
            return Err(Error::Config("flow.optimizer.lr and flow.max_grad_norm must be > 0".into()));
        }
        self.reward.validate()?;
        self.grpo.validate()?;
        let e = &self.eval;
        e.sampler.validate()?;
        if e.weights.len() != METRIC_NAMES.len() || e.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!(
                "eval.weights must be {} nonnegative numbers ({})",
                METRIC_NAMES.len(),
                METRIC_NAMES.join(", ")
            )));
        }
        if e.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("eval.gammas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sampler used by the `sample` command in the given mode.
    pub fn sampler(&self, mode: SamplerMode) -> SamplerConfig {
        SamplerConfig {
            mode,
            noise_a: self.grpo.noise_a,
            ..self.eval.sampler.clone()
        }
    }

    /// Writes the fully materialised config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn fingerprint(&self) -> String {
        crate::eval::fingerprint(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}
