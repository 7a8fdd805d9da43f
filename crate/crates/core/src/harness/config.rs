use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycle::{GainActivation, LayerSizes, PredTarget};
use crate::error::{Error, Result};
use crate::trajgen::GeneratorConfig;

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub n_trajectories: usize,
    pub sizes: LayerSizes,
    pub lr: f64,
    pub epochs_pre_clean: usize,
    pub epochs_pre_noisy: usize,
    pub epochs_joint: usize,
    pub epochs_baseline: usize,
    /// Weight of the update loss in the joint objective.
    pub up_loss_weight: f64,
    /// Per-network global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub gain: GainActivation,
    pub pred_target: PredTarget,
    /// Seeds initialization and epoch shuffles; the dataset has its own seed.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            n_trajectories: 1000,
            sizes: LayerSizes::default(),
            lr: 0.001,
            epochs_pre_clean: 100,
            epochs_pre_noisy: 100,
            epochs_joint: 400,
            epochs_baseline: 400,
            up_loss_weight: 1.0,
            clip_norm: 5.0,
            gain: GainActivation::Sigmoid,
            pred_target: PredTarget::EveryStep,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.up_loss_weight >= 0.0 && self.up_loss_weight.is_finite()) {
            return Err(Error::InvalidInput("up_loss_weight must be finite and non-negative".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::InvalidInput("clip_norm must be finite and non-negative".into()));
        }
        let s = self.sizes;
        if s.embed_dim == 0 || s.hidden == 0 || s.mlp_hidden == 0 {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { what: "config", path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn condition(&self) -> Condition {
        Condition::of(&self.generator)
    }

    /// Same run under a different observation condition.
    pub fn with_condition(&self, c: Condition) -> Self {
        let mut out = self.clone();
        c.apply(&mut out.generator);
        out
    }
}

/// One cell column of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub p_miss: f64,
    pub p_outl: f64,
    pub sigma_w: f64,
}

impl Condition {
    pub const fn new(p_miss: f64, p_outl: f64, sigma_w: f64) -> Self {
        Self { p_miss, p_outl, sigma_w }
    }

    pub fn of(g: &GeneratorConfig) -> Self {
        Self::new(g.p_miss, g.p_outl, g.sigma_w)
    }

    pub fn apply(&self, g: &mut GeneratorConfig) {
        g.p_miss = self.p_miss;
        g.p_outl = self.p_outl;
        g.sigma_w = self.sigma_w;
    }

    /// The eight conditions: missing rate outermost, then outliers, then noise.
    pub fn grid() -> [Condition; 8] {
        let mut out = [Condition::new(0.0, 0.0, 0.0); 8];
        let mut i = 0;
        for p_miss in [0.0, 0.1] {
            for p_outl in [0.0, 0.1] {
                for sigma_w in [0.01, 0.05] {
                    out[i] = Condition::new(p_miss, p_outl, sigma_w);
                    i += 1;
                }
            }
        }
        out
    }

    /// Directory-safe label, e.g. `miss0.1_outl0_sw0.05`.
    pub fn slug(&self) -> String {
        format!("miss{}_outl{}_sw{}", self.p_miss, self.p_outl, self.sigma_w)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p_miss={} p_outl={} sigma_w={}", self.p_miss, self.p_outl, self.sigma_w)
    }
}

pub const MODEL_CYCLE: &str = "prediction_update";
pub const MODEL_ONE_TO_ONE: &str = "one_to_one";
pub const MODEL_ENCODER: &str = "encoder";
pub const MODELS: [&str; 3] = [MODEL_CYCLE, MODEL_ONE_TO_ONE, MODEL_ENCODER];

/// Published (ADE, σ_ADE) in meters per condition of [`Condition::grid`],
/// rows in [`MODELS`] order.
pub const REFERENCE_ADE: [[(f64, f64); 3]; 8] = [
    [(0.011, 0.012), (0.018, 0.039), (0.028, 0.016)],
    [(0.051, 0.027), (0.053, 0.064), (0.067, 0.035)],
    [(0.038, 0.097), (0.076, 0.084), (0.112, 0.214)],
    [(0.083, 0.106), (0.094, 0.096), (0.135, 0.196)],
    [(0.021, 0.057), (0.031, 0.056), (0.040, 0.029)],
    [(0.060, 0.058), (0.065, 0.080), (0.069, 0.037)],
    [(0.039, 0.096), (0.087, 0.110), (0.104, 0.194)],
    [(0.090, 0.114), (0.101, 0.120), (0.138, 0.195)],
];

/// Reference (ADE, σ_ADE) for a grid condition and model name.
pub fn reference_ade(c: &Condition, model: &str) -> Option<(f64, f64)> {
    let row = Condition::grid().iter().position(|g| g == c)?;
    let col = MODELS.iter().position(|m| *m == model)?;
    Some(REFERENCE_ADE[row][col])
}
