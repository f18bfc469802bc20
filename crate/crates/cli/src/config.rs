//! Run configuration: one TOML file covering every subcommand, with
//! unknown keys rejected and a content hash embedded in every report.

use boxdenoise3d_core::net::infer::InferConfig;
use boxdenoise3d_core::net::loss::LossConfig;
use boxdenoise3d_core::net::model::ModelConfig;
use boxdenoise3d_core::net::optim::OptimizerConfig;
use boxdenoise3d_core::net::train::TrainConfig;
use boxdenoise3d_core::synth::SceneConfig;
use boxdenoise3d_core::{GridSpec, MatchConfig, NormConstants};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; all randomness flows from here.
    pub seed: u64,
    /// Worker threads; the BOXDENOISE3D_THREADS environment variable
    /// overrides this.
    pub threads: Option<usize>,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub matching: MatchConfig,
    pub norm: NormConstants,
    pub train: TrainSection,
    pub synth: SceneConfig,
    pub infer: InferConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scene count when training from the synthetic generator.
    pub n_scenes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 16,
            n_scenes: 2000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub category: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            category: "Car".to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Hash of the effective (post-override) configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Assemble the training configuration from the relevant sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            grid: self.grid,
            model: self.model,
            optimizer: self.optimizer.clone(),
            loss: self.loss,
            matching: self.matching,
            norm: self.norm,
        }
    }

    /// Synth scene config with the root seed folded in when the section
    /// leaves it at zero.
    pub fn scene_config(&self) -> SceneConfig {
        let mut s = self.synth.clone();
        if s.seed == 0 {
            s.seed = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        }
        s
    }
}

/// Report wrapper: deterministic body plus a separate timestamp field.
#[derive(Serialize)]
pub struct Report<T: Serialize> {
    pub config_hash: String,
    pub timestamp_unix: u64,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(cfg: &RunConfig, body: T) -> Self {
        Self {
            config_hash: cfg.hash(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            body,
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serialization");
        std::fs::write(path, json + "\n")
    }
}
