use std::path::{Path, PathBuf};

use ktele_core::backbone::StageOneWeights;
use ktele_core::corpus::MiningConfig;
use ktele_core::ke::KeConfig;
use ktele_core::schedule::{OptimConfig, Strategy};
use ktele_core::tokenizer::MaskStrategy;
use ktele_core::{Error, Result};
use ktele_tasks::eap::EapConfig;
use ktele_tasks::fct::FctConfig;
use ktele_tasks::kpi::VtConfig;
use ktele_tasks::rca::RcaConfig;
use serde::{Deserialize, Serialize};

use crate::synth::SyntheticSpec;

pub const SEED_ENV: &str = "KTELE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Must be divisible by the head count and by the ANEnc meta count (8).
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub generator_layers: usize,
    pub mining: MiningConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            max_len: 48,
            dropout_rate: 0.1,
            generator_layers: 1,
            mining: MiningConfig {
                min_freq: 40,
                ..MiningConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub optim: OptimConfig,
    pub mask_rate: f64,
    pub mask_strategy: MaskStrategy,
    pub weights: StageOneWeights,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            optim: OptimConfig {
                learning_rate: 1e-3,
                accumulation: 1,
                batch_size: 16,
                weight_decay: 0.01,
            },
            mask_rate: 0.15,
            mask_strategy: MaskStrategy::Wwm,
            weights: StageOneWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainSettings {
    pub strategy: Strategy,
    /// Fraction of the full-length step budget, e.g. `"1/100"`.
    pub scale: String,
    /// Train the numeric encoder alongside the backbone.
    pub anenc: bool,
    pub optim: OptimConfig,
    pub mask_rate: f64,
    pub ke: KeConfig,
    pub ke_batch: usize,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Imtl,
            scale: "1/100".into(),
            anenc: true,
            optim: OptimConfig {
                learning_rate: 1e-4,
                accumulation: 1,
                batch_size: 16,
                weight_decay: 0.01,
            },
            mask_rate: 0.4,
            // Distances between layer-normed pooled vectors start near
            // sqrt(2 * hidden); a margin far below that only pulls entities
            // together and collapses the pooled space.
            ke: KeConfig {
                margin: 12.0,
                negatives: 8,
                ..KeConfig::default()
            },
            ke_batch: 16,
        }
    }
}

/// Per-task settings. Input widths are overwritten with the encoder width at
/// run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    pub folds: usize,
    /// Run folds on the rayon pool.
    pub parallel: bool,
    pub rca: RcaConfig,
    pub eap: EapConfig,
    pub fct: FctConfig,
    pub kpi: VtConfig,
}

impl Default for TaskSettings {
    fn default() -> Self {
        let d = ModelSettings::default().hidden_dim;
        Self {
            folds: 5,
            parallel: true,
            rca: RcaConfig {
                epochs: 80,
                ..RcaConfig::desk(d)
            },
            eap: EapConfig {
                event_dim: d,
                ne_dim: 16,
                time_scale: 30.0,
                learning_rate: 5e-3,
                epochs: 60,
            },
            fct: FctConfig::desk(d),
            // Anomalous points are about 6% of the data; fewer epochs leave
            // the detector predicting the majority class everywhere.
            kpi: VtConfig {
                epochs: 100,
                ..VtConfig::desk(d, SyntheticSpec::default().kpi_length)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Holds `data/`, checkpoints and reports.
    pub output_dir: PathBuf,
    pub synthetic: SyntheticSpec,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub retrain: RetrainSettings,
    pub tasks: TaskSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("ktele-run"),
            synthetic: SyntheticSpec::default(),
            model: ModelSettings::default(),
            pretrain: PretrainSettings::default(),
            retrain: RetrainSettings::default(),
            tasks: TaskSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.tasks.folds < 3 {
            return Err(Error::Config("at least 3 folds are needed".into()));
        }
        if self.pretrain.optim.batch_size == 0 || self.retrain.optim.batch_size == 0 || self.retrain.ke_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.pretrain.optim.accumulation == 0 || self.retrain.optim.accumulation == 0 {
            return Err(Error::Config("accumulation must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `KTELE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn checkpoint(&self, kind: EncoderKind) -> Option<PathBuf> {
        let name = match kind {
            EncoderKind::Random => return None,
            EncoderKind::Backbone => "backbone",
            EncoderKind::Ktele => "ktele",
            EncoderKind::KteleNoAnenc => "ktele_no_anenc",
        };
        Some(self.output_dir.join(format!("{name}.safetensors")))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}

/// Source of service vectors for the downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// `U(−1, 1)` vectors, one per distinct input.
    Random,
    /// Stage-one pre-trained backbone.
    Backbone,
    /// Re-trained with the numeric encoder.
    Ktele,
    /// Re-trained with numeric anchors left as plain `[NUM]` tokens.
    KteleNoAnenc,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Backbone => "backbone",
            Self::Ktele => "ktele",
            Self::KteleNoAnenc => "ktele_no_anenc",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "backbone" => Ok(Self::Backbone),
            "ktele" => Ok(Self::Ktele),
            "ktele_no_anenc" => Ok(Self::KteleNoAnenc),
            other => Err(Error::InvalidArgument(format!("unknown encoder {other:?}"))),
        }
    }
}
