//! The run configuration: one TOML file covering every stage.
//!
//! ```toml
//! seed = 0
//! device = "cpu"
//!
//! [synth]          # n_images + [synth.spec]
//! [crops]          # detector training crops
//! [detector]       # [detector.backbone], [detector.head]
//! [train_det]      # [train_det.loss], [train_det.loss.focal]
//! [classifier]
//! [train_cls]      # [train_cls.training_set]
//! [cascade]        # [cascade.detector] post-processing
//! [eval]
//! [run]          # checkpoint/log cadence
//! ```
//!
//! Every table is optional; omitted keys take their defaults, unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mitodet::cascade::CascadeConfig;
use mitodet::classifier::{ClassifierConfig, ClsTrainConfig};
use mitodet::data_eval::{DatasetFormat, Split, SynthSpec, DEFAULT_MATCH_RADIUS};
use mitodet::detector::{DetTrainConfig, DetectorConfig};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const VERSION_FILE: &str = "VERSION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_images: usize,
    pub spec: SynthSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_images: 250,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Layout read by `prepare`.
    pub format: DatasetFormat,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            format: DatasetFormat::Native,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSection {
    pub crop: usize,
    pub negatives_per_image: usize,
}

impl Default for CropSection {
    fn default() -> Self {
        Self {
            crop: 224,
            negatives_per_image: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Training checkpoints are written every this many steps and at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Backbone weights copied by name over the random init of `train-det`.
    pub backbone_pretrained: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 250,
            log_every: 25,
            backbone_pretrained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub radius: f64,
    /// Split used by `infer --data` and `evaluate`.
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            radius: DEFAULT_MATCH_RADIUS,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Only `"cpu"` is available.
    pub device: String,
    pub synth: SynthSection,
    pub data: DataSection,
    pub crops: CropSection,
    pub detector: DetectorConfig,
    pub train_det: DetTrainConfig,
    pub classifier: ClassifierConfig,
    pub train_cls: ClsTrainConfig,
    pub cascade: CascadeConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| mitodet::Error::InvalidArgument(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if cfg.device.is_empty() {
            cfg.device = "cpu".into();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            bail!(mitodet::Error::InvalidArgument(format!(
                "device '{}' is not available; only 'cpu' is supported",
                self.device
            )));
        }
        self.detector.backbone.validate()?;
        self.classifier.validate()?;
        self.cascade.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved config and the tool version into `dir`.
    pub fn write_audit(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml()?)?;
        std::fs::write(
            dir.join(VERSION_FILE),
            format!("mitodet {}\n", env!("CARGO_PKG_VERSION")),
        )?;
        Ok(())
    }
}
