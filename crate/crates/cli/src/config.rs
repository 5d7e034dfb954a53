//! The `--config` file: TOML with one section per concern. Every key is
//! optional and falls back to the library default, so an empty file (or no
//! file at all) is a valid configuration.

use std::path::Path;

use serde::Deserialize;

use genemoe::data::SyntheticSpec;
use genemoe::error::{CoreError, Result};
use genemoe::heads::FinetuneConfig;
use genemoe::model::GeneMoeConfig;
use genemoe::pretrain::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Architecture. `input_dim` is always taken from the data, never from
    /// the file.
    pub model: GeneMoeConfig,
    /// Adversarial pre-training loop.
    pub training: TrainConfig,
    /// Task-head fitting (survival, classify, ablate).
    pub finetune: FinetuneConfig,
    pub data: DataSection,
    pub synth: SyntheticSpec,
    pub analyze: AnalyzeSection,
    pub classify: ClassifySection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Drop flat low-expression genes before normalization (pretrain only).
    pub filter: bool,
    pub variance_threshold: f64,
    pub mean_threshold: f64,
    /// Min-max normalize inputs to [0, 1]. Pre-training requires this.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            filter: false,
            variance_threshold: 0.4,
            mean_threshold: 0.8,
            normalize: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// How many top-variance latent coordinates to correlate.
    pub leading_features: usize,
    /// Mean absolute correlation above which a gene counts as strong.
    pub strong_threshold: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            leading_features: genemoe::analysis::DEFAULT_LEADING_FEATURES,
            strong_threshold: genemoe::analysis::DEFAULT_STRONG_THRESHOLD,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// Focal loss exponent; 0 recovers plain cross-entropy.
    pub gamma: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { gamma: 2.0 }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// `--seed` wins over every seed in the file.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.training.seed = s;
            self.finetune.seed = s;
        }
    }
}
