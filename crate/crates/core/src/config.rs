//! TOML experiment configuration shared by every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::SynthesisConfig;
use crate::classifier::{AugmentationPolicy, ClassifierConfig, CurriculumSchedule, Scheme};
use crate::dataset::ExtractionConfig;
use crate::error::{Error, Result};
use crate::losses::{ExtractorConfig, ExtractorSource, LossWeights};
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::trainer::GanTrainConfig;

/// Name of the frozen configuration written into every run directory.
pub const SNAPSHOT_FILE: &str = "config.snapshot";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Patch archive manifest (`manifest.jsonl`) with train/val/test splits.
    pub patches: Option<PathBuf>,
    /// Synthetic patch archive used by the cigan scheme.
    pub synthetic: Option<PathBuf>,
    /// Generator checkpoint used for synthesis and sample figures.
    pub generator: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.patches, &mut self.synthetic, &mut self.generator].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Option<Scheme>,
    pub data: DataPaths,
    pub extraction: ExtractionConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    pub extractor_source: ExtractorSource,
    pub loss: LossWeights,
    pub gan_training: GanTrainConfig,
    pub synthesis: SynthesisConfig,
    pub classifier: ClassifierConfig,
    pub curriculum: CurriculumSchedule,
    pub augmentation: AugmentationPolicy,
}

impl ExperimentConfig {
    /// Parse TOML; schema errors carry the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(if path == "." { "<root>".to_string() } else { path }, inner.message().to_string())
        })
    }

    /// Read a config file, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.data.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Apply a command-line seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gan_training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.extractor.validate()?;
        self.loss.validate()?;
        self.gan_training.validate()?;
        self.classifier.validate()?;
        self.curriculum.validate()?;
        self.augmentation.validate()?;
        if self.generator.final_resolution != self.discriminator.input_resolution {
            return Err(Error::config(
                "discriminator.input_resolution",
                format!(
                    "must equal generator.final_resolution ({} vs {})",
                    self.discriminator.input_resolution, self.generator.final_resolution
                ),
            ));
        }
        Ok(())
    }

    pub fn write_snapshot(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(SNAPSHOT_FILE);
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))
    }

    pub fn read_snapshot(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ExperimentConfig::from_toml(
            "seed = 3\nscheme = \"cigan\"\n[classifier]\nchannels = [8, 16]\ninput_size = 64\n[extractor_source]\nkind = \"seeded-random\"\nseed = 9\n",
        )
        .unwrap();
        cfg.data.patches = Some("/tmp/p/manifest.jsonl".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.classifier.channels, vec![8, 16]);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[gan_training]\nbatch_size = \"eight\"\n").unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "gan_training.batch_size"),
            other => panic!("unexpected {other}"),
        }
        let err = ExperimentConfig::from_toml("[classifier]\nlearning_rat = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path.starts_with("classifier")), "{err}");
    }

    #[test]
    fn mismatched_resolutions_rejected() {
        let cfg = ExperimentConfig::from_toml("[discriminator]\ninput_resolution = 64\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { ref path, .. }) if path == "discriminator.input_resolution"));
    }

    #[test]
    fn readme_example_is_the_defaults() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let body = &readme[start..start + readme[start..].find("```").unwrap()];
        let cfg = ExperimentConfig::from_toml(body).unwrap();
        cfg.validate().unwrap();
        let mut expected = ExperimentConfig::default();
        expected.data = cfg.data.clone();
        assert_eq!(cfg, expected);
    }
}
