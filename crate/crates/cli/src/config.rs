//! Experiment configuration file (TOML) and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semiformer::data::{DatasetId, Normalization, SyntheticSpec};
use semiformer::models::ModelConfig;
use semiformer::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetId,
    /// Dataset root; falls back to `$SEMIFORMER_DATA`, then `./data`.
    pub data_dir: Option<PathBuf>,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub stratified: bool,
    /// Use this split instead of drawing one.
    pub split_file: Option<PathBuf>,
    /// Keep only the first `n` training images of each class.
    pub per_class_limit: Option<usize>,
    pub synthetic: SyntheticSpec,
    /// Defaults to the CIFAR-10 statistics for CIFAR-10 and to the training
    /// set statistics otherwise.
    pub normalization: Option<Normalization>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Cifar10,
            data_dir: None,
            label_fraction: 0.1,
            split_seed: 0,
            stratified: true,
            split_file: None,
            per_class_limit: None,
            synthetic: SyntheticSpec::default(),
            normalization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/run"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Small,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Small => ModelConfig::small(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| CliError::io(path, e))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        let f = self.data.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::Usage(format!("label_fraction must lie in (0, 1], got {f}")));
        }
        for (name, seed) in [
            ("train.seed", self.train.seed),
            ("data.split_seed", self.data.split_seed),
            ("data.synthetic.seed", self.data.synthetic.seed),
        ] {
            if seed > MAX_SEED {
                return Err(CliError::Usage(format!("{name} must be at most {MAX_SEED} (TOML integers are signed)")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use semiformer::objective::{MethodVariant, PseudoSource, VariantName};

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::from_toml("[train]\ntau = 0.9\n[data]\ndataset = \"synthetic\"\n").unwrap();
        assert_eq!(c.train.tau, 0.9);
        assert_eq!(c.train.lambda, 4.0);
        assert_eq!(c.data.dataset, DatasetId::Synthetic);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\ntua = 0.9\n"),
            Err(CliError::Usage(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_configs_round_trip(
            tau in 0.01f64..0.99,
            lambda in 0.0f64..10.0,
            fraction in 0.001f64..1.0,
            seed in 0..=MAX_SEED,
            split_seed in 0..=MAX_SEED,
            variant in 0usize..5,
            source in 0usize..3,
            small in any::<bool>(),
            limit in proptest::option::of(1usize..1000),
            noise in 0.0f32..1.0,
        ) {
            let mut c = ExperimentConfig::default();
            c.train.tau = tau;
            c.train.lambda = lambda;
            c.train.seed = seed;
            c.train.variant = MethodVariant::with_source(
                VariantName::ALL[variant],
                [PseudoSource::Cnn, PseudoSource::Transformer, PseudoSource::FusedAverage][source],
            );
            c.data.label_fraction = fraction;
            c.data.split_seed = split_seed;
            c.data.per_class_limit = limit;
            c.data.synthetic.noise = noise;
            c.data.normalization = Some(Normalization::cifar10());
            if small {
                c.model = ModelConfig::small();
            }
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
