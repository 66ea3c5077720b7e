//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use iirsnn::data::{
    load_cifar10_binary, load_mnist_idx, synthetic_dataset, Cifar10Paths, MnistPaths, SplitConfig, SyntheticConfig,
};
use iirsnn::{AnnTrainConfig, ConversionConfig, DatasetHandle, IirSchedule, NetworkSpec, SnnTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the IDX or CIFAR binary files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub split: SplitConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            split: SplitConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IirSection {
    pub stages: Vec<usize>,
    pub epochs_per_stage: usize,
    pub probe_samples: usize,
}

impl Default for IirSection {
    fn default() -> Self {
        IirSection {
            stages: vec![5, 4, 3, 2, 1],
            epochs_per_stage: SnnTrainConfig::default().epochs,
            probe_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub keep_fraction: f64,
    pub finetune_epochs: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            keep_fraction: 0.1,
            finetune_epochs: 2,
        }
    }
}

/// Everything a command needs. `seed` is copied into every section that
/// draws random numbers, so one value pins the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in name (`conv-small`, `vgg6-mini`, `deep-mlp`) or a path to a JSON network spec.
    pub network: String,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub ann: AnnTrainConfig,
    pub conversion: ConversionConfig,
    pub snn: SnnTrainConfig,
    pub iir: IirSection,
    pub prune: PruneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: "conv-small".into(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            ann: AnnTrainConfig::default(),
            conversion: ConversionConfig::default(),
            snn: SnnTrainConfig::default(),
            iir: IirSection::default(),
            prune: PruneSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the run seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ann.seed = seed;
        self.snn.seed = seed;
        self.conversion.seed = seed;
        self.dataset.split.seed = seed;
        self.dataset.synthetic.seed = seed;
    }

    pub fn schedule(&self) -> Result<IirSchedule> {
        Ok(IirSchedule::explicit(
            self.iir.stages.clone(),
            self.iir.epochs_per_stage,
        )?)
    }

    pub fn validate(&self) -> Result<()> {
        self.ann.validate()?;
        self.snn.validate()?;
        self.schedule()?;
        let c = &self.conversion;
        ensure!(
            c.percentile > 0.0 && c.percentile <= 100.0,
            "conversion percentile {} outside (0, 100]",
            c.percentile
        );
        ensure!(c.timesteps >= 1, "conversion timesteps must be >= 1");
        ensure!(
            c.calibration_samples >= 1,
            "conversion calibration_samples must be >= 1"
        );
        let split = &self.dataset.split;
        ensure!(
            (0.0..1.0).contains(&split.val_fraction),
            "dataset val_fraction {} outside [0, 1)",
            split.val_fraction
        );
        ensure!(
            self.prune.keep_fraction > 0.0 && self.prune.keep_fraction <= 1.0,
            "prune keep_fraction {} outside (0, 1]",
            self.prune.keep_fraction
        );
        ensure!(self.iir.probe_samples >= 1, "iir probe_samples must be >= 1");
        if self.dataset.kind != DatasetKind::Synthetic {
            let dir = self.data_dir()?;
            ensure!(dir.is_dir(), "dataset directory {} does not exist", dir.display());
        }
        if NetworkSpec::builtin(&self.network, [1, 8, 8], 2).is_none() {
            ensure!(
                Path::new(&self.network).is_file(),
                "network {:?} is neither a built-in name nor an existing spec file",
                self.network
            );
        }
        Ok(())
    }

    fn data_dir(&self) -> Result<PathBuf> {
        match (&self.dataset.path, self.dataset.kind) {
            (Some(p), _) => Ok(p.clone()),
            (None, DatasetKind::Mnist) => Ok(PathBuf::from("data/mnist")),
            (None, DatasetKind::Cifar10) => Ok(PathBuf::from("data/cifar10")),
            (None, DatasetKind::Synthetic) => bail!("synthetic data has no directory"),
        }
    }

    pub fn load_dataset(&self) -> Result<DatasetHandle> {
        let split = &self.dataset.split;
        let handle = match self.dataset.kind {
            DatasetKind::Synthetic => synthetic_dataset(&self.dataset.synthetic, split)?,
            DatasetKind::Mnist => {
                let paths = MnistPaths::in_dir(&self.data_dir()?);
                ensure!(
                    paths.exist(),
                    "MNIST IDX files missing under {}",
                    self.data_dir()?.display()
                );
                load_mnist_idx(&paths, split)?
            }
            DatasetKind::Cifar10 => load_cifar10_binary(&Cifar10Paths::in_dir(&self.data_dir()?), split)?,
        };
        Ok(handle)
    }

    pub fn network_spec(&self, data: &DatasetHandle) -> Result<NetworkSpec> {
        let input = data.train.sample_shape();
        let spec = match NetworkSpec::builtin(&self.network, input, data.train.classes) {
            Some(spec) => spec,
            None => {
                let text = std::fs::read_to_string(&self.network)
                    .with_context(|| format!("reading network spec {}", self.network))?;
                serde_json::from_str(&text).with_context(|| format!("parsing network spec {}", self.network))?
            }
        };
        spec.validate()?;
        ensure!(
            spec.input == input,
            "network input {:?} does not match dataset samples {:?}",
            spec.input,
            input
        );
        Ok(spec)
    }
}
