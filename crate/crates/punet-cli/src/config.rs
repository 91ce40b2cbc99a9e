//! Run configuration: flag/file/preset resolution and dataset specs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use punet::data::{
    self, augment, load_cifar10, load_image_folder, make_synthetic, stratified_split,
    AugmentConfig, Dataset, Split,
};
use punet::error::{Error, Result};
use punet::optim::{ScheduleSpec, SgdConfig};
use punet::util::derive_seed;

/// Fully resolved settings for one run, also embedded in the run manifest so
/// a run can be reproduced from it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    /// `synthetic[:n_per_class]`, `cifar10:<dir>`, or `folder:<dir>`.
    pub dataset: String,
    /// Train/val/test fractions for stratified splitting.
    pub split: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `none`, `multistep:<e1,e2,...>:<factor>`, or `plateau:<factor>:<patience>`.
    pub schedule: String,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// `none` or `static`.
    pub augment: String,
    pub noise_peak: f64,
    pub preset: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: String::new(),
            dataset: "synthetic".into(),
            split: [0.8, 0.1, 0.1],
            epochs: 10,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            schedule: "none".into(),
            seed: 0,
            grad_clip: None,
            augment: "none".into(),
            noise_peak: 255.0,
            preset: None,
        }
    }
}

/// Named hyperparameter presets from the published experiments.
pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<()> {
    match name {
        "galaxy-pure" => {
            cfg.lr = 0.01;
            cfg.weight_decay = 0.01;
            cfg.momentum = 0.9;
            cfg.schedule = "plateau:0.1:3".into();
            cfg.epochs = 30;
            cfg.batch_size = 64;
        }
        "galaxy-resnet" => {
            cfg.lr = 0.1;
            cfg.weight_decay = 0.001;
            cfg.momentum = 0.9;
            cfg.schedule = "plateau:0.1:3".into();
            cfg.epochs = 30;
            cfg.batch_size = 64;
        }
        "imagenet-pure" => {
            cfg.lr = 0.01;
            cfg.weight_decay = 0.001;
            cfg.momentum = 0.9;
            cfg.schedule = "multistep:30,60:0.1".into();
            cfg.epochs = 90;
            cfg.batch_size = 256;
        }
        "cifar-pure" => {
            cfg.lr = 0.01;
            cfg.weight_decay = 0.001;
            cfg.momentum = 0.9;
            cfg.schedule = "multistep:80,120:0.1".into();
            cfg.epochs = 160;
            cfg.batch_size = 128;
        }
        "cifar-pure-long" => {
            cfg.lr = 0.01;
            cfg.weight_decay = 0.001;
            cfg.momentum = 0.9;
            cfg.schedule = "multistep:140,180:0.1".into();
            cfg.epochs = 220;
            cfg.batch_size = 128;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset '{other}'; known: galaxy-pure, galaxy-resnet, imagenet-pure, \
                 cifar-pure, cifar-pure-long"
            )))
        }
    }
    cfg.preset = Some(name.to_string());
    Ok(())
}

/// Parses a schedule string into a spec, `None` for "none".
pub fn parse_schedule(s: &str) -> Result<Option<ScheduleSpec>> {
    if s == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(':').collect();
    let spec = match parts.as_slice() {
        ["multistep", milestones, factor] => {
            let milestones = milestones
                .split(',')
                .map(|m| m.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidConfig(format!("bad milestone in '{s}': {e}")))?;
            let factor = factor
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("bad factor in '{s}': {e}")))?;
            ScheduleSpec::Multistep { milestones, factor }
        }
        ["plateau", factor, patience] => ScheduleSpec::Plateau {
            factor: factor
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("bad factor in '{s}': {e}")))?,
            patience: patience
                .parse::<usize>()
                .map_err(|e| Error::InvalidConfig(format!("bad patience in '{s}': {e}")))?,
        },
        _ => {
            return Err(Error::InvalidConfig(format!(
                "schedule '{s}' must be 'none', 'multistep:<epochs>:<factor>', or \
                 'plateau:<factor>:<patience>'"
            )))
        }
    };
    spec.validate()?;
    Ok(Some(spec))
}

pub fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidConfig(format!("bad split '{s}': {e}")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "split '{s}' must have three comma-separated fractions"
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}

impl RunConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Validates everything that must be rejected before any work happens.
    pub fn validate(&self) -> Result<()> {
        punet::arch::ArchitectureSpec::by_name(&self.arch, 10)?;
        parse_schedule(&self.schedule)?;
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !matches!(self.augment.as_str(), "none" | "static") {
            return Err(Error::InvalidConfig(format!(
                "augment must be 'none' or 'static', got '{}'",
                self.augment
            )));
        }
        parse_dataset_spec(&self.dataset)?;
        Ok(())
    }
}

/// Loads a config file: either a bare `RunConfig` or a run manifest with a
/// `config` field.
pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    #[derive(Deserialize)]
    struct ManifestLike {
        config: RunConfig,
    }
    let text = std::fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<ManifestLike>(&text) {
        return Ok(m.config);
    }
    serde_json::from_str::<RunConfig>(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub enum DatasetSpec {
    Synthetic { n_per_class: usize },
    Cifar10 { dir: String },
    Folder { dir: String },
}

pub fn parse_dataset_spec(s: &str) -> Result<DatasetSpec> {
    if s == "synthetic" {
        return Ok(DatasetSpec::Synthetic { n_per_class: 200 });
    }
    if let Some(n) = s.strip_prefix("synthetic:") {
        let n_per_class = n
            .parse::<usize>()
            .map_err(|e| Error::InvalidConfig(format!("bad synthetic size '{s}': {e}")))?;
        if n_per_class == 0 {
            return Err(Error::InvalidConfig("synthetic size must be positive".into()));
        }
        return Ok(DatasetSpec::Synthetic { n_per_class });
    }
    if let Some(dir) = s.strip_prefix("cifar10:") {
        return Ok(DatasetSpec::Cifar10 { dir: dir.to_string() });
    }
    if let Some(dir) = s.strip_prefix("folder:") {
        return Ok(DatasetSpec::Folder { dir: dir.to_string() });
    }
    Err(Error::InvalidConfig(format!(
        "dataset '{s}' must be 'synthetic[:n]', 'cifar10:<dir>', or 'folder:<dir>'"
    )))
}

pub struct LoadedData {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
}

/// Loads and splits the dataset named by the config.
///
/// CIFAR-10 keeps its published test batch as the test set; the train/val
/// fractions are renormalized over the 50k training images. Synthetic and
/// folder sources are split three ways.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let split_seed = derive_seed(cfg.seed, 0xDA7A, 0);
    match parse_dataset_spec(&cfg.dataset)? {
        DatasetSpec::Synthetic { n_per_class } => {
            let ds = make_synthetic::<f32>(10, n_per_class, 32, derive_seed(cfg.seed, 0xDA7A, 1))?;
            let (train, val, test) = stratified_split(&ds, (cfg.split[0], cfg.split[1], cfg.split[2]), split_seed)?;
            Ok(LoadedData { train, val, test })
        }
        DatasetSpec::Cifar10 { dir } => {
            let (full_train, test) = load_cifar10::<f32>(&dir)?;
            let total = cfg.split[0] + cfg.split[1];
            let train_frac = cfg.split[0] / total;
            // three-way split; the third sliver merges back into validation
            let (train, val_a, val_b) = stratified_split(
                &full_train,
                (train_frac, (1.0 - train_frac) / 2.0, (1.0 - train_frac) / 2.0),
                split_seed,
            )?;
            let val = val_a.concat(&val_b, Split::Val)?;
            Ok(LoadedData { train, val, test })
        }
        DatasetSpec::Folder { dir } => {
            let ds = load_image_folder::<f32>(&dir)?;
            let (train, val, test) =
                stratified_split(&ds, (cfg.split[0], cfg.split[1], cfg.split[2]), split_seed)?;
            Ok(LoadedData { train, val, test })
        }
    }
}

/// Applies static augmentation to the training split when configured.
pub fn maybe_augment(cfg: &RunConfig, train: Dataset<f32>) -> Result<Dataset<f32>> {
    match cfg.augment.as_str() {
        "none" => Ok(train),
        "static" => {
            let aug = AugmentConfig::galaxy_static();
            augment(&train, &aug, derive_seed(cfg.seed, 0xA06, 0))
        }
        other => Err(Error::InvalidConfig(format!("unknown augment mode '{other}'"))),
    }
}

/// Poisson corruption settings for `noise-eval`.
pub fn noise_config(cfg: &RunConfig) -> data::NoiseConfig {
    data::NoiseConfig {
        peak: cfg.noise_peak,
        seed: derive_seed(cfg.seed, 0x4015E, 0),
    }
}
