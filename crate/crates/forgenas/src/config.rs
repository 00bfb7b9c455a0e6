//! Run configuration: one TOML document with `search`, `registry`, `train`
//! and `data` sections. Every key has a default, so an empty file is valid.
//!
//! Resolution order, later wins: defaults, config file, preset, environment
//! (`FORGENAS_<SECTION>_<KEY>`), command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use forgenas_core::c2pn::{NetConfig, TrainConfig};
use forgenas_core::data::{Domain, Fnv, SplitSpec};
use forgenas_core::ops::OperatorRegistry;
use forgenas_core::search::{RateUpdate, SearchConfig};
use forgenas_core::supernet::SupernetConfig;
use forgenas_core::tensor::Adam;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "FORGENAS_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub prune_period: usize,
    pub batch_size: usize,
    pub probe_batch: usize,
    /// Probe every this many epochs after warm-up; 0 disables probing.
    pub probe_interval: usize,
    pub rate_update: RateUpdate,
    pub init_channels: usize,
    pub groups: usize,
    pub sample_rate: f64,
    pub lambda: f64,
    pub affine: bool,
    pub arch_init_noise: f64,
    pub weight_lr: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    pub inner_lr: f64,
    pub samples_per_domain: usize,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchSection {
            epochs: s.epochs,
            warmup_epochs: s.warmup_epochs,
            prune_period: s.prune_period,
            batch_size: s.batch_size,
            probe_batch: s.probe_batch,
            probe_interval: s.probe_interval,
            rate_update: s.rate_update,
            init_channels: s.supernet.init_channels,
            groups: s.supernet.groups,
            sample_rate: s.supernet.sample_rate,
            lambda: s.supernet.lambda,
            affine: s.supernet.affine,
            arch_init_noise: s.supernet.arch_init_noise,
            weight_lr: s.weight_optimizer.lr,
            weight_decay: s.weight_optimizer.weight_decay,
            arch_lr: s.arch_optimizer.lr,
            arch_beta1: s.arch_optimizer.beta1,
            arch_beta2: s.arch_optimizer.beta2,
            arch_weight_decay: s.arch_optimizer.weight_decay,
            inner_lr: s.inner_lr,
            samples_per_domain: s.samples_per_domain,
            seed: s.seed,
        }
    }
}

impl SearchSection {
    pub fn to_core(&self) -> SearchConfig {
        let base = SearchConfig::default();
        SearchConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            prune_period: self.prune_period,
            batch_size: self.batch_size,
            probe_batch: self.probe_batch,
            probe_interval: self.probe_interval,
            rate_update: self.rate_update,
            supernet: SupernetConfig {
                init_channels: self.init_channels,
                groups: self.groups,
                sample_rate: self.sample_rate,
                lambda: self.lambda,
                affine: self.affine,
                arch_init_noise: self.arch_init_noise,
                ..SupernetConfig::default()
            },
            weight_optimizer: Adam { lr: self.weight_lr, weight_decay: self.weight_decay, ..base.weight_optimizer },
            arch_optimizer: Adam {
                lr: self.arch_lr,
                beta1: self.arch_beta1,
                beta2: self.arch_beta2,
                weight_decay: self.arch_weight_decay,
                ..base.arch_optimizer
            },
            inner_lr: self.inner_lr,
            samples_per_domain: self.samples_per_domain,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrySection {
    pub ops: Vec<String>,
}

impl Default for RegistrySection {
    fn default() -> Self {
        RegistrySection { ops: OperatorRegistry::default().names() }
    }
}

impl RegistrySection {
    pub fn to_core(&self) -> Result<OperatorRegistry> {
        Ok(OperatorRegistry::from_names(&self.ops)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hflip: bool,
    pub init_channels: usize,
    pub groups: usize,
    pub pyramid: bool,
    pub affine: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let n = NetConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            hflip: t.hflip,
            init_channels: n.init_channels,
            groups: n.groups,
            pyramid: n.pyramid,
            affine: n.affine,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self) -> (NetConfig, TrainConfig) {
        let net = NetConfig {
            init_channels: self.init_channels,
            groups: self.groups,
            pyramid: self.pyramid,
            affine: self.affine,
            ..NetConfig::default()
        };
        let train = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            hflip: self.hflip,
            seed: self.seed,
        };
        (net, train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic manipulation domain (`splice`, `blur_patch`, `noise_patch`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<String>,
    /// Directory with `real/` and `fake/` image subdirectories.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Synthetic sample count.
    pub n: usize,
    /// Image side after generation or resizing.
    pub size: usize,
    pub seed: u64,
    /// Train / validation / test proportions for `train` and `eval`.
    pub split: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { synthetic: None, root: None, n: 1000, size: 32, seed: 0, split: SplitSpec::standard().ratios }
    }
}

impl DataSection {
    pub fn domain(&self) -> Result<Option<Domain>> {
        self.synthetic.as_deref().map(str::parse).transpose().map_err(Into::into)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let spec = SplitSpec::new(self.split.clone())?;
        if spec.ratios.len() != 3 {
            bail!("data.split needs train, validation and test proportions, got {}", spec.ratios.len());
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub search: SearchSection,
    pub registry: RegistrySection,
    pub train: TrainSection,
    pub data: DataSection,
}

/// Size presets layered over the file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// One cell group, 8 channels, 16x16 images.
    Desk,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Desk => {
                self.search.groups = 1;
                self.search.init_channels = 8;
                self.train.groups = 1;
                self.train.init_channels = 8;
                self.data.size = 16;
            }
        }
    }

    /// Apply `FORGENAS_<SECTION>_<KEY>=<value>` pairs. Values are read as
    /// TOML literals and fall back to plain strings.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut doc = toml::Table::try_from(&*self)?;
        let mut touched = false;
        for (name, raw) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = ["search", "registry", "train", "data"]
                .iter()
                .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
            else {
                bail!("{name}: unknown config section");
            };
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let table = doc.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table.as_table_mut().expect("sections are tables").insert(key.to_string(), value);
            touched = true;
        }
        if touched {
            *self = doc.try_into().map_err(|e| anyhow!("invalid environment override: {e}"))?;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.search.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    /// Hash of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(crate::formats::canonical_json(self).expect("config serializes").as_bytes());
        h.finish()
    }
}
