//! Experiment configuration: TOML schema, defaults, and validation.
//!
//! Everything an experiment does is reconstructible from one config file
//! plus a seed; unknown keys are rejected so typos fail loudly instead of
//! silently running defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::ComputeConfig;
use crate::modem::ChannelConfig;
use crate::nn::{Architecture, TrainingHyperparams};
use crate::planner::MAX_ENUM_LAYERS;

/// Which plan-selection rule the uplink uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Full per-layer enumeration.
    Layerwise,
    /// Per-group enumeration with this many importance groups.
    Grouped(usize),
    /// Model-wide adaptive modulation (one shared level per round).
    Am,
    /// Every layer at one fixed level for the whole run.
    Fixed(u32),
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheme> {
        match s {
            "layerwise" => Ok(Scheme::Layerwise),
            "am" => Ok(Scheme::Am),
            _ => {
                if let Some(m) = s.strip_prefix("fixed") {
                    let m: u32 = m
                        .parse()
                        .map_err(|_| Error::config(format!("bad fixed scheme '{s}'")))?;
                    return Ok(Scheme::Fixed(m));
                }
                if let Some(g) = s.strip_prefix("grouped") {
                    let g: usize = g
                        .parse()
                        .map_err(|_| Error::config(format!("bad grouped scheme '{s}'")))?;
                    return Ok(Scheme::Grouped(g));
                }
                Err(Error::config(format!(
                    "unknown scheme '{s}' (expected layerwise, am, fixedM, or groupedG)"
                )))
            }
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Layerwise => write!(f, "layerwise"),
            Scheme::Am => write!(f, "am"),
            Scheme::Fixed(m) => write!(f, "fixed{m}"),
            Scheme::Grouped(g) => write!(f, "grouped{g}"),
        }
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Scheme, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Dataset source. `kind = "synthetic"` draws separable Gaussian clusters;
/// `kind = "mnist-idx"` reads IDX image/label files from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: String,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_train_per_client")]
    pub train_per_client: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// IDX file paths (mnist-idx only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

fn default_classes() -> usize {
    10
}
fn default_dims() -> usize {
    784
}
fn default_train_per_client() -> usize {
    1000
}
fn default_test_samples() -> usize {
    2000
}
fn default_margin() -> f64 {
    4.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synthetic".into(),
            classes: default_classes(),
            dims: default_dims(),
            train_per_client: default_train_per_client(),
            test_samples: default_test_samples(),
            margin: default_margin(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        match self.kind.as_str() {
            "synthetic" => {
                if self.classes < 2 || self.dims == 0 {
                    return Err(Error::config(format!(
                        "synthetic dataset needs classes >= 2 and dims >= 1, got {}x{}",
                        self.classes, self.dims
                    )));
                }
                if self.train_per_client == 0 || self.test_samples == 0 {
                    return Err(Error::config("synthetic dataset sizes must be nonzero"));
                }
                if !(self.margin > 0.0) {
                    return Err(Error::config(format!(
                        "margin must be > 0, got {}",
                        self.margin
                    )));
                }
                Ok(())
            }
            "mnist-idx" => {
                for (name, path) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if path.is_none() {
                        return Err(Error::config(format!(
                            "dataset kind mnist-idx requires the {name} path"
                        )));
                    }
                }
                Ok(())
            }
            other => Err(Error::config(format!(
                "unknown dataset kind '{other}' (expected synthetic or mnist-idx)"
            ))),
        }
    }
}

/// Training hyperparameters as they appear in the config file (client count
/// lives at the top level).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamSection {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_tau")]
    pub tau: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_l_smooth")]
    pub l_smooth: f64,
    #[serde(default = "default_sigma_sq")]
    pub sigma_sq: f64,
}

fn default_eta() -> f64 {
    0.01
}
fn default_tau() -> u32 {
    5
}
fn default_batch_size() -> usize {
    32
}
fn default_l_smooth() -> f64 {
    1.0
}
fn default_sigma_sq() -> f64 {
    0.1
}

impl Default for HyperparamSection {
    fn default() -> Self {
        HyperparamSection {
            eta: default_eta(),
            tau: default_tau(),
            batch_size: default_batch_size(),
            l_smooth: default_l_smooth(),
            sigma_sq: default_sigma_sq(),
        }
    }
}

/// Compute-latency section; `v_samples` defaults to the client's shard size
/// when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_samples: Option<f64>,
    #[serde(default = "default_cycles")]
    pub c_cycles_per_sample: f64,
    #[serde(default = "default_clock")]
    pub f_clock: f64,
}

fn default_cycles() -> f64 {
    1e6
}
fn default_clock() -> f64 {
    1e9
}

impl Default for ComputeSection {
    fn default() -> Self {
        ComputeSection {
            v_samples: None,
            c_cycles_per_sample: default_cycles(),
            f_clock: default_clock(),
        }
    }
}

impl ComputeSection {
    /// Concrete compute config given the actual shard size.
    pub fn resolve(&self, shard_size: usize) -> ComputeConfig {
        ComputeConfig {
            v_samples: self.v_samples.unwrap_or(shard_size as f64),
            c_cycles_per_sample: self.c_cycles_per_sample,
            f_clock: self.f_clock,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Stop at the first evaluation reaching this accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    /// Recompute layer importance every K rounds.
    #[serde(default = "default_importance_period")]
    pub importance_period: u32,
    #[serde(default = "default_hessian_batch")]
    pub hessian_batch_size: usize,
    #[serde(default = "default_model")]
    pub model: String,
    /// Force sequential execution (results are identical either way).
    #[serde(default)]
    pub deterministic: bool,
    /// Skip quantization and channel noise entirely (regression baseline).
    #[serde(default)]
    pub exact_uplink: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub hyperparams: HyperparamSection,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub compute: ComputeSection,
}

fn default_n_clients() -> usize {
    10
}
fn default_rounds() -> u32 {
    100
}
fn default_scheme() -> Scheme {
    Scheme::Layerwise
}
fn default_eval_every() -> u32 {
    1
}
fn default_importance_period() -> u32 {
    5
}
fn default_hessian_batch() -> usize {
    64
}
fn default_model() -> String {
    "reduced-mlp".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config must parse to defaults")
    }
}

impl ExperimentConfig {
    /// Resolve the model name into an architecture.
    pub fn architecture(&self) -> Result<Architecture> {
        let arch = match self.model.as_str() {
            "lenet-300-100" => Architecture::lenet_300_100(),
            "reduced-mlp" => Architecture::reduced_mlp(),
            "cnn-small" => Architecture::small_cnn(),
            "cnn-deep" => Architecture::deep_cnn(),
            custom => {
                let Some(spec) = custom.strip_prefix("mlp:") else {
                    return Err(Error::config(format!(
                        "unknown model '{custom}' (expected lenet-300-100, reduced-mlp, \
                         cnn-small, cnn-deep, or mlp:<d0-d1-...>)"
                    )));
                };
                let dims: Vec<usize> = spec
                    .split('-')
                    .map(|part| {
                        part.parse()
                            .map_err(|_| Error::config(format!("bad MLP width '{part}'")))
                    })
                    .collect::<Result<_>>()?;
                Architecture::mlp(&dims)
            }
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Assemble the full hyperparameter set (client count folded in).
    pub fn training_hyperparams(&self) -> TrainingHyperparams {
        TrainingHyperparams {
            eta: self.hyperparams.eta,
            tau: self.hyperparams.tau,
            batch_size: self.hyperparams.batch_size,
            l_smooth: self.hyperparams.l_smooth,
            sigma_sq: self.hyperparams.sigma_sq,
            n_clients: self.n_clients,
        }
    }

    /// Cross-field validation; call after parsing.
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if self.importance_period == 0 {
            return Err(Error::config("importance_period must be >= 1"));
        }
        if self.hessian_batch_size == 0 {
            return Err(Error::config("hessian_batch_size must be >= 1"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0 < t && t <= 1.0) {
                return Err(Error::config(format!(
                    "target_accuracy must be in (0, 1], got {t}"
                )));
            }
        }
        self.channel.validate()?;
        self.training_hyperparams().validate()?;
        self.dataset.validate()?;
        if let Some(v) = self.compute.v_samples {
            if !(v > 0.0) {
                return Err(Error::config(format!("v_samples must be > 0, got {v}")));
            }
        }
        if !(self.compute.c_cycles_per_sample > 0.0 && self.compute.f_clock > 0.0) {
            return Err(Error::config("compute constants must be positive"));
        }

        let arch = self.architecture()?;
        let l = arch.n_layers();
        match self.scheme {
            Scheme::Layerwise => {
                if l > MAX_ENUM_LAYERS {
                    return Err(Error::config(format!(
                        "layerwise enumeration over {l} layers exceeds the \
                         {MAX_ENUM_LAYERS}-layer budget; use a grouped scheme"
                    )));
                }
            }
            Scheme::Grouped(g) => {
                if g < 1 || g > l {
                    return Err(Error::config(format!(
                        "grouped scheme needs 1 <= g <= {l}, got {g}"
                    )));
                }
                if g > MAX_ENUM_LAYERS {
                    return Err(Error::config(format!(
                        "grouped scheme with {g} groups exceeds the {MAX_ENUM_LAYERS}-group budget"
                    )));
                }
            }
            Scheme::Fixed(m) => {
                if !self.channel.candidate_levels.contains(&m) {
                    return Err(Error::config(format!(
                        "fixed scheme order {m} not in candidate_levels {:?}",
                        self.channel.candidate_levels
                    )));
                }
            }
            Scheme::Am => {}
        }

        // The dataset must feed the model.
        let (input_dim, classes) = match self.dataset.kind.as_str() {
            "synthetic" => (self.dataset.dims, self.dataset.classes),
            _ => (784, 10),
        };
        if arch.input_dim() != input_dim {
            return Err(Error::config(format!(
                "model expects {} inputs but the dataset provides {input_dim}",
                arch.input_dim()
            )));
        }
        if arch.n_classes() != classes {
            return Err(Error::config(format!(
                "model emits {} classes but the dataset has {classes}",
                arch.n_classes()
            )));
        }
        Ok(())
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
