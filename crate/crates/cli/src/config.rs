//! Experiment configuration: one JSON document shared by all subcommands,
//! each of which reads the sections it needs. Command-line flags are
//! applied on top before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikefool::attacks::{AttackSpec, PatchConfig};
use spikefool::event_data::{EventFormat, RasterConfig, SensorSize, SynthSpec};
use spikefool::training::{TradesConfig, TrainConfig};

use crate::error::{in_field, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Dataset to generate (`synth`).
    pub synth: Option<SynthSpec>,
    /// Dataset to read (every other command).
    pub data: Option<DataSpec>,
    /// Architecture to build and train.
    pub model: Option<ModelSpec>,
    /// Trained model to attack, patch or use as the undefended baseline.
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    pub attack: Option<AttackSpec>,
    pub patch: Option<PatchConfig>,
    pub trades: Option<TradesConfig>,
    /// Attack only the first `max_samples` test samples.
    pub max_samples: Option<usize>,
    #[serde(default = "yes")]
    pub record_timing: bool,
    /// Also write each adversarial raster (`attack`).
    #[serde(default = "yes")]
    pub save_adversarial: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            out: None,
            threads: None,
            synth: None,
            data: None,
            model: None,
            model_path: None,
            train: TrainSection::default(),
            attack: None,
            patch: None,
            trades: None,
            max_samples: None,
            record_timing: true,
            save_adversarial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Output directory of `synth`: `train/` and `test/` dataset folders.
    Dir { path: PathBuf },
    /// Generated in memory from the experiment seed.
    Synth { spec: SynthSpec },
    /// Labelled event files rasterised on load.
    Events {
        n_classes: usize,
        format: EventFormat,
        sensor: Option<SensorSize>,
        raster: RasterConfig,
        #[serde(default)]
        t_start: u64,
        train: Vec<LabelledFile>,
        test: Vec<LabelledFile>,
    },
    /// IDX files of (binarized) MNIST; `stride` 10 keeps every tenth sample.
    Mnist {
        dir: PathBuf,
        #[serde(default = "one")]
        stride: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelledFile {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Desk {
        widths: [usize; 2],
    },
    Lenet5 {
        channels: [usize; 5],
        #[serde(default)]
        batchnorm: bool,
    },
    Bmnist,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Spiking network trained on rasters with surrogate-gradient BPTT.
    #[default]
    Bptt,
    /// Analog network trained on rate frames.
    Ann,
    /// `Ann`, then weight transfer to a spiking network.
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub config: TrainConfig,
    #[serde(default = "unit_gain")]
    pub init_gain: f64,
    /// Quantize the trained weights to this many bits.
    pub quantize_bits: Option<u32>,
}

fn unit_gain() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pipeline: Pipeline::default(),
            config: TrainConfig::default(),
            init_gain: 1.0,
            quantize_bits: None,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub max_samples: Option<usize>,
    pub no_timing: bool,
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if let Some(dir) = &o.data {
            self.data = Some(DataSpec::Dir { path: dir.clone() });
        }
        if o.model_path.is_some() {
            self.model_path = o.model_path.clone();
        }
        if let Some(e) = o.epochs {
            self.train.config.epochs = e;
        }
        if o.max_samples.is_some() {
            self.max_samples = o.max_samples;
        }
        if o.no_timing {
            self.record_timing = false;
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| CliError::config("seed", "required (set it in the config or pass --seed)"))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::config("out", "required (set it in the config or pass --out)"))
    }

    pub fn require<'a, T>(field: &str, v: &'a Option<T>) -> Result<&'a T> {
        v.as_ref().ok_or_else(|| CliError::config(field, "missing"))
    }

    /// Checks everything the named command will read.
    pub fn validate(&self, command: &str) -> Result<()> {
        self.seed()?;
        self.out()?;
        if self.threads == Some(0) {
            return Err(CliError::config("threads", "must be at least 1"));
        }
        match command {
            "synth" => in_field("synth", Self::require("synth", &self.synth)?.validate())?,
            "train" => {
                self.validate_data()?;
                Self::require("model", &self.model)?;
                in_field("train.config", self.train.config.validate())?;
                if self.train.init_gain.is_nan() || self.train.init_gain <= 0.0 {
                    return Err(CliError::config("train.init_gain", "must be positive"));
                }
                if let Some(b) = self.train.quantize_bits {
                    if !(2..=16).contains(&b) {
                        return Err(CliError::config("train.quantize_bits", "must lie in 2..=16"));
                    }
                }
            }
            "attack" => {
                self.validate_data()?;
                self.validate_model_path()?;
                in_field("attack", Self::require("attack", &self.attack)?.validate())?;
            }
            "patch" => {
                self.validate_data()?;
                self.validate_model_path()?;
                in_field("patch", Self::require("patch", &self.patch)?.validate())?;
            }
            "defend" => {
                self.validate_data()?;
                if self.model_path.is_some() {
                    self.validate_model_path()?;
                }
                Self::require("model", &self.model)?;
                in_field("train.config", self.train.config.validate())?;
                in_field("trades", Self::require("trades", &self.trades)?.validate())?;
                in_field("attack", Self::require("attack", &self.attack)?.validate())?;
                if self.train.pipeline != Pipeline::Bptt {
                    return Err(CliError::config("train.pipeline", "defend trains with bptt only"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_model_path(&self) -> Result<()> {
        let p = Self::require("model_path", &self.model_path)?;
        if !p.is_file() {
            return Err(CliError::config("model_path", format!("{} does not exist", p.display())));
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<()> {
        match Self::require("data", &self.data)? {
            DataSpec::Dir { path } => {
                for split in ["train", "test"] {
                    let index = path.join(split).join(spikefool::event_data::DATASET_INDEX);
                    if !index.is_file() {
                        return Err(CliError::config("data.path", format!("{} does not exist", index.display())));
                    }
                }
            }
            DataSpec::Synth { spec } => in_field("data.spec", spec.validate())?,
            DataSpec::Events { raster, train, test, n_classes, .. } => {
                in_field("data.raster", raster.validate())?;
                for (name, files) in [("data.train", train), ("data.test", test)] {
                    for (i, f) in files.iter().enumerate() {
                        if !f.path.is_file() {
                            return Err(CliError::config(
                                format!("{name}[{i}].path"),
                                format!("{} does not exist", f.path.display()),
                            ));
                        }
                        if f.label >= *n_classes {
                            return Err(CliError::config(
                                format!("{name}[{i}].label"),
                                format!("{} exceeds n_classes {n_classes}", f.label),
                            ));
                        }
                    }
                }
            }
            DataSpec::Mnist { dir, stride } => {
                if *stride == 0 {
                    return Err(CliError::config("data.stride", "must be at least 1"));
                }
                for f in MNIST_FILES {
                    if !dir.join(f).is_file() {
                        return Err(CliError::config("data.dir", format!("{} does not exist", dir.join(f).display())));
                    }
                }
            }
        }
        Ok(())
    }
}

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_values() {
        let mut cfg = ExperimentConfig { seed: Some(1), out: Some("a".into()), ..ExperimentConfig::default() };
        cfg.apply(&Overrides { seed: Some(9), epochs: Some(3), ..Overrides::default() });
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.out, Some(PathBuf::from("a")));
        assert_eq!(cfg.train.config.epochs, 3);
    }

    #[test]
    fn missing_seed_names_the_field() {
        let cfg = ExperimentConfig { out: Some("o".into()), ..ExperimentConfig::default() };
        let err = cfg.validate("synth").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(r#"{"sed": 1}"#);
        assert!(r.is_err());
    }
}
