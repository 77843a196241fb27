//! Run configuration: a TOML file whose fields command-line flags override.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vgpeft::data::SyntheticSpec;
use vgpeft::model::ModelConfig;
use vgpeft::peft::{parse_placement, DenseKind, PeftMethod, PeftSpec};
use vgpeft::train::TrainConfig;
use vgpeft::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Adapter,
    Bitfit,
    /// Full fine-tuning, no PEFT structure.
    Fft,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Bitfit => "bitfit",
            Method::Fft => "fft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftSection {
    pub method: Method,
    pub rank: usize,
    pub alpha: f64,
    pub bottleneck: usize,
    /// Comma-separated module list, e.g. `"image,decoder"`.
    pub placement: String,
    pub layer_kinds: Vec<DenseKind>,
}

impl Default for PeftSection {
    fn default() -> Self {
        Self {
            method: Method::Lora,
            rank: vgpeft::peft::DEFAULT_LORA_RANK,
            alpha: 1.0,
            bottleneck: 8,
            placement: "text,image,decoder".into(),
            layer_kinds: DenseKind::ALL.to_vec(),
        }
    }
}

impl PeftSection {
    /// `None` for full fine-tuning.
    pub fn spec(&self) -> Result<Option<PeftSpec>> {
        let method = match self.method {
            Method::Lora => PeftMethod::Lora { rank: self.rank, alpha: self.alpha },
            Method::Adapter => PeftMethod::Adapter { bottleneck: self.bottleneck },
            Method::Bitfit => PeftMethod::BitFit,
            Method::Fft => return Ok(None),
        };
        let mut spec = PeftSpec::new(method, parse_placement(&self.placement)?);
        spec.layer_kinds = self.layer_kinds.iter().copied().collect();
        spec.validate()?;
        Ok(Some(spec))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Start from these weights instead of a freshly initialized model.
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub peft: PeftSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config { field: "config", reason: format!("{}: {e}", path.display()) })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { field: "config", reason: e.to_string() })
    }
}

pub fn load_synth_spec(path: &Path) -> Result<SyntheticSpec> {
    read_toml(path)
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        <Method as clap::ValueEnum>::from_str(s, true)
            .map_err(|_| Error::Config { field: "method", reason: format!("unknown method `{s}`") })
    }
}
