//! JSON configuration documents (see `schema/config.schema.json`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimator::{ArchitectureSpec, TrainConfig};
use crate::generator::GeneratorConfig;
use crate::optics::MicroscopeConfig;
use crate::restore::DeconvConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Network hyperparameters; outputs and input shape follow the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_blocks")]
    pub n_blocks: usize,
    #[serde(default = "d_convs")]
    pub convs_per_block: usize,
    #[serde(default = "d_channels")]
    pub base_channels: usize,
    #[serde(default = "d_dense")]
    pub dense_widths: Vec<usize>,
    #[serde(default = "d_true")]
    pub normalize_input: bool,
    #[serde(default = "d_scale")]
    pub output_scale: f64,
}

fn d_blocks() -> usize {
    5
}
fn d_convs() -> usize {
    2
}
fn d_channels() -> usize {
    8
}
fn d_dense() -> Vec<usize> {
    vec![64, 64]
}
fn d_true() -> bool {
    true
}
fn d_scale() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: d_blocks(),
            convs_per_block: d_convs(),
            base_channels: d_channels(),
            dense_widths: d_dense(),
            normalize_input: true,
            output_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, n_outputs: usize, input_shape: [usize; 3]) -> ArchitectureSpec {
        ArchitectureSpec {
            n_blocks: self.n_blocks,
            convs_per_block: self.convs_per_block,
            base_channels: self.base_channels,
            kernel: [3, 3, 3],
            pool: [1, 2, 2],
            dense_widths: self.dense_widths.clone(),
            n_outputs,
            input_shape,
            normalize_input: self.normalize_input,
            output_scale: self.output_scale,
        }
    }
}

fn d_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "d_version")]
    pub version: u32,
    pub microscope: MicroscopeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub deconv: DeconvConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config {
                path: "version".into(),
                message: format!(
                    "unsupported version {}, expected {CONFIG_VERSION}",
                    self.version
                ),
            });
        }
        self.microscope.validate()?;
        if let Some(g) = &self.generator {
            g.validate()?;
            let modes = g.mode_indices()?.len();
            self.model
                .architecture(modes, g.output_shape())
                .validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        self.deconv.validate()
    }

    pub fn generator(&self) -> Result<&GeneratorConfig> {
        self.generator.as_ref().ok_or_else(|| Error::Config {
            path: "generator".into(),
            message: "section required for this command".into(),
        })
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config {
            path: "train".into(),
            message: "section required for this command".into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Parses and validates a config document, applying `overrides` first.
///
/// Each override is a dotted key path and a value; the value is parsed as
/// JSON and falls back to a plain string.
pub fn config_from_value(mut doc: Value, overrides: &[(String, String)]) -> Result<Config> {
    for (key, raw) in overrides {
        apply_override(&mut doc, key, raw)?;
    }
    let config: Config = serde_path_to_error::deserialize(&doc).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<Config> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config {
        path: ".".into(),
        message: e.to_string(),
    })?;
    config_from_value(doc, overrides)
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let bad = || Error::Config {
            path: key.to_string(),
            message: "override path does not address an object field or array element".into(),
        };
        if part.is_empty() {
            return Err(bad());
        }
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad())?;
                let slot = items.get_mut(idx).ok_or_else(bad)?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else {
                    unreachable!()
                };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(bad()),
        };
    }
    Ok(())
}
