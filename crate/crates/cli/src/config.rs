//! Sectioned key-value run configuration.
//!
//! TOML sections mirror the engine modules; every knob carries its training
//! default so a minimal file (or none) runs the full pipeline. Unknown keys
//! are rejected. The fully resolved configuration is echoed to the output
//! directory before any work, as the reproducibility record.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use xseg3d_core::data::AugmentationConfig;
use xseg3d_core::{TrainConfig, UNetConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            data_dir: None,
            manifest: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub threshold_fraction: f64,
    pub margin_voxels: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            threshold_fraction: 0.05,
            margin_voxels: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub cases: usize,
    pub dims: [usize; 3],
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            cases: 8,
            dims: [16, 16, 16],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub k: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { k: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiSection {
    pub layer: String,
    pub method: String,
    /// `predicted` uses the model's own mask voxels for the class;
    /// `all` sums over every output voxel.
    pub pixel_set: String,
}

impl Default for XaiSection {
    fn default() -> Self {
        XaiSection {
            layer: "bottleneck".into(),
            method: "gradcam".into(),
            pixel_set: "predicted".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub preprocess: PreprocessSection,
    pub synthetic: SyntheticSection,
    pub split: SplitSection,
    pub xai: XaiSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(seed) = std::env::var("XSEG3D_SEED") {
            cfg.run.seed = seed
                .parse()
                .context("XSEG3D_SEED must be an unsigned integer")?;
        }
        Ok(cfg)
    }

    /// Apply `section.key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Value =
            toml::Value::try_from(&*self).context("serializing config for override")?;
        for set in sets {
            let Some((key, value)) = set.split_once('=') else {
                bail!("--set expects section.key=value, got `{set}`");
            };
            let parsed: toml::Value = toml::from_str(&format!("v = {value}"))
                .map(|t: toml::Table| t["v"].clone())
                .or_else(|_| {
                    toml::from_str(&format!("v = \"{value}\""))
                        .map(|t: toml::Table| t["v"].clone())
                })
                .with_context(|| format!("parsing override value `{value}`"))?;
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                if i + 1 == parts.len() {
                    let table = node
                        .as_table_mut()
                        .with_context(|| format!("`{key}` does not address a table entry"))?;
                    table.insert(part.to_string(), parsed.clone());
                } else {
                    node = node
                        .as_table_mut()
                        .and_then(|t| t.get_mut(*part))
                        .with_context(|| format!("unknown config section `{part}`"))?;
                }
            }
        }
        *self = doc.try_into().context("applying overrides")?;
        Ok(())
    }

    /// Echo the resolved configuration into the output directory.
    pub fn echo_to(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("resolved_config.toml");
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
