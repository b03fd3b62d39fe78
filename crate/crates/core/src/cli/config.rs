//! Experiment configuration files and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FederationConfig, RunConfig};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, FEATURE_STRIDE};
use crate::prototype::PrototypeConfig;
use crate::synthdata::{
    preset_shifts, preset_specs, read_dataset_dir, split_federation, FederatedData, Preset, SceneSpec,
};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "SEGFED_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Preset,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_per_client: usize,
    pub val_per_client: usize,
    /// Client whose domain is withheld from training and used as unseen.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_client: Option<usize>,
    /// Pre-generated dataset directory, only for the custom preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Severe,
            height: 64,
            width: 64,
            num_classes: 6,
            train_per_client: 200,
            val_per_client: 50,
            holdout_client: None,
            dataset_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prototype: PrototypeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            losses: LossConfig::default(),
            model: ModelConfig::default(),
            prototype: PrototypeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            federation: self.federation.clone(),
            losses: self.losses,
            model: self.model,
            prototype: self.prototype,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        let d = &self.data;
        let bad = |m: String| Err(Error::Config(m));
        if d.height < 2 * FEATURE_STRIDE || d.height % FEATURE_STRIDE != 0 {
            return bad(format!("data.height must be a multiple of {FEATURE_STRIDE} and >= 8, got {}", d.height));
        }
        if d.width < 2 * FEATURE_STRIDE || d.width % FEATURE_STRIDE != 0 {
            return bad(format!("data.width must be a multiple of {FEATURE_STRIDE} and >= 8, got {}", d.width));
        }
        if !(2..=255).contains(&d.num_classes) {
            return bad(format!("data.num_classes must be in 2..=255, got {}", d.num_classes));
        }
        if d.train_per_client == 0 || d.val_per_client == 0 {
            return bad("data.train_per_client and val_per_client must be >= 1".into());
        }
        if let Some(h) = d.holdout_client {
            if h >= self.federation.num_clients {
                return bad(format!("data.holdout_client {h} is not below federation.num_clients"));
            }
            if self.federation.num_clients < 3 {
                return bad("data.holdout_client needs federation.num_clients >= 3".into());
            }
        }
        if d.dataset_dir.is_some() && d.preset != Preset::Custom {
            return bad("data.dataset_dir is only allowed with preset = \"custom\"".into());
        }
        Ok(())
    }

    /// Generates (or loads) the federated dataset this config describes.
    pub fn build_data(&self) -> Result<(FederatedData, Vec<SceneSpec>)> {
        let d = &self.data;
        if let Some(dir) = &d.dataset_dir {
            let data = read_dataset_dir(dir)?;
            if data.num_classes != d.num_classes {
                return Err(Error::Config(format!(
                    "data.num_classes is {} but {} holds {} classes",
                    d.num_classes,
                    dir.display(),
                    data.num_classes
                )));
            }
            return Ok((data, Vec::new()));
        }
        let n = self.federation.num_clients;
        let specs = preset_specs(d.height, d.width, d.num_classes, self.seed, n);
        let shifts = preset_shifts(d.preset, n, d.num_classes);
        let data = split_federation(&specs, &shifts, n, d.holdout_client, d.train_per_client, d.val_per_client)?;
        Ok((data, specs))
    }

    /// `output_dir`, placed under `$SEGFED_OUT` when that is set and the path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `dotted.path=value` override to a parsed table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("--set {spec:?}: expected key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set {spec:?}: empty key segment")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let slot = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::Config(format!("--set {spec:?}: {k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Line (1-based) where `section.key` is assigned in `source`, if any.
pub fn find_key_line(source: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Prefixes a validation message with `origin:line` when its leading dotted
/// key can be found in the source.
fn anchor(origin: &str, source: &str, msg: String) -> String {
    let key = msg.split_whitespace().next().unwrap_or("");
    match find_key_line(source, key) {
        Some(line) => format!("{origin}:{line}: {msg}"),
        None => format!("{origin}: {msg}"),
    }
}

/// Parses config text, applies overrides in order, deserializes and validates.
pub fn parse_config(source: &str, origin: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(source).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let merged = toml::to_string(&table).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    let cfg: ExperimentConfig = toml::from_str(&merged).map_err(|e| {
        let msg = e.message().to_string();
        // re-anchor on the original text when no override was applied
        if overrides.is_empty() {
            Error::Config(format!("{origin}: {e}"))
        } else {
            Error::Config(format!("{origin} (with --set overrides): {msg}"))
        }
    })?;
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(anchor(origin, source, m)),
        other => other,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, String)> {
    let source = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = parse_config(&source, &path.display().to_string(), overrides)?;
    Ok((cfg, source))
}
