//! The JSON run configuration consumed by `hit train`.

use std::path::{Path, PathBuf};

use hit_core::data::degrade::Degradation;
use hit_core::training::TrainConfig;
use hit_core::{HitError, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Files read and written by a training run. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Either a folder of clean images, degraded on the fly, or a paired
    /// `degraded/` + `clean/` layout when `paired` is set.
    pub train_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
    #[serde(default)]
    pub paired: bool,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name (`hit-micro`, `hit-t`, `hit-b`); exclusive with `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Synthetic degradation applied to clean training images. Each image
    /// uses its own seed derived from this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<Degradation>,
    #[serde(default)]
    pub precision: Precision,
    pub paths: Paths,
}

fn field_err(file: &Path, field: &str, message: impl ToString) -> CliError {
    CliError::Field {
        file: file.to_owned(),
        field: field.to_owned(),
        message: message.to_string(),
    }
}

impl RunConfig {
    /// Parses JSON text, reporting the dotted path of the offending field.
    pub fn parse(text: &str, file: &Path) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            field_err(file, &field, e.into_inner())
        })
    }

    /// Reads, parses, resolves relative paths and validates a config file.
    pub fn load(file: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
        let mut cfg = Self::parse(&text, file)?;
        if let Some(base) = file.parent() {
            cfg.paths.resolve_against(base);
        }
        cfg.validate(file)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> hit_core::Result<ModelConfig> {
        match (&self.variant, &self.model) {
            (Some(v), None) => ModelConfig::variant(v),
            (None, Some(m)) => Ok(m.clone()),
            _ => Err(HitError::Config(
                "exactly one of `variant` and `model` must be given".into(),
            )),
        }
    }

    /// Checks every section and that all referenced inputs exist.
    pub fn validate(&self, file: &Path) -> CliResult<()> {
        let model = self.model_config().map_err(|e| field_err(file, "variant", e))?;
        model.validate().map_err(|e| field_err(file, "model", e))?;
        self.train.validate().map_err(|e| field_err(file, "train", e))?;
        match (&self.degradation, self.paths.paired) {
            (Some(d), _) => d.validate().map_err(|e| field_err(file, "degradation", e))?,
            (None, false) => {
                return Err(field_err(
                    file,
                    "degradation",
                    "required unless `paths.paired` is set",
                ))
            }
            (None, true) => {}
        }
        let dir_exists = |field: &str, p: &Path| {
            if p.is_dir() {
                Ok(())
            } else {
                Err(field_err(file, field, format!("no such directory {}", p.display())))
            }
        };
        dir_exists("paths.train_dir", &self.paths.train_dir)?;
        if let Some(v) = &self.paths.val_dir {
            dir_exists("paths.val_dir", v)?;
        }
        for (field, p) in [("paths.checkpoint", &self.paths.checkpoint), ("paths.trace", &self.paths.trace)] {
            let parent = match p.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            dir_exists(field, parent)?;
        }
        Ok(())
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_dir);
        if let Some(v) = &mut self.val_dir {
            fix(v);
        }
        fix(&mut self.checkpoint);
        fix(&mut self.trace);
    }
}
