//! Config file loading. The document nests the full experiment description
//! under `experiment` and the artifact layout under `output`; every field
//! has a default, so `{}` is a complete config.

use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use fedprune_core::fed::ExperimentConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub experiment: ExperimentConfig,
    pub output: OutputSpec,
}

/// Artifact names, all resolved relative to --out. `checkpoint` names a
/// subdirectory for the model container and manifest; omit it to skip
/// checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub metrics: String,
    pub summary: String,
    pub checkpoint: Option<String>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            metrics: "metrics.jsonl".into(),
            summary: "summary.json".into(),
            checkpoint: None,
        }
    }
}

impl OutputSpec {
    /// Rejects paths that would escape the --out directory.
    pub fn validate(&self) -> Result<(), CliError> {
        confined(&self.metrics)?;
        confined(&self.summary)?;
        if let Some(cp) = &self.checkpoint {
            confined(cp)?;
        }
        Ok(())
    }
}

fn confined(rel: &str) -> Result<(), CliError> {
    let path = Path::new(rel);
    let ok = !rel.is_empty()
        && path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "output path '{rel}' must stay inside the output directory"
        )))
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ConfigFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    cfg.experiment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.output.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg: ConfigFile = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ConfigFile::default());
        cfg.experiment.validate().unwrap();
        cfg.output.validate().unwrap();
    }

    #[test]
    fn shipped_configs_parse_and_validate() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk.json", "tiny.json", "component.json"] {
            let cfg = load_config(&root.join(name)).unwrap();
            cfg.experiment.validate().unwrap();
        }
        // desk.json spells out the defaults; keep it in sync with them.
        let desk = load_config(&root.join("desk.json")).unwrap();
        assert_eq!(desk.experiment, ExperimentConfig::default());
    }

    #[test]
    fn escaping_output_paths_are_rejected() {
        assert!(confined("metrics.jsonl").is_ok());
        assert!(confined("sub/dir/file.json").is_ok());
        assert!(confined("../escape.json").is_err());
        assert!(confined("/absolute.json").is_err());
        assert!(confined("a/../../b").is_err());
        assert!(confined("").is_err());
    }
}
