use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clear_core::pipeline::PipelineConfig;
use serde_json::Value;

/// Recursively overlay `over` onto `base`; objects merge key by key, anything
/// else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then the optional JSON file, then `--seed` (which re-derives
/// every stage seed).
pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<PipelineConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    let file_seed = file.get("seed").and_then(Value::as_u64);
    let mut base = serde_json::to_value(PipelineConfig::with_seed(file_seed.unwrap_or(0)))?;
    merge(&mut base, file);
    let mut config: PipelineConfig = serde_json::from_value(base).context("invalid config")?;
    if let Some(seed) = seed_flag {
        config.reseed(seed);
    }
    Ok(config)
}

/// File layout of a working directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
    pub data: PathBuf,
    pub schema: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path, data: Option<PathBuf>, schema: Option<PathBuf>) -> Self {
        Layout {
            dir: dir.to_path_buf(),
            data: data.unwrap_or_else(|| dir.join("records.csv")),
            schema: schema.unwrap_or_else(|| dir.join("schema.json")),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_sit_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "scarf": {"epochs": 3}, "audit": {"k": 4}}"#).unwrap();
        let c = load(Some(&path), None).unwrap();
        assert_eq!(c.scarf.epochs, 3);
        assert_eq!(c.scarf.batch_size, 16);
        assert_eq!(c.audit.k, 4);
        assert_eq!(c.synth.seed, 5);
        assert_eq!(c.scarf.seed, PipelineConfig::with_seed(5).scarf.seed);

        let c = load(Some(&path), Some(9)).unwrap();
        assert_eq!(c.synth.seed, 9);
        assert_eq!(c.scarf.epochs, 3);
    }

    #[test]
    fn explicit_stage_seed_in_file_is_kept() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "scarf": {"seed": 77}}"#).unwrap();
        assert_eq!(load(Some(&path), None).unwrap().scarf.seed, 77);
    }

    #[test]
    fn bad_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"scarf": {"epochs": "many"}}"#).unwrap();
        assert!(load(Some(&path), None).is_err());
        assert!(load(Some(&dir.path().join("missing.json")), None).is_err());
    }
}
