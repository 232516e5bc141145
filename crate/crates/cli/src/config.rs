use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use usqm_core::error::{Error, Result};
use usqm_core::features::{ExternalFeatures, FeatureExtractor, SeededEncoder, DEFAULT_SEED};
use usqm_core::fr::FrConfig;
use usqm_core::nr::NrConfig;
use usqm_core::store::config_hash;

/// Resolved configuration: defaults, then `USQM_SEED`, then the JSON config
/// file, then explicit flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// `builtin-seeded:<seed>` or `external:<features-file>`.
    pub extractor: String,
    pub fr: FrConfig,
    pub nr: NrConfig,
    pub out_dir: Option<PathBuf>,
    pub verbosity: u8,
    pub jobs: Option<usize>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            extractor: format!("builtin-seeded:{DEFAULT_SEED}"),
            fr: FrConfig::default(),
            nr: NrConfig::default(),
            out_dir: None,
            verbosity: 0,
            jobs: None,
        }
    }
}

#[derive(Serialize)]
struct Hashed<'a> {
    extractor: &'a str,
    fr: &'a FrConfig,
    nr: &'a NrConfig,
}

impl CliConfig {
    pub fn load(file: Option<&Path>, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("USQM_SEED `{seed}` is not an unsigned integer")))?;
            cfg.extractor = format!("builtin-seeded:{seed}");
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let from_file: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&cfg)?;
            merge(&mut merged, from_file);
            cfg = serde_json::from_value(merged).map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    /// Hash of the settings that affect results (not paths or verbosity).
    pub fn hash(&self) -> String {
        config_hash(&Hashed {
            extractor: &self.extractor,
            fr: &self.fr,
            nr: &self.nr,
        })
    }

    pub fn extractor(&self) -> Result<Arc<dyn FeatureExtractor>> {
        parse_extractor(&self.extractor)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse_extractor(spec: &str) -> Result<Arc<dyn FeatureExtractor>> {
    if spec == "builtin" || spec == "builtin-seeded" {
        return Ok(Arc::new(SeededEncoder::new(DEFAULT_SEED)));
    }
    if let Some(seed) = spec.strip_prefix("builtin-seeded:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Parameter(format!("bad extractor seed in `{spec}`")))?;
        return Ok(Arc::new(SeededEncoder::new(seed)));
    }
    if let Some(path) = spec.strip_prefix("external:") {
        return Ok(Arc::new(ExternalFeatures::load(path)?));
    }
    Err(Error::Parameter(format!(
        "unknown extractor `{spec}`; expected builtin-seeded:<seed> or external:<features-file>"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_env_and_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"fr": {"radius": 2}, "nr": {"components": 3}}"#).unwrap();
        let cfg = CliConfig::load(Some(&path), Some("7")).unwrap();
        assert_eq!(cfg.extractor, "builtin-seeded:7");
        assert_eq!(cfg.fr.radius, 2);
        assert_eq!(cfg.fr.temperature, 20.0);
        assert_eq!(cfg.nr.components, 3);
        assert_eq!(cfg.nr.pca_dim, 128);
        assert_ne!(cfg.hash(), CliConfig::default().hash());
    }

    #[test]
    fn bad_inputs() {
        assert!(CliConfig::load(None, Some("x")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"colour": 1}"#).unwrap();
        assert!(matches!(CliConfig::load(Some(&path), None), Err(Error::Parameter(_))));
        assert!(parse_extractor("resnet").is_err());
        assert!(parse_extractor("builtin-seeded:abc").is_err());
    }
}
