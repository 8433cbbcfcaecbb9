use std::fmt;
use std::path::{Path, PathBuf};

use restriction_core::estimator::ExperimentConfig;
use restriction_core::LabError;

/// The shipped default: n = 2 plate family at R = 64, 128, 256.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

/// Anything wrong with the configuration itself. Exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: Option<PathBuf>,
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<LoadedConfig, ConfigError> {
    let (text, label) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", p.display())))?;
            (text, p.display().to_string())
        }
        None => (DEFAULT_CONFIG.to_string(), "<default config>".to_string()),
    };
    let mut config = parse(&text, &label)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(LoadedConfig {
        config,
        path: path.map(Path::to_path_buf),
    })
}

/// Parse and validate; every error names a line of `text`.
pub fn parse(text: &str, label: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("{label}:{}:{}: {e}", e.line(), e.column())))?;
    config.validate().map_err(|e| {
        let msg = match &e {
            LabError::InvalidConfig(m) | LabError::InvalidInput(m) | LabError::DegenerateGeometry(m) => m.as_str(),
        };
        let line = key_line(text, field_path(msg)).unwrap_or(1);
        ConfigError(format!("{label}:{line}: {e}"))
    })?;
    Ok(config)
}

/// Leading `a.b` field path of a validation message such as "tolerances.slope: ...".
fn field_path(msg: &str) -> &str {
    let end = msg
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .unwrap_or(msg.len());
    &msg[..end]
}

/// 1-based line of the (possibly nested) key, searching each segment after the previous one.
fn key_line(text: &str, path: &str) -> Option<usize> {
    let mut from = 0;
    for key in path.split('.').filter(|k| !k.is_empty()) {
        let needle = format!("\"{key}\"");
        from += text[from..].find(&needle)?;
        from += needle.len();
    }
    (from > 0).then(|| text[..from].lines().count())
}
