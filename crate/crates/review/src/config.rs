//! Service configuration: a TOML file with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ReviewError;

pub const ENV_BIND: &str = "IMPRESS_BIND";
pub const ENV_DATA_DIR: &str = "IMPRESS_DATA_DIR";
pub const ENV_TOKEN: &str = "IMPRESS_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub key: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
}

impl Dimension {
    fn new(key: &str, label: &str, description: &str) -> Self {
        Dimension {
            key: key.into(),
            label: label.into(),
            description: description.into(),
        }
    }
}

/// Default quality dimensions, each scored 1 to 3. Definitions are
/// editable in the config file.
pub fn default_dimensions() -> Vec<Dimension> {
    vec![
        Dimension::new("completeness", "Completeness", "All salient findings are summarized."),
        Dimension::new("factual_correctness", "Factual correctness", "Statements agree with the findings."),
        Dimension::new(
            "jargon",
            "Interpretive and technical jargon",
            "Terminology and interpretation are appropriate.",
        ),
        Dimension::new("recommendations", "Recommendations", "Follow-up advice is suitable."),
        Dimension::new("additions", "Additions", "Nothing unsupported by the findings is added."),
        Dimension::new(
            "clarity_organization",
            "Clarity and organization",
            "The summary reads clearly and in a sensible order.",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Shared bearer token; when set every `/api` route requires it.
    pub token: Option<String>,
    pub n_own: usize,
    pub n_other: usize,
    pub dimensions: Vec<Dimension>,
    /// Bootstrap trials for export summaries.
    pub bootstrap_trials: usize,
    pub bootstrap_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("review-data"),
            token: None,
            n_own: 12,
            n_other: 12,
            dimensions: default_dimensions(),
            bootstrap_trials: 10_000,
            bootstrap_seed: 0,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (if given), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ReviewError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ReviewError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ReviewError::Config(format!("{}: {e}", p.display())))?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_TOKEN) {
            self.token = (!v.is_empty()).then_some(v);
        }
    }

    pub fn validate(&self) -> Result<(), ReviewError> {
        if self.dimensions.is_empty() {
            return Err(ReviewError::Config("at least one quality dimension is required".into()));
        }
        let mut keys: Vec<&str> = self.dimensions.iter().map(|d| d.key.as_str()).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(ReviewError::Config("duplicate dimension key".into()));
        }
        if self.n_own + self.n_other == 0 {
            return Err(ReviewError::Config("sessions need at least one case".into()));
        }
        if self.bootstrap_trials == 0 {
            return Err(ReviewError::Config("bootstrap_trials must be positive".into()));
        }
        Ok(())
    }

    pub fn db_path(&self) -> PathBuf {
        self.data_dir.join("review.sqlite3")
    }
}
