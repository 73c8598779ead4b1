use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error{}: {message}", key.as_deref().map(|k| format!(" at {k}")).unwrap_or_default())]
    Config { key: Option<String>, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Core(#[from] klprior::Error),

    #[error(transparent)]
    Train(#[from] klprior::actorcritic::TrainError),
}

impl CliError {
    pub fn config(key: Option<&str>, message: String) -> Self {
        CliError::Config {
            key: key.map(str::to_string),
            message,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Section validators report `section.field ...`; lift the key out.
    pub fn from_section(e: klprior::Error) -> Self {
        let message = e.to_string();
        let key = message
            .trim_start_matches("domain error: ")
            .split_whitespace()
            .next()
            .filter(|w| w.contains('.'))
            .map(str::to_string);
        CliError::Config { key, message }
    }

    pub fn key(&self) -> Option<&str> {
        match self {
            CliError::Config { key, .. } => key.as_deref(),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Missing(_) => "missing-input",
            CliError::Core(e) => e.kind(),
            CliError::Train(e) => e.source.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let Some(k) = self.key() {
            v["error"]["key"] = json!(k);
        }
        if let CliError::Train(t) = self {
            v["error"]["epoch"] = json!(t.epoch);
        }
        v.to_string()
    }
}
