use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// `line` is 1-based and counts the header when present.
    #[error("{path}, line {line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },

    #[error("{0}")]
    Core(#[from] sckpd::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Fit(String),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Csv { .. } => "csv",
            Self::Core(_) => "numerical",
            Self::Json(_) => "json",
            Self::Fit(_) => "fit",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Machine-readable form printed by the CLI on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            line: Option<u64>,
        }
        let line = match self {
            Self::Csv { line, .. } => Some(*line),
            _ => None,
        };
        serde_json::to_string(&Out { error: self.kind(), message: self.to_string(), line })
            .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
