//! Server settings: defaults, an optional `key = value` file, then
//! environment variables and command-line flags (highest precedence).

use std::path::{Path, PathBuf};

use pilesort_core::features::ExtractorSpec;
use pilesort_core::fewshot::DEFAULT_THRESHOLD;
use serde::Deserialize;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    /// Relation model loaded at startup as the server default.
    pub model: Option<PathBuf>,
    pub threshold: f64,
    pub seed: u64,
    pub extractor: ExtractorSpec,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("pilesort-data"),
            model: None,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            extractor: ExtractorSpec::default(),
        }
    }
}

/// Every setting optional; used for the config file and for flag/env overrides.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub extractor: Option<String>,
}

impl PartialConfig {
    /// Parses a TOML-style file of `key = value` lines.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            host: over.host.or(self.host),
            port: over.port.or(self.port),
            data_dir: over.data_dir.or(self.data_dir),
            model: over.model.or(self.model),
            threshold: over.threshold.or(self.threshold),
            seed: over.seed.or(self.seed),
            extractor: over.extractor.or(self.extractor),
        }
    }

    pub fn resolve(self) -> Result<ServiceConfig> {
        let d = ServiceConfig::default();
        let threshold = self.threshold.unwrap_or(d.threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ServiceError::Config("threshold must lie strictly between 0 and 1".into()));
        }
        let extractor = match self.extractor {
            Some(e) => e.parse().map_err(|e: pilesort_core::Error| ServiceError::Config(e.to_string()))?,
            None => d.extractor,
        };
        Ok(ServiceConfig {
            host: self.host.unwrap_or(d.host),
            port: self.port.unwrap_or(d.port),
            data_dir: self.data_dir.unwrap_or(d.data_dir),
            model: self.model.or(d.model),
            threshold,
            seed: self.seed.unwrap_or(d.seed),
            extractor,
        })
    }
}
