//! Resolved run configuration shared by every command.

use serde::{Deserialize, Serialize};

use crate::cot::{QualityThresholds, RemoteConfig};
use crate::error::{Error, Result};
use crate::latency::{ArrivalModel, DecodeModel};
use crate::model::{ModelConfig, SamplerConfig};

pub const EMBED_URL_ENV: &str = "STREAMTHINK_EMBED_URL";
pub const GENERATE_URL_ENV: &str = "STREAMTHINK_GENERATE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub arrival: ArrivalModel,
    pub decode: DecodeModel,
    pub thresholds: QualityThresholds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_endpoint: Option<RemoteConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate_endpoint: Option<RemoteConfig>,
    /// Upper bound on concurrent provider calls.
    pub max_concurrency: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            arrival: ArrivalModel::default(),
            decode: DecodeModel::new(30.0),
            thresholds: QualityThresholds::default(),
            embed_endpoint: None,
            generate_endpoint: None,
            max_concurrency: 4,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Fills unset endpoints from the environment.
    pub fn with_env(mut self) -> Self {
        let from_env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty()).map(RemoteConfig::new);
        if self.embed_endpoint.is_none() {
            self.embed_endpoint = from_env(EMBED_URL_ENV);
        }
        if self.generate_endpoint.is_none() {
            self.generate_endpoint = from_env(GENERATE_URL_ENV);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.arrival.validate()?;
        self.decode.validate()?;
        self.thresholds.validate()?;
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = SessionConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(SessionConfig::from_json(&text).unwrap(), c);
        assert_eq!(SessionConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(SessionConfig::from_json(r#"{"max_concurrency": 0}"#).is_err());
        assert!(SessionConfig::from_json(r#"{"thresholds": {"consistency_min": 2.0}}"#).is_err());
    }
}
