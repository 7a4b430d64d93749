//! Settings resolution: flags > environment > config file > defaults.

use std::path::Path;

use anyhow::{Context, Result};
use dmgen_core::batch::BatchConfig;
use dmgen_core::client::{CostRates, ModelConfig, RetryPolicy};
use dmgen_core::session::SessionConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub max_rounds: u32,
    pub same_problem_threshold: f64,
    pub max_protocol_violations: u32,
}

impl Default for SessionSection {
    fn default() -> Self {
        let d = SessionConfig::default();
        Self {
            max_rounds: d.max_rounds,
            same_problem_threshold: d.same_problem_threshold,
            max_protocol_violations: d.max_protocol_violations,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    /// Shared by generator and evaluator calls. Unset means no limit.
    pub requests_per_minute: Option<u32>,
}

/// The config file, and also the fully resolved settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub session: SessionSection,
    pub generator: ModelConfig,
    pub evaluator: ModelConfig,
    pub retry: RetryPolicy,
    pub batch: BatchConfig,
    pub client: ClientSection,
    pub cost: CostRates,
}

/// Values that may come from flags or the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub endpoint: Option<String>,
    pub generator_model: Option<String>,
    pub evaluator_model: Option<String>,
    pub per_direction: Option<u32>,
    pub max_parallel: Option<u32>,
    pub requests_per_minute: Option<u32>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(endpoint) = &o.endpoint {
            self.generator.endpoint = endpoint.clone();
            self.evaluator.endpoint = endpoint.clone();
        }
        if let Some(m) = &o.generator_model {
            self.generator.model_id = m.clone();
        }
        if let Some(m) = &o.evaluator_model {
            self.evaluator.model_id = m.clone();
        }
        if let Some(k) = o.per_direction {
            self.batch.problems_per_direction = k;
        }
        if let Some(p) = o.max_parallel {
            self.batch.max_parallel_sessions = p;
        }
        if o.requests_per_minute.is_some() {
            self.client.requests_per_minute = o.requests_per_minute;
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            max_rounds: self.session.max_rounds,
            same_problem_threshold: self.session.same_problem_threshold,
            max_protocol_violations: self.session.max_protocol_violations,
            generator_model: self.generator.clone(),
            evaluator_model: self.evaluator.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.session_config().validate()?;
        self.batch.validate()?;
        self.retry.validate()?;
        if self.client.requests_per_minute == Some(0) {
            return Err("requests_per_minute must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize to TOML")
    }
}
