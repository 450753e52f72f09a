//! System configuration: one JSON document, with `WACODIS_`-prefixed
//! environment variables overriding scalar fields.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::engine::RetryPolicy;
use crate::observer::CatalogSource;
use crate::runner::{InputSlot, ParameterSpec, ProcessDescription};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read config {path:?}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrokerConfig {
    #[serde(rename = "bufferSize")]
    pub buffer_size: usize,
    /// Chaos knob: deliver every message twice to exercise consumer
    /// idempotence. Off in normal operation.
    #[serde(rename = "duplicateDelivery", default)]
    pub duplicate_delivery: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            buffer_size: 1024,
            duplicate_delivery: false,
        }
    }
}

/// Bind addresses, one REST endpoint per service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServicesConfig {
    #[serde(rename = "jobManager")]
    pub job_manager: String,
    #[serde(rename = "dataWrapper")]
    pub data_wrapper: String,
    #[serde(rename = "coreEngine")]
    pub core_engine: String,
    #[serde(rename = "processRunner")]
    pub process_runner: String,
    pub observer: String,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        ServicesConfig {
            job_manager: "127.0.0.1:8081".into(),
            data_wrapper: "127.0.0.1:8082".into(),
            core_engine: "127.0.0.1:8083".into(),
            process_runner: "127.0.0.1:8084".into(),
            observer: "127.0.0.1:8085".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(rename = "executionTimeoutSeconds")]
    pub execution_timeout_seconds: u64,
    /// Required processing level per tool id, applied as a query constraint
    /// when resolving Copernicus inputs for that tool.
    #[serde(rename = "requiredProcessingLevels", default)]
    pub required_processing_levels: HashMap<String, String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            execution_timeout_seconds: 300,
            required_processing_levels: HashMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ImporterConfig {
    /// Writes products below a root directory (default `<dataDir>/products`).
    Filesystem { root: Option<PathBuf> },
    /// POSTs products to an external ingestion endpoint.
    Http { endpoint: String },
}

/// Declaration of an externally hosted tool wrapped by the runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalToolConfig {
    #[serde(rename = "processId")]
    pub process_id: String,
    #[serde(default)]
    pub title: String,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(rename = "inputSlots")]
    pub input_slots: Vec<InputSlot>,
    pub outputs: Vec<crate::runner::tools::ExternalOutput>,
}

impl ExternalToolConfig {
    pub fn description(&self) -> ProcessDescription {
        ProcessDescription {
            process_id: self.process_id.clone(),
            title: if self.title.is_empty() {
                self.process_id.clone()
            } else {
                self.title.clone()
            },
            input_slots: self.input_slots.clone(),
            output_slots: self
                .outputs
                .iter()
                .map(|o| crate::runner::OutputSlot::new(&o.identifier, &o.media_type))
                .collect(),
            parameters: Vec::<ParameterSpec>::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunnerConfig {
    pub parallelism: usize,
    #[serde(rename = "externalTools", default)]
    pub external_tools: Vec<ExternalToolConfig>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            parallelism: 2,
            external_tools: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Real,
    Simulated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockConfig {
    pub mode: ClockMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub start: Option<DateTime<Utc>>,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            mode: ClockMode::Real,
            start: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(rename = "dataDir", default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub broker: BrokerConfig,
    #[serde(default)]
    pub services: ServicesConfig,
    #[serde(default)]
    pub catalogs: Vec<CatalogSource>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_importers")]
    pub importers: Vec<ImporterConfig>,
    #[serde(default)]
    pub runner: RunnerConfig,
    #[serde(default)]
    pub clock: ClockConfig,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("wacodis-data")
}

fn default_importers() -> Vec<ImporterConfig> {
    vec![ImporterConfig::Filesystem { root: None }]
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            data_dir: default_data_dir(),
            broker: BrokerConfig::default(),
            services: ServicesConfig::default(),
            catalogs: Vec::new(),
            retry: RetryPolicy::default(),
            engine: EngineConfig::default(),
            importers: default_importers(),
            runner: RunnerConfig::default(),
            clock: ClockConfig::default(),
        }
    }
}

impl SystemConfig {
    pub fn defaults() -> Self {
        SystemConfig::default()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut config: SystemConfig =
            serde_json::from_str(&raw).map_err(|e| ConfigError::Unreadable {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        config.apply_env_overrides();
        Ok(config)
    }

    /// Applies `WACODIS_`-prefixed environment overrides to scalar fields.
    pub fn apply_env_overrides(&mut self) {
        fn env(name: &str) -> Option<String> {
            std::env::var(name).ok().filter(|v| !v.is_empty())
        }
        if let Some(v) = env("WACODIS_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = env("WACODIS_BROKER_BUFFER_SIZE").and_then(|v| v.parse().ok()) {
            self.broker.buffer_size = v;
        }
        if let Some(v) = env("WACODIS_BROKER_DUPLICATE_DELIVERY").and_then(|v| v.parse().ok()) {
            self.broker.duplicate_delivery = v;
        }
        if let Some(v) = env("WACODIS_JOB_MANAGER_ADDR") {
            self.services.job_manager = v;
        }
        if let Some(v) = env("WACODIS_DATA_WRAPPER_ADDR") {
            self.services.data_wrapper = v;
        }
        if let Some(v) = env("WACODIS_CORE_ENGINE_ADDR") {
            self.services.core_engine = v;
        }
        if let Some(v) = env("WACODIS_PROCESS_RUNNER_ADDR") {
            self.services.process_runner = v;
        }
        if let Some(v) = env("WACODIS_OBSERVER_ADDR") {
            self.services.observer = v;
        }
        if let Some(v) = env("WACODIS_RETRY_INTERVAL_SECONDS").and_then(|v| v.parse().ok()) {
            self.retry.interval_seconds = v;
        }
        if let Some(v) = env("WACODIS_RETRY_MAX_ATTEMPTS").and_then(|v| v.parse().ok()) {
            self.retry.max_attempts = v;
        }
        if let Some(v) = env("WACODIS_RUNNER_PARALLELISM").and_then(|v| v.parse().ok()) {
            self.runner.parallelism = v;
        }
        if let Some(v) = env("WACODIS_EXECUTION_TIMEOUT_SECONDS").and_then(|v| v.parse().ok()) {
            self.engine.execution_timeout_seconds = v;
        }
        if let Some(v) = env("WACODIS_CLOCK_MODE") {
            match v.as_str() {
                "real" => self.clock.mode = ClockMode::Real,
                "simulated" => self.clock.mode = ClockMode::Simulated,
                _ => {}
            }
        }
        if let Some(v) = env("WACODIS_CLOCK_START") {
            if let Ok(t) = DateTime::parse_from_rfc3339(&v) {
                self.clock.start = Some(t.with_timezone(&Utc));
            }
        }
    }

    /// Validates the configuration for the given set of enabled components.
    /// `listener_enabled` gates the at-least-one-importer rule.
    pub fn validate(&self, listener_enabled: bool) -> Result<(), ConfigError> {
        let addresses = [
            ("services.jobManager", &self.services.job_manager),
            ("services.dataWrapper", &self.services.data_wrapper),
            ("services.coreEngine", &self.services.core_engine),
            ("services.processRunner", &self.services.process_runner),
            ("services.observer", &self.services.observer),
        ];
        let mut seen_ports = HashMap::new();
        for (field, addr) in addresses {
            let socket: std::net::SocketAddr = addr
                .parse()
                .map_err(|e| invalid(field, format!("{addr:?} is not host:port ({e})")))?;
            // Port 0 asks the OS for an ephemeral port, so it cannot clash.
            if socket.port() == 0 {
                continue;
            }
            if let Some(previous) = seen_ports.insert(socket.port(), field) {
                return Err(invalid(
                    field,
                    format!("port {} already used by {previous}", socket.port()),
                ));
            }
        }

        if self.broker.buffer_size < 1 {
            return Err(invalid("broker.bufferSize", "must be >= 1"));
        }
        if self.retry.interval_seconds < 1 {
            return Err(invalid("retry.intervalSeconds", "must be >= 1"));
        }
        if self.retry.max_attempts < 1 {
            return Err(invalid("retry.maxAttempts", "must be >= 1"));
        }
        if self.runner.parallelism < 1 {
            return Err(invalid("runner.parallelism", "must be >= 1"));
        }
        for (i, source) in self.catalogs.iter().enumerate() {
            if source.poll_interval_seconds < 1 {
                return Err(invalid(
                    &format!("catalogs[{i}].pollIntervalSeconds"),
                    "must be >= 1",
                ));
            }
        }
        if listener_enabled && self.importers.is_empty() {
            return Err(invalid(
                "importers",
                "at least one importer is required when the product listener is enabled",
            ));
        }
        if self.clock.mode == ClockMode::Simulated && self.clock.start.is_none() {
            return Err(invalid("clock.start", "required when clock.mode is simulated"));
        }

        std::fs::create_dir_all(&self.data_dir).map_err(|e| {
            invalid(
                "dataDir",
                format!("cannot create {:?}: {e}", self.data_dir),
            )
        })?;
        Ok(())
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.data_dir.join("jobs")
    }
    pub fn executions_dir(&self) -> PathBuf {
        self.data_dir.join("executions")
    }
    pub fn envelope_ledger(&self) -> PathBuf {
        self.data_dir.join("envelopes.jsonl")
    }
    pub fn observer_ledger(&self) -> PathBuf {
        self.data_dir.join("observer_seen.json")
    }
    pub fn listener_ledger(&self) -> PathBuf {
        self.data_dir.join("listener_processed.json")
    }
    pub fn default_product_root(&self) -> PathBuf {
        self.data_dir.join("products")
    }
    pub fn runner_work_dir(&self) -> PathBuf {
        self.data_dir.join("runner").join("work")
    }
    pub fn runner_results_dir(&self) -> PathBuf {
        self.data_dir.join("runner").join("results")
    }
    pub fn event_log(&self) -> PathBuf {
        self.data_dir.join("events.jsonl")
    }
}
