//! Client contracts between components, with in-process and REST-backed
//! implementations.
//!
//! The core engine resolves inputs through a [`ResourceResolver`] and drives
//! tools through a [`ProcessClient`]; the product listener fetches results
//! through the same [`ProcessClient`]. Components co-located in one process
//! use the local variants, split deployments use the REST variants — the
//! calling code is identical either way.

use std::sync::Arc;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde_json::Value;
use uuid::Uuid;

use crate::model::{JobDefinition, ResourceReference, ValidationIssue};
use crate::observer::CatalogSource;
use crate::runner::{
    ExecuteRequest, ProcessDescription, ProcessExecutionRecord, ProcessRunner, RunnerError,
};
use crate::wrapper::{EnvelopeIndex, ResourceQuery};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("rejected ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("validation failed")]
    Validation(Vec<ValidationIssue>),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl From<reqwest::Error> for ClientError {
    fn from(err: reqwest::Error) -> Self {
        ClientError::Unreachable(err.to_string())
    }
}

// ---------------------------------------------------------------------------
// Resource resolution (data wrapper)
// ---------------------------------------------------------------------------

#[async_trait]
pub trait ResourceResolver: Send + Sync {
    async fn query(&self, query: &ResourceQuery) -> Result<Vec<ResourceReference>, ClientError>;
}

/// Direct handle onto a co-located envelope index.
pub struct LocalResolver(pub Arc<EnvelopeIndex>);

#[async_trait]
impl ResourceResolver for LocalResolver {
    async fn query(&self, query: &ResourceQuery) -> Result<Vec<ResourceReference>, ClientError> {
        Ok(self.0.query(query))
    }
}

/// Talks to a remote data wrapper over `POST /resources/query`.
pub struct RestResolver {
    base_url: String,
    http: reqwest::Client,
}

impl RestResolver {
    pub fn new(base_url: String) -> Self {
        RestResolver {
            base_url: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl ResourceResolver for RestResolver {
    async fn query(&self, query: &ResourceQuery) -> Result<Vec<ResourceReference>, ClientError> {
        let response = self
            .http
            .post(format!("{}/resources/query", self.base_url))
            .json(query)
            .send()
            .await?;
        if !response.status().is_success() {
            return Err(ClientError::Rejected {
                status: response.status().as_u16(),
                message: response.text().await.unwrap_or_default(),
            });
        }
        Ok(response.json().await?)
    }
}

// ---------------------------------------------------------------------------
// Process execution (runner)
// ---------------------------------------------------------------------------

#[async_trait]
pub trait ProcessClient: Send + Sync {
    async fn list_processes(&self) -> Result<Vec<ProcessDescription>, ClientError>;
    async fn describe_process(&self, process_id: &str) -> Result<ProcessDescription, ClientError>;
    async fn execute(
        &self,
        process_id: &str,
        request: &ExecuteRequest,
    ) -> Result<Uuid, ClientError>;
    async fn status(&self, execution_id: Uuid) -> Result<ProcessExecutionRecord, ClientError>;
    async fn result(
        &self,
        execution_id: Uuid,
        output: &str,
    ) -> Result<(Vec<u8>, String), ClientError>;
}

fn runner_error_to_client(err: RunnerError) -> ClientError {
    match err {
        RunnerError::UnknownProcess(_)
        | RunnerError::UnknownExecution(_)
        | RunnerError::UnknownOutput(_) => ClientError::NotFound(err.to_string()),
        RunnerError::NotReady(_) => ClientError::Rejected {
            status: 409,
            message: err.to_string(),
        },
        other => ClientError::Rejected {
            status: 422,
            message: other.to_string(),
        },
    }
}

/// Direct handle onto a co-located process runner. Requests still travel in
/// serialized wire form so the uniform contract (and its audit trail) holds.
pub struct LocalProcessClient(pub Arc<ProcessRunner>);

#[async_trait]
impl ProcessClient for LocalProcessClient {
    async fn list_processes(&self) -> Result<Vec<ProcessDescription>, ClientError> {
        Ok(self.0.list_processes())
    }

    async fn describe_process(&self, process_id: &str) -> Result<ProcessDescription, ClientError> {
        self.0.describe_process(process_id).map_err(runner_error_to_client)
    }

    async fn execute(
        &self,
        process_id: &str,
        request: &ExecuteRequest,
    ) -> Result<Uuid, ClientError> {
        let body = serde_json::to_string(request).expect("request serializes");
        self.0
            .execute_raw(process_id, &body)
            .map_err(runner_error_to_client)
    }

    async fn status(&self, execution_id: Uuid) -> Result<ProcessExecutionRecord, ClientError> {
        self.0.get_status(execution_id).map_err(runner_error_to_client)
    }

    async fn result(
        &self,
        execution_id: Uuid,
        output: &str,
    ) -> Result<(Vec<u8>, String), ClientError> {
        self.0
            .get_result(execution_id, output)
            .map_err(runner_error_to_client)
    }
}

/// Talks to a remote process runner over its REST surface.
pub struct RestProcessClient {
    base_url: String,
    http: reqwest::Client,
}

impl RestProcessClient {
    pub fn new(base_url: String) -> Self {
        RestProcessClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn check(response: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let message = response.text().await.unwrap_or_default();
        if status == StatusCode::NOT_FOUND {
            Err(ClientError::NotFound(message))
        } else {
            Err(ClientError::Rejected {
                status: status.as_u16(),
                message,
            })
        }
    }
}

#[async_trait]
impl ProcessClient for RestProcessClient {
    async fn list_processes(&self) -> Result<Vec<ProcessDescription>, ClientError> {
        let response = self.http.get(format!("{}/processes", self.base_url)).send().await?;
        Ok(Self::check(response).await?.json().await?)
    }

    async fn describe_process(&self, process_id: &str) -> Result<ProcessDescription, ClientError> {
        let response = self
            .http
            .get(format!("{}/processes/{process_id}", self.base_url))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    async fn execute(
        &self,
        process_id: &str,
        request: &ExecuteRequest,
    ) -> Result<Uuid, ClientError> {
        let body = serde_json::to_string(request).expect("request serializes");
        let response = self
            .http
            .post(format!("{}/processes/{process_id}/execution", self.base_url))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await?;
        let value: Value = Self::check(response).await?.json().await?;
        value["executionId"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ClientError::Protocol("missing executionId".into()))
    }

    async fn status(&self, execution_id: Uuid) -> Result<ProcessExecutionRecord, ClientError> {
        let response = self
            .http
            .get(format!("{}/executions/{execution_id}", self.base_url))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    async fn result(
        &self,
        execution_id: Uuid,
        output: &str,
    ) -> Result<(Vec<u8>, String), ClientError> {
        let response = self
            .http
            .get(format!(
                "{}/executions/{execution_id}/results/{output}",
                self.base_url
            ))
            .send()
            .await?;
        let response = Self::check(response).await?;
        let media_type = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        Ok((response.bytes().await?.to_vec(), media_type))
    }
}

// ---------------------------------------------------------------------------
// Operator client (CLI)
// ---------------------------------------------------------------------------

/// Addresses of the REST services one operator client talks to.
#[derive(Debug, Clone)]
pub struct ServiceEndpoints {
    pub job_manager: String,
    pub core_engine: String,
    pub observer: String,
}

/// Thin REST client behind the operator commands.
pub struct ApiClient {
    endpoints: ServiceEndpoints,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(endpoints: ServiceEndpoints) -> Self {
        ApiClient {
            endpoints,
            http: reqwest::Client::new(),
        }
    }

    async fn check(response: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let body: Value = response.json().await.unwrap_or(Value::Null);
        if status == StatusCode::UNPROCESSABLE_ENTITY {
            if let Ok(issues) =
                serde_json::from_value::<Vec<ValidationIssue>>(body["errors"].clone())
            {
                return Err(ClientError::Validation(issues));
            }
        }
        let message = body["error"]
            .as_str()
            .map(str::to_string)
            .unwrap_or_else(|| body.to_string());
        if status == StatusCode::NOT_FOUND {
            Err(ClientError::NotFound(message))
        } else {
            Err(ClientError::Rejected {
                status: status.as_u16(),
                message,
            })
        }
    }

    pub async fn submit_job(&self, doc: &Value) -> Result<JobDefinition, ClientError> {
        let response = self
            .http
            .post(format!("{}/jobs", self.endpoints.job_manager))
            .json(doc)
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn list_jobs(&self) -> Result<Vec<JobDefinition>, ClientError> {
        let response = self
            .http
            .get(format!("{}/jobs", self.endpoints.job_manager))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn job_status(&self, id: Uuid) -> Result<JobDefinition, ClientError> {
        let response = self
            .http
            .get(format!("{}/jobs/{id}", self.endpoints.job_manager))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn delete_job(&self, id: Uuid) -> Result<(), ClientError> {
        let response = self
            .http
            .delete(format!("{}/jobs/{id}", self.endpoints.job_manager))
            .send()
            .await?;
        Self::check(response).await?;
        Ok(())
    }

    pub async fn trigger(&self, id: Uuid) -> Result<Value, ClientError> {
        let response = self
            .http
            .post(format!("{}/jobs/{id}/trigger", self.endpoints.core_engine))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn executions(&self, id: Uuid) -> Result<Value, ClientError> {
        let response = self
            .http
            .get(format!("{}/jobs/{id}/executions", self.endpoints.core_engine))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn register_catalog(
        &self,
        location: &str,
        poll_interval_seconds: Option<u64>,
    ) -> Result<CatalogSource, ClientError> {
        let response = self
            .http
            .post(format!("{}/catalogs", self.endpoints.observer))
            .json(&serde_json::json!({
                "location": location,
                "pollIntervalSeconds": poll_interval_seconds,
            }))
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }
}
