//! Uniform processing facade: describes registered tools, executes them
//! asynchronously on resolved references and serves their results.
//!
//! Clients never ship payload bytes; execute requests carry references (or
//! small literals) which the runner fetches into an isolated working
//! directory before invoking the tool adapter. Every tool — built-in,
//! registered at runtime, or an external command — runs through the same
//! describe/execute/status/result flow.

pub mod raster;
pub mod tools;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as AxumPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;
use url::Url;
use uuid::Uuid;

use crate::clock::Clock;
use crate::model::{ts_millis, ts_millis_opt, ResourceReference};
use tools::{ToolAdapter, ToolContext};

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("unknown process {0:?}")]
    UnknownProcess(String),
    #[error("process {0:?} already registered")]
    DuplicateProcess(String),
    #[error("missing input for required slot {0:?}")]
    MissingInput(String),
    #[error("input slot {0:?} is not declared by the process")]
    UnknownInput(String),
    #[error("malformed execute request: {0}")]
    BadRequest(String),
    #[error("unknown execution {0}")]
    UnknownExecution(Uuid),
    #[error("execution {0} has no results yet")]
    NotReady(Uuid),
    #[error("unknown output {0:?}")]
    UnknownOutput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSlot {
    pub identifier: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
    #[serde(rename = "minOccurs")]
    pub min_occurs: u32,
    #[serde(rename = "maxOccurs")]
    pub max_occurs: u32,
}

impl InputSlot {
    pub fn required(identifier: &str, media_type: &str) -> Self {
        InputSlot {
            identifier: identifier.to_string(),
            media_type: media_type.to_string(),
            min_occurs: 1,
            max_occurs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSlot {
    pub identifier: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
}

impl OutputSlot {
    pub fn new(identifier: &str, media_type: &str) -> Self {
        OutputSlot {
            identifier: identifier.to_string(),
            media_type: media_type.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub default: Value,
}

impl ParameterSpec {
    pub fn number(name: &str, default: f64) -> Self {
        ParameterSpec {
            name: name.to_string(),
            kind: "number".to_string(),
            default: serde_json::json!(default),
        }
    }
}

/// Description of one registered process: its identifier, input and output
/// slots and tunable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessDescription {
    #[serde(rename = "processId")]
    pub process_id: String,
    pub title: String,
    #[serde(rename = "inputSlots")]
    pub input_slots: Vec<InputSlot>,
    #[serde(rename = "outputSlots")]
    pub output_slots: Vec<OutputSlot>,
    pub parameters: Vec<ParameterSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcessStatus {
    Accepted,
    Running,
    Succeeded,
    Failed,
}

/// One input binding: either a fetchable reference or a small literal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputBinding {
    #[serde(rename = "reference")]
    Reference(ResourceReference),
    #[serde(rename = "literal")]
    Literal(Value),
}

/// Wire body of an execute request. Payload bytes never appear here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecuteRequest {
    #[serde(default)]
    pub inputs: BTreeMap<String, Vec<InputBinding>>,
    #[serde(default)]
    pub parameters: BTreeMap<String, Value>,
}

/// Asynchronous execution record of one tool run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessExecutionRecord {
    #[serde(rename = "executionId")]
    pub execution_id: Uuid,
    #[serde(rename = "processId")]
    pub process_id: String,
    pub status: ProcessStatus,
    pub inputs: BTreeMap<String, Vec<InputBinding>>,
    pub results: BTreeMap<String, ResourceReference>,
    #[serde(rename = "startedAt", with = "ts_millis")]
    pub started_at: DateTime<Utc>,
    #[serde(rename = "finishedAt", with = "ts_millis_opt", default)]
    pub finished_at: Option<DateTime<Utc>>,
    pub message: String,
}

struct RunnerState {
    registry: BTreeMap<String, Arc<dyn ToolAdapter>>,
    executions: HashMap<Uuid, ProcessExecutionRecord>,
}

/// The process-runner service. Executions run concurrently up to the
/// configured parallelism limit; each execution's lifecycle is sequential.
pub struct ProcessRunner {
    state: Mutex<RunnerState>,
    work_root: PathBuf,
    results_root: PathBuf,
    permits: Arc<Semaphore>,
    clock: Clock,
    recorded_requests: Mutex<Vec<String>>,
    base_url: Mutex<Option<String>>,
    http: reqwest::Client,
    retain_failed_logs: bool,
}

impl ProcessRunner {
    pub fn new(
        work_root: PathBuf,
        results_root: PathBuf,
        parallelism: usize,
        clock: Clock,
    ) -> Result<Arc<Self>, RunnerError> {
        std::fs::create_dir_all(&work_root)?;
        std::fs::create_dir_all(&results_root)?;
        Ok(Arc::new(ProcessRunner {
            state: Mutex::new(RunnerState {
                registry: BTreeMap::new(),
                executions: HashMap::new(),
            }),
            work_root,
            results_root,
            permits: Arc::new(Semaphore::new(parallelism.max(1))),
            clock,
            recorded_requests: Mutex::new(Vec::new()),
            base_url: Mutex::new(None),
            http: reqwest::Client::new(),
            retain_failed_logs: true,
        }))
    }

    /// Registers the two built-in demo tools.
    pub fn register_builtin_tools(self: &Arc<Self>) -> Result<(), RunnerError> {
        self.register(Arc::new(tools::LandCoverClassificationTool))?;
        self.register(Arc::new(tools::NdviTool))?;
        Ok(())
    }

    /// Adds a tool adapter to the registry. Adding a tool requires no change
    /// anywhere else; it becomes executable through the standard flow.
    pub fn register(self: &Arc<Self>, tool: Arc<dyn ToolAdapter>) -> Result<(), RunnerError> {
        let description = tool.description();
        let mut state = self.state.lock().expect("runner poisoned");
        if state.registry.contains_key(&description.process_id) {
            return Err(RunnerError::DuplicateProcess(description.process_id));
        }
        state.registry.insert(description.process_id.clone(), tool);
        Ok(())
    }

    pub fn set_base_url(&self, base: String) {
        *self.base_url.lock().expect("runner poisoned") = Some(base);
    }

    pub fn list_processes(&self) -> Vec<ProcessDescription> {
        let state = self.state.lock().expect("runner poisoned");
        state.registry.values().map(|t| t.description()).collect()
    }

    pub fn describe_process(&self, id: &str) -> Result<ProcessDescription, RunnerError> {
        let state = self.state.lock().expect("runner poisoned");
        state
            .registry
            .get(id)
            .map(|t| t.description())
            .ok_or_else(|| RunnerError::UnknownProcess(id.to_string()))
    }

    /// Raw execute request bodies seen so far, in order. Used to audit the
    /// reference-passing contract.
    pub fn recorded_requests(&self) -> Vec<String> {
        self.recorded_requests.lock().expect("runner poisoned").clone()
    }

    /// Accepts an execute request in wire form and returns the execution id
    /// immediately; fetching, tool invocation and result storage proceed
    /// asynchronously.
    pub fn execute_raw(self: &Arc<Self>, process_id: &str, body: &str) -> Result<Uuid, RunnerError> {
        self.recorded_requests
            .lock()
            .expect("runner poisoned")
            .push(body.to_string());

        let request: ExecuteRequest =
            serde_json::from_str(body).map_err(|e| RunnerError::BadRequest(e.to_string()))?;

        let (tool, description) = {
            let state = self.state.lock().expect("runner poisoned");
            let tool = state
                .registry
                .get(process_id)
                .cloned()
                .ok_or_else(|| RunnerError::UnknownProcess(process_id.to_string()))?;
            (tool.clone(), tool.description())
        };

        for slot in &description.input_slots {
            let bound = request.inputs.get(&slot.identifier).map_or(0, Vec::len);
            if bound < slot.min_occurs as usize {
                return Err(RunnerError::MissingInput(slot.identifier.clone()));
            }
        }
        for slot in request.inputs.keys() {
            if !description.input_slots.iter().any(|s| &s.identifier == slot) {
                return Err(RunnerError::UnknownInput(slot.clone()));
            }
        }

        let execution_id = Uuid::new_v4();
        let record = ProcessExecutionRecord {
            execution_id,
            process_id: process_id.to_string(),
            status: ProcessStatus::Accepted,
            inputs: request.inputs.clone(),
            results: BTreeMap::new(),
            started_at: self.clock.now(),
            finished_at: None,
            message: "accepted".to_string(),
        };
        self.state
            .lock()
            .expect("runner poisoned")
            .executions
            .insert(execution_id, record);

        let runner = Arc::clone(self);
        tokio::spawn(async move {
            runner.run_execution(execution_id, tool, request).await;
        });
        Ok(execution_id)
    }

    /// Typed convenience wrapper over [`ProcessRunner::execute_raw`].
    pub fn execute(
        self: &Arc<Self>,
        process_id: &str,
        request: &ExecuteRequest,
    ) -> Result<Uuid, RunnerError> {
        let body = serde_json::to_string(request).expect("request serializes");
        self.execute_raw(process_id, &body)
    }

    pub fn get_status(&self, execution_id: Uuid) -> Result<ProcessExecutionRecord, RunnerError> {
        let state = self.state.lock().expect("runner poisoned");
        state
            .executions
            .get(&execution_id)
            .cloned()
            .ok_or(RunnerError::UnknownExecution(execution_id))
    }

    /// Serves the stored bytes of one output of a succeeded execution.
    pub fn get_result(
        &self,
        execution_id: Uuid,
        output: &str,
    ) -> Result<(Vec<u8>, String), RunnerError> {
        let record = self.get_status(execution_id)?;
        if record.status != ProcessStatus::Succeeded {
            return Err(RunnerError::NotReady(execution_id));
        }
        let reference = record
            .results
            .get(output)
            .ok_or_else(|| RunnerError::UnknownOutput(output.to_string()))?;
        let path = self.results_root.join(execution_id.to_string()).join(output);
        let bytes = std::fs::read(path)?;
        Ok((bytes, reference.media_type.clone()))
    }

    fn update_record(
        &self,
        execution_id: Uuid,
        update: impl FnOnce(&mut ProcessExecutionRecord),
    ) {
        let mut state = self.state.lock().expect("runner poisoned");
        if let Some(record) = state.executions.get_mut(&execution_id) {
            update(record);
        }
    }

    async fn run_execution(
        self: Arc<Self>,
        execution_id: Uuid,
        tool: Arc<dyn ToolAdapter>,
        request: ExecuteRequest,
    ) {
        let _permit = self
            .permits
            .clone()
            .acquire_owned()
            .await
            .expect("semaphore never closed");

        self.update_record(execution_id, |r| {
            r.status = ProcessStatus::Running;
            r.message = "running".to_string();
        });

        let workdir = self.work_root.join(execution_id.to_string());
        let outcome = self.run_in_workdir(execution_id, &workdir, tool, &request).await;

        match outcome {
            Ok(results) => {
                let _ = std::fs::remove_dir_all(&workdir);
                let finished = self.clock.now();
                self.update_record(execution_id, |r| {
                    r.status = ProcessStatus::Succeeded;
                    r.results = results;
                    r.finished_at = Some(finished);
                    r.message = "succeeded".to_string();
                });
            }
            Err(message) => {
                cleanup_failed_workdir(&workdir, self.retain_failed_logs);
                let _ = std::fs::remove_dir_all(self.results_root.join(execution_id.to_string()));
                let finished = self.clock.now();
                self.update_record(execution_id, |r| {
                    r.status = ProcessStatus::Failed;
                    r.finished_at = Some(finished);
                    r.message = message;
                });
            }
        }
    }

    async fn run_in_workdir(
        &self,
        execution_id: Uuid,
        workdir: &std::path::Path,
        tool: Arc<dyn ToolAdapter>,
        request: &ExecuteRequest,
    ) -> Result<BTreeMap<String, ResourceReference>, String> {
        std::fs::create_dir_all(workdir).map_err(|e| format!("workdir: {e}"))?;
        let mut log = vec![format!("execution {execution_id} starting")];

        let mut inputs: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        for (slot, bindings) in &request.inputs {
            for (i, binding) in bindings.iter().enumerate() {
                let file_name = if i == 0 {
                    slot.clone()
                } else {
                    format!("{slot}_{i}")
                };
                let dest = workdir.join(&file_name);
                match binding {
                    InputBinding::Reference(reference) => {
                        log.push(format!("fetch {slot} <- {}", reference.url));
                        self.fetch_reference(&reference.url, &dest)
                            .await
                            .map_err(|e| {
                                write_log(workdir, &log);
                                format!("FetchFailed({}): {e}", reference.url)
                            })?;
                    }
                    InputBinding::Literal(value) => {
                        let text = match value {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        };
                        std::fs::write(&dest, text).map_err(|e| format!("literal {slot}: {e}"))?;
                    }
                }
                inputs.entry(slot.clone()).or_default().push(dest);
            }
        }
        write_log(workdir, &log);

        let ctx = ToolContext {
            workdir: workdir.to_path_buf(),
            inputs,
            parameters: request.parameters.clone(),
        };
        let outputs = tokio::task::spawn_blocking(move || tool.run(&ctx))
            .await
            .map_err(|e| format!("tool panicked: {e}"))?
            .map_err(|e| format!("ToolFailed: {e}"))?;

        let result_dir = self.results_root.join(execution_id.to_string());
        std::fs::create_dir_all(&result_dir).map_err(|e| format!("results dir: {e}"))?;
        let mut results = BTreeMap::new();
        let finished = self.clock.now();
        for output in outputs {
            let stored = result_dir.join(&output.identifier);
            std::fs::copy(&output.path, &stored).map_err(|e| format!("store output: {e}"))?;
            let url = match self.base_url.lock().expect("runner poisoned").as_ref() {
                Some(base) => format!("{base}/executions/{execution_id}/results/{}", output.identifier),
                None => Url::from_file_path(&stored)
                    .expect("absolute path")
                    .to_string(),
            };
            results.insert(
                output.identifier.clone(),
                ResourceReference {
                    input_identifier: output.identifier.clone(),
                    url,
                    media_type: output.media_type.clone(),
                    sensing_time: finished,
                },
            );
        }
        Ok(results)
    }

    async fn fetch_reference(&self, raw_url: &str, dest: &std::path::Path) -> Result<(), String> {
        let url = Url::parse(raw_url).map_err(|e| format!("bad url: {e}"))?;
        match url.scheme() {
            "file" => {
                let path = url
                    .to_file_path()
                    .map_err(|_| "not a local file path".to_string())?;
                std::fs::copy(&path, dest).map_err(|e| e.to_string())?;
                Ok(())
            }
            "http" | "https" => {
                let response = self
                    .http
                    .get(url)
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                if !response.status().is_success() {
                    return Err(format!("status {}", response.status()));
                }
                let bytes = response.bytes().await.map_err(|e| e.to_string())?;
                std::fs::write(dest, &bytes).map_err(|e| e.to_string())?;
                Ok(())
            }
            other => Err(format!("unsupported scheme {other:?}")),
        }
    }
}

fn write_log(workdir: &std::path::Path, lines: &[String]) {
    let _ = std::fs::write(workdir.join("run.log"), lines.join("\n") + "\n");
}

fn cleanup_failed_workdir(workdir: &std::path::Path, retain_log: bool) {
    let Ok(entries) = std::fs::read_dir(workdir) else {
        return;
    };
    for entry in entries.flatten() {
        if retain_log && entry.file_name() == "run.log" {
            continue;
        }
        let path = entry.path();
        if path.is_dir() {
            let _ = std::fs::remove_dir_all(&path);
        } else {
            let _ = std::fs::remove_file(&path);
        }
    }
    if !retain_log {
        let _ = std::fs::remove_dir_all(workdir);
    }
}

// ---------------------------------------------------------------------------
// REST surface
// ---------------------------------------------------------------------------

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

fn runner_error_response(err: RunnerError) -> Response {
    let status = match &err {
        RunnerError::UnknownProcess(_)
        | RunnerError::UnknownExecution(_)
        | RunnerError::UnknownOutput(_) => StatusCode::NOT_FOUND,
        RunnerError::NotReady(_) => StatusCode::CONFLICT,
        RunnerError::MissingInput(_)
        | RunnerError::UnknownInput(_)
        | RunnerError::BadRequest(_)
        | RunnerError::DuplicateProcess(_) => StatusCode::UNPROCESSABLE_ENTITY,
        RunnerError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, err.to_string())
}

pub fn router(runner: Arc<ProcessRunner>) -> Router {
    Router::new()
        .route("/processes", get(list_handler))
        .route("/processes/{id}", get(describe_handler))
        .route("/processes/{id}/execution", post(execute_handler))
        .route("/executions/{id}", get(status_handler))
        .route("/executions/{id}/results/{output}", get(result_handler))
        .with_state(runner)
}

async fn list_handler(State(runner): State<Arc<ProcessRunner>>) -> Json<Vec<ProcessDescription>> {
    Json(runner.list_processes())
}

async fn describe_handler(
    State(runner): State<Arc<ProcessRunner>>,
    AxumPath(id): AxumPath<String>,
) -> Response {
    match runner.describe_process(&id) {
        Ok(description) => Json(description).into_response(),
        Err(err) => runner_error_response(err),
    }
}

async fn execute_handler(
    State(runner): State<Arc<ProcessRunner>>,
    AxumPath(id): AxumPath<String>,
    body: String,
) -> Response {
    match runner.execute_raw(&id, &body) {
        Ok(execution_id) => (
            StatusCode::CREATED,
            [(header::LOCATION, format!("/executions/{execution_id}"))],
            Json(serde_json::json!({ "executionId": execution_id })),
        )
            .into_response(),
        Err(err) => runner_error_response(err),
    }
}

async fn status_handler(
    State(runner): State<Arc<ProcessRunner>>,
    AxumPath(id): AxumPath<Uuid>,
) -> Response {
    match runner.get_status(id) {
        Ok(record) => Json(record).into_response(),
        Err(err) => runner_error_response(err),
    }
}

async fn result_handler(
    State(runner): State<Arc<ProcessRunner>>,
    AxumPath((id, output)): AxumPath<(Uuid, String)>,
) -> Response {
    match runner.get_result(id, &output) {
        Ok((bytes, media_type)) => {
            ([(header::CONTENT_TYPE, media_type)], bytes).into_response()
        }
        Err(err) => runner_error_response(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::raster::{raster_read, raster_write, Raster};
    use crate::runner::tools::{NDVI_TOOL_ID, RASTER_MEDIA_TYPE};
    use chrono::TimeZone;

    fn reference(slot: &str, url: String) -> Vec<InputBinding> {
        vec![InputBinding::Reference(ResourceReference {
            input_identifier: slot.to_string(),
            url,
            media_type: RASTER_MEDIA_TYPE.to_string(),
            sensing_time: Utc.with_ymd_and_hms(2020, 7, 1, 0, 0, 0).unwrap(),
        })]
    }

    fn write_grid(dir: &std::path::Path, name: &str, values: Vec<f64>) -> String {
        let raster = Raster::new(2, 1, 0.0, 0.0, 0.01, -9999.0, values).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, raster_write(&raster)).unwrap();
        Url::from_file_path(&path).unwrap().to_string()
    }

    async fn wait_terminal(runner: &Arc<ProcessRunner>, id: Uuid) -> ProcessExecutionRecord {
        for _ in 0..400 {
            let record = runner.get_status(id).unwrap();
            if matches!(record.status, ProcessStatus::Succeeded | ProcessStatus::Failed) {
                return record;
            }
            tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        }
        panic!("execution {id} never finished");
    }

    fn test_runner(dir: &std::path::Path) -> Arc<ProcessRunner> {
        let runner = ProcessRunner::new(
            dir.join("work"),
            dir.join("results"),
            2,
            Clock::real(),
        )
        .unwrap();
        runner.register_builtin_tools().unwrap();
        runner
    }

    #[tokio::test]
    async fn registry_lists_builtin_tools() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let ids: Vec<String> = runner
            .list_processes()
            .into_iter()
            .map(|d| d.process_id)
            .collect();
        assert!(ids.contains(&tools::LAND_COVER_TOOL_ID.to_string()));
        assert!(ids.contains(&NDVI_TOOL_ID.to_string()));

        let ndvi = runner.describe_process(NDVI_TOOL_ID).unwrap();
        let slots: Vec<&str> = ndvi.input_slots.iter().map(|s| s.identifier.as_str()).collect();
        assert_eq!(slots, vec!["red", "nir"]);
        assert_eq!(ndvi.output_slots[0].identifier, "ndvi");

        assert!(matches!(
            runner.describe_process("nope"),
            Err(RunnerError::UnknownProcess(_))
        ));
    }

    #[tokio::test]
    async fn ndvi_execution_succeeds_and_result_matches_disk() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let red = write_grid(dir.path(), "red.asc", vec![0.25, 0.25]);
        let nir = write_grid(dir.path(), "nir.asc", vec![0.75, 0.75]);

        let mut request = ExecuteRequest::default();
        request.inputs.insert("red".into(), reference("red", red));
        request.inputs.insert("nir".into(), reference("nir", nir));
        let id = runner.execute(NDVI_TOOL_ID, &request).unwrap();

        let record = wait_terminal(&runner, id).await;
        assert_eq!(record.status, ProcessStatus::Succeeded);
        let (bytes, media) = runner.get_result(id, "ndvi").unwrap();
        assert_eq!(media, RASTER_MEDIA_TYPE);
        let raster = raster_read(&bytes).unwrap();
        assert_eq!(raster.values, vec![0.5, 0.5]);

        // Served bytes equal the stored output file byte for byte.
        let on_disk = std::fs::read(
            dir.path()
                .join("results")
                .join(id.to_string())
                .join("ndvi"),
        )
        .unwrap();
        assert_eq!(bytes, on_disk);
    }

    #[tokio::test]
    async fn missing_slot_rejected_before_any_fetch() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let red = write_grid(dir.path(), "red.asc", vec![0.2, 0.1]);
        let mut request = ExecuteRequest::default();
        request.inputs.insert("red".into(), reference("red", red));
        match runner.execute(NDVI_TOOL_ID, &request) {
            Err(RunnerError::MissingInput(slot)) => assert_eq!(slot, "nir"),
            other => panic!("expected MissingInput, got {other:?}"),
        }
    }

    #[tokio::test]
    async fn fetch_failure_fails_execution_without_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let red = write_grid(dir.path(), "red.asc", vec![0.2, 0.1]);
        let mut request = ExecuteRequest::default();
        request.inputs.insert("red".into(), reference("red", red));
        request.inputs.insert(
            "nir".into(),
            reference("nir", "file:///does/not/exist.asc".to_string()),
        );
        let id = runner.execute(NDVI_TOOL_ID, &request).unwrap();
        let record = wait_terminal(&runner, id).await;
        assert_eq!(record.status, ProcessStatus::Failed);
        assert!(record.message.contains("FetchFailed"));
        assert!(matches!(
            runner.get_result(id, "ndvi"),
            Err(RunnerError::NotReady(_))
        ));
        // Working directory retains only the log.
        let workdir = dir.path().join("work").join(id.to_string());
        let leftover: Vec<_> = std::fs::read_dir(&workdir)
            .unwrap()
            .flatten()
            .map(|e| e.file_name())
            .collect();
        assert_eq!(leftover, vec![std::ffi::OsString::from("run.log")]);
    }

    #[tokio::test]
    async fn status_lifecycle_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let red = write_grid(dir.path(), "red.asc", vec![0.2, 0.1]);
        let nir = write_grid(dir.path(), "nir.asc", vec![0.6, 0.3]);
        let mut request = ExecuteRequest::default();
        request.inputs.insert("red".into(), reference("red", red));
        request.inputs.insert("nir".into(), reference("nir", nir));
        let id = runner.execute(NDVI_TOOL_ID, &request).unwrap();

        let rank = |s: ProcessStatus| match s {
            ProcessStatus::Accepted => 0,
            ProcessStatus::Running => 1,
            ProcessStatus::Succeeded | ProcessStatus::Failed => 2,
        };
        let mut last = 0;
        for _ in 0..200 {
            let record = runner.get_status(id).unwrap();
            let r = rank(record.status);
            assert!(r >= last, "status went backwards");
            last = r;
            if r == 2 {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        }
        assert_eq!(last, 2);
    }

    #[tokio::test]
    async fn identical_inputs_produce_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        let red = write_grid(dir.path(), "red.asc", vec![0.25, 0.17]);
        let nir = write_grid(dir.path(), "nir.asc", vec![0.61, 0.44]);
        let mut request = ExecuteRequest::default();
        request.inputs.insert("red".into(), reference("red", red));
        request.inputs.insert("nir".into(), reference("nir", nir));

        let first = runner.execute(NDVI_TOOL_ID, &request).unwrap();
        let second = runner.execute(NDVI_TOOL_ID, &request).unwrap();
        assert_eq!(wait_terminal(&runner, first).await.status, ProcessStatus::Succeeded);
        assert_eq!(wait_terminal(&runner, second).await.status, ProcessStatus::Succeeded);
        assert_eq!(
            runner.get_result(first, "ndvi").unwrap().0,
            runner.get_result(second, "ndvi").unwrap().0
        );
    }

    #[tokio::test]
    async fn duplicate_registration_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let runner = test_runner(dir.path());
        assert!(matches!(
            runner.register(Arc::new(tools::NdviTool)),
            Err(RunnerError::DuplicateProcess(_))
        ));
    }
}
