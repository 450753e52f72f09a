//! Scheduling and per-execution state machine: cron patterns trigger jobs,
//! inputs are resolved against the data wrapper, tools run through the
//! process client, and completed products are announced on the broker.
//!
//! Execution records move only along
//! `SCHEDULED -> WAITING_DATA -> {RUNNING, FAILED}` and
//! `RUNNING -> {SUCCEEDED, FAILED}`; every transition is persisted before it
//! becomes observable. A job whose data is not yet complete stays in
//! `WAITING_DATA` and is re-checked on the retry interval until the attempt
//! budget runs out.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as AxumPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use uuid::Uuid;

use crate::broker::{topics, Broker};
use crate::client::{ClientError, ProcessClient, ResourceResolver};
use crate::clock::Clock;
use crate::events::NewProductEvent;
use crate::jobs::JobStore;
use crate::model::{
    ts_millis, JobDefinition, JobStatus, ResourceReference, TimeWindow,
};
use crate::runner::{ExecuteRequest, InputBinding, ProcessStatus};
use crate::wrapper::ResourceQuery;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionState {
    Scheduled,
    WaitingData,
    Running,
    Succeeded,
    Failed,
}

impl ExecutionState {
    /// The complete transition relation of the execution state machine.
    pub fn can_transition(self, to: ExecutionState) -> bool {
        use ExecutionState::*;
        matches!(
            (self, to),
            (Scheduled, WaitingData)
                | (WaitingData, Running)
                | (WaitingData, Failed)
                | (Running, Succeeded)
                | (Running, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ExecutionState::Succeeded | ExecutionState::Failed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("job {0} not found")]
    JobNotFound(Uuid),
    #[error("execution {0} not found")]
    ExecutionNotFound(Uuid),
    #[error("illegal state transition {from:?} -> {to:?}")]
    IllegalState {
        from: ExecutionState,
        to: ExecutionState,
    },
    #[error("job {0} is already running")]
    TriggerOverlap(Uuid),
    #[error("resolver: {0}")]
    Resolver(ClientError),
    #[error(transparent)]
    Store(#[from] crate::jobs::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Asynchronous execution record of one triggered job run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    #[serde(rename = "executionId")]
    pub execution_id: Uuid,
    #[serde(rename = "jobId")]
    pub job_id: Uuid,
    #[serde(rename = "triggeredAt", with = "ts_millis")]
    pub triggered_at: DateTime<Utc>,
    pub state: ExecutionState,
    pub attempts: u32,
    #[serde(rename = "resolvedInputs")]
    pub resolved_inputs: BTreeMap<String, Vec<ResourceReference>>,
    #[serde(rename = "resultReferences", skip_serializing_if = "Option::is_none", default)]
    pub result_references: Option<Vec<ResourceReference>>,
    #[serde(rename = "failureReason", skip_serializing_if = "Option::is_none", default)]
    pub failure_reason: Option<String>,
}

impl ExecutionRecord {
    pub fn new(job_id: Uuid, triggered_at: DateTime<Utc>) -> Self {
        ExecutionRecord {
            execution_id: Uuid::new_v4(),
            job_id,
            triggered_at,
            state: ExecutionState::Scheduled,
            attempts: 0,
            resolved_inputs: BTreeMap::new(),
            result_references: None,
            failure_reason: None,
        }
    }

    /// Moves to `to`, rejecting anything outside the declared edge set.
    pub fn transition(&mut self, to: ExecutionState) -> Result<(), EngineError> {
        if !self.state.can_transition(to) {
            return Err(EngineError::IllegalState {
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }
}

/// Persisted execution records, one JSON file per record, written through a
/// temp file and rename on every change.
pub struct ExecutionStore {
    dir: PathBuf,
    records: Mutex<HashMap<Uuid, ExecutionRecord>>,
}

impl ExecutionStore {
    /// Opens the store. Records left in a non-terminal state by a previous
    /// process are failed (through legal transitions) with the given reason
    /// and returned so callers can reconcile job status.
    pub fn open(dir: PathBuf, interrupt_reason: &str) -> Result<(Arc<Self>, Vec<ExecutionRecord>), EngineError> {
        std::fs::create_dir_all(&dir)?;
        let mut records = HashMap::new();
        let mut interrupted = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let raw = std::fs::read_to_string(&path)?;
            let mut record: ExecutionRecord = match serde_json::from_str(&raw) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping corrupt execution record");
                    continue;
                }
            };
            if !record.state.is_terminal() {
                if record.state == ExecutionState::Scheduled {
                    record.transition(ExecutionState::WaitingData).expect("legal edge");
                }
                if record.state == ExecutionState::WaitingData {
                    record.transition(ExecutionState::Failed).expect("legal edge");
                } else {
                    record.transition(ExecutionState::Failed).expect("legal edge");
                }
                record.failure_reason = Some(interrupt_reason.to_string());
                interrupted.push(record.clone());
            }
            records.insert(record.execution_id, record);
        }
        let store = Arc::new(ExecutionStore {
            dir,
            records: Mutex::new(records),
        });
        for record in &interrupted {
            store.persist(record)?;
        }
        Ok((store, interrupted))
    }

    fn persist(&self, record: &ExecutionRecord) -> Result<(), EngineError> {
        let path = self.dir.join(format!("{}.json", record.execution_id));
        let tmp = self.dir.join(format!("{}.json.tmp", record.execution_id));
        std::fs::write(&tmp, serde_json::to_vec_pretty(record).expect("record serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn insert(&self, record: ExecutionRecord) -> Result<(), EngineError> {
        self.persist(&record)?;
        self.records
            .lock()
            .expect("records poisoned")
            .insert(record.execution_id, record);
        Ok(())
    }

    /// Applies `change` to the record under the store lock and persists the
    /// result before returning the updated snapshot.
    pub fn mutate(
        &self,
        execution_id: Uuid,
        change: impl FnOnce(&mut ExecutionRecord) -> Result<(), EngineError>,
    ) -> Result<ExecutionRecord, EngineError> {
        let mut records = self.records.lock().expect("records poisoned");
        let record = records
            .get_mut(&execution_id)
            .ok_or(EngineError::ExecutionNotFound(execution_id))?;
        change(record)?;
        let snapshot = record.clone();
        drop(records);
        self.persist(&snapshot)?;
        Ok(snapshot)
    }

    pub fn get(&self, execution_id: Uuid) -> Option<ExecutionRecord> {
        self.records
            .lock()
            .expect("records poisoned")
            .get(&execution_id)
            .cloned()
    }

    pub fn list_for_job(&self, job_id: Uuid) -> Vec<ExecutionRecord> {
        let records = self.records.lock().expect("records poisoned");
        let mut list: Vec<ExecutionRecord> = records
            .values()
            .filter(|r| r.job_id == job_id)
            .cloned()
            .collect();
        list.sort_by(|a, b| {
            a.triggered_at
                .cmp(&b.triggered_at)
                .then(a.execution_id.cmp(&b.execution_id))
        });
        list
    }

    pub fn list_all(&self) -> Vec<ExecutionRecord> {
        self.records
            .lock()
            .expect("records poisoned")
            .values()
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Seconds between data re-checks while an execution waits for input.
    #[serde(rename = "intervalSeconds")]
    pub interval_seconds: u64,
    /// Resolution attempts (including the first) before giving up.
    #[serde(rename = "maxAttempts")]
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            interval_seconds: 60,
            max_attempts: 10,
        }
    }
}

pub struct CoreEngine {
    jobs: Arc<JobStore>,
    records: Arc<ExecutionStore>,
    resolver: Arc<dyn ResourceResolver>,
    runner: Arc<dyn ProcessClient>,
    broker: Broker,
    clock: Clock,
    retry: RetryPolicy,
    /// Required processing level per tool id, from system configuration.
    required_levels: HashMap<String, String>,
    execution_timeout: std::time::Duration,
    wake: Notify,
    products_published: Mutex<HashSet<Uuid>>,
    skipped_triggers: Mutex<Vec<(Uuid, DateTime<Utc>)>>,
    tasks: Mutex<Vec<tokio::task::JoinHandle<()>>>,
}

impl CoreEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        jobs: Arc<JobStore>,
        records: Arc<ExecutionStore>,
        resolver: Arc<dyn ResourceResolver>,
        runner: Arc<dyn ProcessClient>,
        broker: Broker,
        clock: Clock,
        retry: RetryPolicy,
        required_levels: HashMap<String, String>,
        execution_timeout: std::time::Duration,
    ) -> Arc<Self> {
        Arc::new(CoreEngine {
            jobs,
            records,
            resolver,
            runner,
            broker,
            clock,
            retry,
            required_levels,
            execution_timeout,
            wake: Notify::new(),
            products_published: Mutex::new(HashSet::new()),
            skipped_triggers: Mutex::new(Vec::new()),
            tasks: Mutex::new(Vec::new()),
        })
    }

    pub fn records(&self) -> &Arc<ExecutionStore> {
        &self.records
    }

    /// Interrupts the scheduler's current wait so it recomputes fire times
    /// (called when jobs are created or deleted).
    pub fn wake(&self) {
        self.wake.notify_waiters();
    }

    pub fn skipped_triggers(&self) -> Vec<(Uuid, DateTime<Utc>)> {
        self.skipped_triggers.lock().expect("engine poisoned").clone()
    }

    /// Starts one execution for the job: creates the record, announces it,
    /// and drives resolution and processing in a background task.
    pub async fn trigger(self: &Arc<Self>, job_id: Uuid) -> Result<ExecutionRecord, EngineError> {
        let job = self.jobs.get(job_id).ok_or(EngineError::JobNotFound(job_id))?;
        if job.status == JobStatus::Running {
            return Err(EngineError::TriggerOverlap(job_id));
        }

        let record = ExecutionRecord::new(job_id, self.clock.now());
        self.records.insert(record.clone())?;

        let mut running = job.clone();
        running.status = JobStatus::Running;
        self.jobs.update(running)?;

        if let Err(e) = self.broker.publish(
            topics::EXECUTIONS_STARTED,
            serde_json::to_value(&record).expect("record serializes"),
        ) {
            tracing::warn!(error = %e, "executions.started publish failed");
        }

        let engine = Arc::clone(self);
        let job_for_task = job.clone();
        let execution_id = record.execution_id;
        let handle = tokio::spawn(async move {
            engine.drive_execution(execution_id, job_for_task).await;
        });
        self.tasks.lock().expect("engine poisoned").push(handle);
        Ok(record)
    }

    async fn drive_execution(self: Arc<Self>, execution_id: Uuid, job: JobDefinition) {
        match self.resolve_inputs(execution_id, &job).await {
            Ok(request) => {
                let outcome = self.run_process(&job, &request).await;
                if let Err(e) = self.complete_execution(execution_id, outcome) {
                    tracing::error!(execution = %execution_id, error = %e, "completion failed");
                }
            }
            Err(reason) => {
                if let Err(e) = self.fail_before_running(execution_id, &job, reason) {
                    tracing::error!(execution = %execution_id, error = %e, "failure handling failed");
                }
            }
        }
    }

    /// Resolves every input subset over the coverage window. Returns the
    /// execute request (newest matching reference per slot) once all inputs
    /// have at least one reference; re-checks per retry policy otherwise.
    async fn resolve_inputs(
        &self,
        execution_id: Uuid,
        job: &JobDefinition,
    ) -> Result<ExecuteRequest, String> {
        let record = self
            .records
            .get(execution_id)
            .ok_or_else(|| "record vanished".to_string())?;
        let coverage = Duration::seconds(job.coverage_seconds() as i64);
        let window = TimeWindow::new(record.triggered_at - coverage, record.triggered_at)
            .map_err(|e| format!("coverage window: {e}"))?;

        loop {
            let record = self
                .records
                .mutate(execution_id, |r| {
                    if r.state == ExecutionState::Scheduled {
                        r.transition(ExecutionState::WaitingData)?;
                    }
                    r.attempts += 1;
                    Ok(())
                })
                .map_err(|e| e.to_string())?;

            let mut resolved: BTreeMap<String, Vec<ResourceReference>> = BTreeMap::new();
            let mut complete = true;
            for subset in &job.inputs {
                let query = ResourceQuery {
                    subset: subset.clone(),
                    window,
                    area_of_interest: *job.extent(),
                    required_processing_level: self
                        .required_levels
                        .get(&job.processing_tool)
                        .cloned(),
                };
                let references = self
                    .resolver
                    .query(&query)
                    .await
                    .map_err(|e| format!("resolver: {e}"))?;
                if references.is_empty() {
                    complete = false;
                }
                resolved.insert(subset.identifier().to_string(), references);
            }

            if complete {
                let request = ExecuteRequest {
                    inputs: resolved
                        .iter()
                        .map(|(slot, references)| {
                            // Newest reference per slot; the full list stays
                            // on the record for audit.
                            let newest = references[0].clone();
                            (slot.clone(), vec![InputBinding::Reference(newest)])
                        })
                        .collect(),
                    parameters: BTreeMap::new(),
                };
                self.records
                    .mutate(execution_id, |r| {
                        r.resolved_inputs = resolved.clone();
                        r.transition(ExecutionState::Running)
                    })
                    .map_err(|e| e.to_string())?;
                return Ok(request);
            }

            if record.attempts >= self.retry.max_attempts {
                return Err("input data incomplete".to_string());
            }
            self.clock
                .sleep(Duration::seconds(self.retry.interval_seconds as i64))
                .await;
        }
    }

    /// Executes the tool and polls its status to completion.
    async fn run_process(
        &self,
        job: &JobDefinition,
        request: &ExecuteRequest,
    ) -> Result<Vec<ResourceReference>, String> {
        let process_execution = self
            .runner
            .execute(&job.processing_tool, request)
            .await
            .map_err(|e| format!("execute: {e}"))?;

        let started = std::time::Instant::now();
        loop {
            let status = self
                .runner
                .status(process_execution)
                .await
                .map_err(|e| format!("status: {e}"))?;
            match status.status {
                ProcessStatus::Succeeded => {
                    return Ok(status.results.into_values().collect());
                }
                ProcessStatus::Failed => return Err(status.message),
                ProcessStatus::Accepted | ProcessStatus::Running => {
                    if started.elapsed() > self.execution_timeout {
                        return Err("process execution timed out".to_string());
                    }
                    tokio::time::sleep(std::time::Duration::from_millis(25)).await;
                }
            }
        }
    }

    /// Finishes a RUNNING execution. Success stores result references,
    /// returns the job to `waiting` with an updated `lastFinishedExecution`,
    /// and publishes exactly one `wacodis.products.new`; failure publishes
    /// `wacodis.executions.failed`.
    pub fn complete_execution(
        &self,
        execution_id: Uuid,
        outcome: Result<Vec<ResourceReference>, String>,
    ) -> Result<ExecutionRecord, EngineError> {
        match outcome {
            Ok(raw_results) => {
                let completed_at = self.clock.now();
                let record = self.records.mutate(execution_id, |r| {
                    r.transition(ExecutionState::Succeeded)?;
                    let results = raw_results
                        .iter()
                        .map(|reference| ResourceReference {
                            sensing_time: r.triggered_at,
                            ..reference.clone()
                        })
                        .collect();
                    r.result_references = Some(results);
                    Ok(())
                })?;

                if let Some(mut job) = self.jobs.get(record.job_id) {
                    job.last_finished_execution = Some(completed_at);
                    job.status = JobStatus::Waiting;
                    self.jobs.update(job.clone())?;

                    let fresh = self
                        .products_published
                        .lock()
                        .expect("engine poisoned")
                        .insert(execution_id);
                    if fresh {
                        let event = NewProductEvent {
                            job_id: job.id,
                            execution_id,
                            product_collection: job.product_collection.clone(),
                            result_references: record.result_references.clone().unwrap_or_default(),
                            triggered_at: record.triggered_at,
                            area_of_interest: *job.extent(),
                        };
                        if let Err(e) = self.broker.publish(
                            topics::PRODUCTS_NEW,
                            serde_json::to_value(&event).expect("event serializes"),
                        ) {
                            tracing::warn!(error = %e, "products.new publish failed");
                        }
                    }
                }
                Ok(record)
            }
            Err(reason) => {
                let record = self.records.mutate(execution_id, |r| {
                    r.transition(ExecutionState::Failed)?;
                    r.failure_reason = Some(reason.clone());
                    Ok(())
                })?;
                self.mark_job_failed(record.job_id)?;
                self.publish_failed(&record);
                Ok(record)
            }
        }
    }

    /// Failure path for executions that never reached RUNNING (resolver
    /// errors, retry budget exhausted).
    fn fail_before_running(
        &self,
        execution_id: Uuid,
        job: &JobDefinition,
        reason: String,
    ) -> Result<ExecutionRecord, EngineError> {
        let record = self.records.mutate(execution_id, |r| {
            if r.state == ExecutionState::Scheduled {
                r.transition(ExecutionState::WaitingData)?;
            }
            r.transition(ExecutionState::Failed)?;
            r.failure_reason = Some(reason.clone());
            Ok(())
        })?;
        self.mark_job_failed(job.id)?;
        self.publish_failed(&record);
        Ok(record)
    }

    fn mark_job_failed(&self, job_id: Uuid) -> Result<(), EngineError> {
        if let Some(mut job) = self.jobs.get(job_id) {
            job.status = JobStatus::Failed;
            self.jobs.update(job)?;
        }
        Ok(())
    }

    fn publish_failed(&self, record: &ExecutionRecord) {
        if let Err(e) = self.broker.publish(
            topics::EXECUTIONS_FAILED,
            serde_json::to_value(record).expect("record serializes"),
        ) {
            tracing::warn!(error = %e, "executions.failed publish failed");
        }
    }

    /// Marks every live execution as failed (clean-shutdown path) and stops
    /// background tasks.
    pub fn shutdown(&self, reason: &str) {
        for task in self.tasks.lock().expect("engine poisoned").drain(..) {
            task.abort();
        }
        for record in self.records.list_all() {
            if record.state.is_terminal() {
                continue;
            }
            let result = self.records.mutate(record.execution_id, |r| {
                if r.state == ExecutionState::Scheduled {
                    r.transition(ExecutionState::WaitingData)?;
                }
                if !r.state.is_terminal() {
                    r.transition(ExecutionState::Failed)?;
                }
                r.failure_reason = Some(reason.to_string());
                Ok(())
            });
            match result {
                Ok(failed) => {
                    self.publish_failed(&failed);
                    let _ = self.mark_job_failed(failed.job_id);
                }
                Err(e) => tracing::warn!(error = %e, "shutdown failure marking failed"),
            }
        }
    }

    /// Runs the cron scheduler until aborted: waits for the earliest next
    /// fire among all stored jobs, triggers due jobs, and recomputes when
    /// woken by job churn. A job still running at its fire time is skipped
    /// and the skip recorded.
    pub async fn run_scheduler(self: Arc<Self>) {
        loop {
            let now = self.clock.now();
            let mut earliest: Option<DateTime<Utc>> = None;
            let mut due_at_earliest: Vec<Uuid> = Vec::new();
            for job in self.jobs.list() {
                let Ok(pattern) = job.execution.pattern.parse::<crate::cron::CronPattern>() else {
                    continue;
                };
                let Ok(fire) = pattern.next_fire_time(now) else {
                    continue;
                };
                match earliest {
                    Some(t) if fire > t => {}
                    Some(t) if fire == t => due_at_earliest.push(job.id),
                    _ => {
                        earliest = Some(fire);
                        due_at_earliest = vec![job.id];
                    }
                }
            }

            match earliest {
                None => self.wake.notified().await,
                Some(fire) => {
                    tokio::select! {
                        _ = self.clock.wait_until(fire) => {
                            for job_id in due_at_earliest {
                                // Re-read: the job may be gone or running.
                                let Some(job) = self.jobs.get(job_id) else { continue };
                                if job.status == JobStatus::Running {
                                    tracing::info!(job = %job_id, at = %fire, "fire skipped, job still running");
                                    self.skipped_triggers
                                        .lock()
                                        .expect("engine poisoned")
                                        .push((job_id, fire));
                                    continue;
                                }
                                match self.trigger(job_id).await {
                                    Ok(record) => {
                                        tracing::info!(job = %job_id, execution = %record.execution_id, "scheduled trigger fired");
                                    }
                                    Err(e) => tracing::warn!(job = %job_id, error = %e, "scheduled trigger failed"),
                                }
                            }
                        }
                        _ = self.wake.notified() => {}
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// REST surface
// ---------------------------------------------------------------------------

fn engine_error_response(err: EngineError) -> Response {
    let status = match &err {
        EngineError::JobNotFound(_) | EngineError::ExecutionNotFound(_) => StatusCode::NOT_FOUND,
        EngineError::TriggerOverlap(_) | EngineError::IllegalState { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(serde_json::json!({ "error": err.to_string() }))).into_response()
}

pub fn router(engine: Arc<CoreEngine>) -> Router {
    Router::new()
        .route("/jobs/{id}/trigger", post(trigger_handler))
        .route("/jobs/{id}/executions", get(executions_handler))
        .with_state(engine)
}

async fn trigger_handler(
    State(engine): State<Arc<CoreEngine>>,
    AxumPath(id): AxumPath<Uuid>,
) -> Response {
    match engine.trigger(id).await {
        Ok(record) => (StatusCode::ACCEPTED, Json(record)).into_response(),
        Err(err) => engine_error_response(err),
    }
}

async fn executions_handler(
    State(engine): State<Arc<CoreEngine>>,
    AxumPath(id): AxumPath<Uuid>,
) -> Json<Vec<ExecutionRecord>> {
    Json(engine.records().list_for_job(id))
}
