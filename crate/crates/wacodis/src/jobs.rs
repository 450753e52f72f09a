//! Durable job-definition store and the REST entry point for submitting
//! processing tasks. New jobs are announced on `wacodis.jobs.created`,
//! deletions on `wacodis.jobs.deleted`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as AxumPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::Value;
use uuid::Uuid;

use crate::broker::{topics, Broker, BrokerError};
use crate::clock::Clock;
use crate::model::{
    validate_job_definition, JobDefaults, JobDefinition, JobStatus, ValidationIssue,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("job {0} not found")]
    NotFound(Uuid),
    #[error("job {0} already exists")]
    DuplicateId(Uuid),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt job file {path:?}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

/// File-backed mapping jobId -> JobDefinition, one JSON document per job.
/// Writes go through a temp file and an atomic rename, so after a restart
/// the contents equal the last acknowledged write set.
pub struct JobStore {
    dir: PathBuf,
    jobs: Mutex<BTreeMap<Uuid, JobDefinition>>,
}

impl JobStore {
    pub fn open(dir: PathBuf) -> Result<Self, StoreError> {
        std::fs::create_dir_all(&dir)?;
        let mut jobs = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let raw = std::fs::read_to_string(&path)?;
            let job: JobDefinition =
                serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            jobs.insert(job.id, job);
        }
        Ok(JobStore {
            dir,
            jobs: Mutex::new(jobs),
        })
    }

    fn write_file(&self, job: &JobDefinition) -> Result<(), StoreError> {
        let path = self.dir.join(format!("{}.json", job.id));
        let tmp = self.dir.join(format!("{}.json.tmp", job.id));
        let body = serde_json::to_vec_pretty(job).expect("job serializes");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn insert(&self, job: JobDefinition) -> Result<(), StoreError> {
        let mut jobs = self.jobs.lock().expect("store poisoned");
        if jobs.contains_key(&job.id) {
            return Err(StoreError::DuplicateId(job.id));
        }
        self.write_file(&job)?;
        jobs.insert(job.id, job);
        Ok(())
    }

    /// Overwrites an existing job (status and bookkeeping updates).
    pub fn update(&self, job: JobDefinition) -> Result<(), StoreError> {
        let mut jobs = self.jobs.lock().expect("store poisoned");
        if !jobs.contains_key(&job.id) {
            return Err(StoreError::NotFound(job.id));
        }
        self.write_file(&job)?;
        jobs.insert(job.id, job);
        Ok(())
    }

    pub fn get(&self, id: Uuid) -> Option<JobDefinition> {
        self.jobs.lock().expect("store poisoned").get(&id).cloned()
    }

    pub fn list(&self) -> Vec<JobDefinition> {
        let jobs = self.jobs.lock().expect("store poisoned");
        let mut list: Vec<JobDefinition> = jobs.values().cloned().collect();
        list.sort_by(|a, b| a.created.cmp(&b.created).then(a.id.cmp(&b.id)));
        list
    }

    pub fn remove(&self, id: Uuid) -> Result<JobDefinition, StoreError> {
        let mut jobs = self.jobs.lock().expect("store poisoned");
        let job = jobs.remove(&id).ok_or(StoreError::NotFound(id))?;
        std::fs::remove_file(self.dir.join(format!("{id}.json")))?;
        Ok(job)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JobManagerError {
    #[error("validation failed")]
    Validation(Vec<ValidationIssue>),
    #[error("job {0} already exists")]
    DuplicateId(Uuid),
    #[error("job {0} not found")]
    NotFound(Uuid),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

impl From<StoreError> for JobManagerError {
    fn from(err: StoreError) -> Self {
        match err {
            StoreError::NotFound(id) => JobManagerError::NotFound(id),
            StoreError::DuplicateId(id) => JobManagerError::DuplicateId(id),
            other => JobManagerError::Store(other),
        }
    }
}

/// Entry point for users: validates, persists and announces job definitions.
pub struct JobManager {
    store: Arc<JobStore>,
    broker: Broker,
    clock: Clock,
}

impl JobManager {
    pub fn new(store: Arc<JobStore>, broker: Broker, clock: Clock) -> Self {
        JobManager {
            store,
            broker,
            clock,
        }
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.store
    }

    /// Validates and stores a job document. `id` and `created` are assigned
    /// by the server when absent; `status` starts as `waiting` and
    /// `lastFinishedExecution` is server-managed, so both are reset on input.
    pub fn create_job(&self, doc: &Value) -> Result<JobDefinition, JobManagerError> {
        let defaults = JobDefaults {
            id: Uuid::new_v4(),
            created: self.clock.now(),
        };
        let mut job =
            validate_job_definition(doc, defaults).map_err(JobManagerError::Validation)?;
        job.status = JobStatus::Waiting;
        job.last_finished_execution = None;

        self.store.insert(job.clone())?;
        self.broker.publish(
            topics::JOBS_CREATED,
            serde_json::to_value(&job).expect("job serializes"),
        )?;
        Ok(job)
    }

    pub fn get_job(&self, id: Uuid) -> Result<JobDefinition, JobManagerError> {
        self.store.get(id).ok_or(JobManagerError::NotFound(id))
    }

    pub fn list_jobs(&self) -> Vec<JobDefinition> {
        self.store.list()
    }

    /// Removes the job and announces the deletion, which cancels any future
    /// scheduled triggers.
    pub fn delete_job(&self, id: Uuid) -> Result<(), JobManagerError> {
        let job = self.store.remove(id)?;
        self.broker.publish(
            topics::JOBS_DELETED,
            serde_json::json!({ "jobId": job.id }),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// REST surface
// ---------------------------------------------------------------------------

fn manager_error_response(err: JobManagerError) -> Response {
    match err {
        JobManagerError::Validation(issues) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(serde_json::json!({ "errors": issues })),
        )
            .into_response(),
        JobManagerError::DuplicateId(id) => (
            StatusCode::CONFLICT,
            Json(serde_json::json!({ "error": format!("job {id} already exists") })),
        )
            .into_response(),
        JobManagerError::NotFound(id) => (
            StatusCode::NOT_FOUND,
            Json(serde_json::json!({ "error": format!("job {id} not found") })),
        )
            .into_response(),
        other => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(serde_json::json!({ "error": other.to_string() })),
        )
            .into_response(),
    }
}

pub fn router(manager: Arc<JobManager>) -> Router {
    Router::new()
        .route("/jobs", get(list_handler).post(create_handler))
        .route("/jobs/{id}", get(get_handler).delete(delete_handler))
        .with_state(manager)
}

async fn create_handler(
    State(manager): State<Arc<JobManager>>,
    Json(doc): Json<Value>,
) -> Response {
    match manager.create_job(&doc) {
        Ok(job) => (StatusCode::CREATED, Json(job)).into_response(),
        Err(err) => manager_error_response(err),
    }
}

async fn list_handler(State(manager): State<Arc<JobManager>>) -> Json<Vec<JobDefinition>> {
    Json(manager.list_jobs())
}

async fn get_handler(
    State(manager): State<Arc<JobManager>>,
    AxumPath(id): AxumPath<Uuid>,
) -> Response {
    match manager.get_job(id) {
        Ok(job) => Json(job).into_response(),
        Err(err) => manager_error_response(err),
    }
}

async fn delete_handler(
    State(manager): State<Arc<JobManager>>,
    AxumPath(id): AxumPath<Uuid>,
) -> Response {
    match manager.delete_job(id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(err) => manager_error_response(err),
    }
}
