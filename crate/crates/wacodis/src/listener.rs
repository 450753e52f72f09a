//! Product ingestion: consumes `wacodis.products.new`, retrieves results
//! from the process runner and hands them to every configured importer, then
//! republishes product metadata on `wacodis.data.available` so products can
//! feed higher-value products.
//!
//! Processing is exactly-once per execution under at-least-once delivery: a
//! persisted ledger next to the import root records completed ingestions.
//! The listener touches only the broker and the runner client, never shared
//! state, so it can run apart from the core.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use url::Url;
use uuid::Uuid;

use crate::broker::{topics, Broker};
use crate::client::ProcessClient;
use crate::clock::Clock;
use crate::events::NewProductEvent;
use crate::model::{ts_millis, BoundingBox, DataEnvelope, SourceType};

#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error("import root not writable: {0}")]
    PermissionDenied(String),
    #[error("storage full: {0}")]
    StorageFull(String),
    #[error("backend rejected import (status {0})")]
    Failed(u16),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned no stored location")]
    NoLocation,
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for ImportError {
    fn from(err: std::io::Error) -> Self {
        match err.kind() {
            std::io::ErrorKind::PermissionDenied
            | std::io::ErrorKind::ReadOnlyFilesystem
            | std::io::ErrorKind::NotADirectory => ImportError::PermissionDenied(err.to_string()),
            std::io::ErrorKind::StorageFull => ImportError::StorageFull(err.to_string()),
            _ => ImportError::Io(err),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ListenerError {
    #[error("malformed products.new payload: {0}")]
    BadPayload(String),
    #[error("result fetch failed: {0}")]
    FetchFailed(String),
    #[error("{failed} of {total} importers failed: {reasons:?}")]
    ImportFailures {
        failed: usize,
        total: usize,
        reasons: Vec<String>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metadata compiled for one generated product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductMetadata {
    #[serde(rename = "jobId")]
    pub job_id: Uuid,
    #[serde(rename = "executionId")]
    pub execution_id: Uuid,
    #[serde(rename = "productCollection")]
    pub product_collection: String,
    /// Trigger time of the producing execution.
    #[serde(rename = "sensingTime", with = "ts_millis")]
    pub sensing_time: DateTime<Utc>,
    /// The producing job's area of interest.
    #[serde(rename = "spatialFootprint")]
    pub spatial_footprint: BoundingBox,
    #[serde(rename = "mediaType")]
    pub media_type: String,
}

/// Common backend interface. `import` must be idempotent for identical
/// `(executionId, output)` pairs: re-import yields the same stored location
/// without duplicating the artifact.
#[async_trait]
pub trait ProductImporter: Send + Sync {
    fn name(&self) -> &str;
    async fn import(&self, bytes: &[u8], meta: &ProductMetadata) -> Result<String, ImportError>;
}

// ---------------------------------------------------------------------------
// Filesystem importer
// ---------------------------------------------------------------------------

/// Stores products under `<root>/<productCollection>/<sensingTime>_<executionId>.asc`
/// with a write-then-rename so no partial file is ever visible.
pub struct FilesystemImporter {
    root: PathBuf,
}

impl FilesystemImporter {
    pub fn new(root: PathBuf) -> Self {
        FilesystemImporter { root }
    }

    pub fn root(&self) -> &PathBuf {
        &self.root
    }

    fn target_path(&self, meta: &ProductMetadata) -> PathBuf {
        let stamp = meta.sensing_time.format("%Y%m%dT%H%M%SZ");
        self.root
            .join(&meta.product_collection)
            .join(format!("{stamp}_{}.asc", meta.execution_id))
    }
}

#[async_trait]
impl ProductImporter for FilesystemImporter {
    fn name(&self) -> &str {
        "filesystem"
    }

    async fn import(&self, bytes: &[u8], meta: &ProductMetadata) -> Result<String, ImportError> {
        let path = self.target_path(meta);
        let url = Url::from_file_path(&path)
            .map_err(|()| ImportError::PermissionDenied(format!("{} is not absolute", path.display())))?
            .to_string();
        if path.is_file() {
            return Ok(url);
        }
        let dir = path.parent().expect("target path has a parent");
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension("asc.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(url)
    }
}

// ---------------------------------------------------------------------------
// HTTP importer
// ---------------------------------------------------------------------------

/// Posts product bytes to a configured endpoint with metadata headers; a
/// 2xx response must carry the stored location in its `Location` header.
pub struct HttpImporter {
    endpoint: String,
    http: reqwest::Client,
}

impl HttpImporter {
    pub fn new(endpoint: String) -> Self {
        HttpImporter {
            endpoint,
            http: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl ProductImporter for HttpImporter {
    fn name(&self) -> &str {
        "http"
    }

    async fn import(&self, bytes: &[u8], meta: &ProductMetadata) -> Result<String, ImportError> {
        let response = self
            .http
            .post(&self.endpoint)
            .header("X-Product-Collection", &meta.product_collection)
            .header("X-Execution-Id", meta.execution_id.to_string())
            .header(reqwest::header::CONTENT_TYPE, &meta.media_type)
            .body(bytes.to_vec())
            .send()
            .await
            .map_err(|e| ImportError::Unreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(ImportError::Failed(status.as_u16()));
        }
        response
            .headers()
            .get(reqwest::header::LOCATION)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
            .ok_or(ImportError::NoLocation)
    }
}

// ---------------------------------------------------------------------------
// Listener
// ---------------------------------------------------------------------------

/// Persisted map of fully ingested executions to their stored locations.
struct ProcessedLedger {
    path: PathBuf,
    entries: HashMap<Uuid, Vec<String>>,
}

impl ProcessedLedger {
    fn open(path: PathBuf) -> Result<Self, ListenerError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let entries = if path.is_file() {
            let raw = std::fs::read_to_string(&path)?;
            serde_json::from_str(&raw).unwrap_or_default()
        } else {
            HashMap::new()
        };
        Ok(ProcessedLedger { path, entries })
    }

    fn persist(&self) -> Result<(), ListenerError> {
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&self.entries).expect("ledger serializes"))?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

pub struct ProductListener {
    importers: Vec<Arc<dyn ProductImporter>>,
    runner: Arc<dyn ProcessClient>,
    broker: Broker,
    clock: Clock,
    ledger: Mutex<ProcessedLedger>,
}

impl ProductListener {
    pub fn new(
        importers: Vec<Arc<dyn ProductImporter>>,
        runner: Arc<dyn ProcessClient>,
        broker: Broker,
        clock: Clock,
        ledger_path: PathBuf,
    ) -> Result<Arc<Self>, ListenerError> {
        Ok(Arc::new(ProductListener {
            importers,
            runner,
            broker,
            clock,
            ledger: Mutex::new(ProcessedLedger::open(ledger_path)?),
        }))
    }

    /// Handles one `products.new` payload: fetches each result once, runs
    /// every importer (one importer failing does not stop the others), and
    /// only after all succeed records the execution in the ledger and
    /// publishes a Product data envelope per output. Duplicate deliveries
    /// return the previously stored locations without re-ingesting.
    pub async fn on_new_product(
        &self,
        payload: &serde_json::Value,
    ) -> Result<Vec<String>, ListenerError> {
        let event: NewProductEvent = serde_json::from_value(payload.clone())
            .map_err(|e| ListenerError::BadPayload(e.to_string()))?;

        {
            let ledger = self.ledger.lock().expect("listener poisoned");
            if let Some(stored) = ledger.entries.get(&event.execution_id) {
                return Ok(stored.clone());
            }
        }

        let mut stored_locations = Vec::new();
        let mut envelopes = Vec::new();
        let total = self.importers.len();
        let mut failures: Vec<String> = Vec::new();

        for reference in &event.result_references {
            let output = &reference.input_identifier;
            let (bytes, media_type) = self
                .runner
                .result(event.execution_id, output)
                .await
                .map_err(|e| ListenerError::FetchFailed(e.to_string()))?;

            let meta = ProductMetadata {
                job_id: event.job_id,
                execution_id: event.execution_id,
                product_collection: event.product_collection.clone(),
                sensing_time: event.triggered_at,
                spatial_footprint: event.area_of_interest,
                media_type: media_type.clone(),
            };

            let mut first_location: Option<String> = None;
            for importer in &self.importers {
                match importer.import(&bytes, &meta).await {
                    Ok(location) => {
                        first_location.get_or_insert_with(|| location.clone());
                        stored_locations.push(location);
                    }
                    Err(e) => {
                        tracing::error!(importer = importer.name(), error = %e, "import failed");
                        failures.push(format!("{}: {e}", importer.name()));
                    }
                }
            }

            if let Some(access_url) = first_location {
                envelopes.push(DataEnvelope {
                    envelope_id: Uuid::new_v4(),
                    source_type: SourceType::Product,
                    satellite: None,
                    product_collection: Some(event.product_collection.clone()),
                    sensing_time: event.triggered_at,
                    spatial_footprint: event.area_of_interest,
                    cloud_coverage: None,
                    processing_level: None,
                    access_url,
                    media_type,
                    discovered: self.clock.now(),
                });
            }
        }

        if !failures.is_empty() {
            // Partial ingestion: keep what succeeded but do not feed the
            // product back until every backend has it.
            return Err(ListenerError::ImportFailures {
                failed: failures.len(),
                total,
                reasons: failures,
            });
        }

        {
            let mut ledger = self.ledger.lock().expect("listener poisoned");
            ledger
                .entries
                .insert(event.execution_id, stored_locations.clone());
            ledger.persist()?;
        }

        for envelope in envelopes {
            if let Err(e) = self.broker.publish(
                topics::DATA_AVAILABLE,
                serde_json::to_value(&envelope).expect("envelope serializes"),
            ) {
                tracing::warn!(error = %e, "product envelope publish failed");
            }
        }
        Ok(stored_locations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ResourceReference;
    use crate::runner::tools::RASTER_MEDIA_TYPE;
    use crate::runner::{ExecuteRequest, ProcessDescription, ProcessExecutionRecord};
    use chrono::TimeZone;

    fn meta() -> ProductMetadata {
        ProductMetadata {
            job_id: Uuid::new_v4(),
            execution_id: Uuid::parse_str("851956cb-0975-407c-bada-a08247f13c5c").unwrap(),
            product_collection: "land-cover-classification".into(),
            sensing_time: Utc.with_ymd_and_hms(2020, 8, 1, 0, 0, 0).unwrap(),
            spatial_footprint: BoundingBox::new(6.931, 50.985, 7.607, 51.319).unwrap(),
            media_type: RASTER_MEDIA_TYPE.into(),
        }
    }

    #[tokio::test]
    async fn filesystem_layout_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let importer = FilesystemImporter::new(dir.path().join("products"));
        let meta = meta();
        let url = importer.import(b"grid", &meta).await.unwrap();
        let expected = format!(
            "land-cover-classification/20200801T000000Z_{}.asc",
            meta.execution_id
        );
        assert!(url.ends_with(&expected), "{url}");

        // Same ids import to the same path without duplication.
        let again = importer.import(b"grid", &meta).await.unwrap();
        assert_eq!(url, again);
        let files: Vec<_> = std::fs::read_dir(
            dir.path().join("products").join("land-cover-classification"),
        )
        .unwrap()
        .flatten()
        .collect();
        assert_eq!(files.len(), 1);
    }

    #[tokio::test]
    async fn unwritable_root_is_permission_denied_without_partial_file() {
        // A root below a regular file can never be created.
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("blocker");
        std::fs::write(&blocker, "x").unwrap();
        let importer = FilesystemImporter::new(blocker.join("products"));
        match importer.import(b"grid", &meta()).await {
            Err(ImportError::PermissionDenied(_)) => {}
            other => panic!("expected PermissionDenied, got {other:?}"),
        }
        assert!(!blocker.join("products").exists());
    }

    struct StaticRunner {
        bytes: Vec<u8>,
        fetches: Mutex<u32>,
    }

    #[async_trait]
    impl ProcessClient for StaticRunner {
        async fn list_processes(&self) -> Result<Vec<ProcessDescription>, crate::client::ClientError> {
            Ok(vec![])
        }
        async fn describe_process(
            &self,
            _: &str,
        ) -> Result<ProcessDescription, crate::client::ClientError> {
            unimplemented!()
        }
        async fn execute(
            &self,
            _: &str,
            _: &ExecuteRequest,
        ) -> Result<Uuid, crate::client::ClientError> {
            unimplemented!()
        }
        async fn status(
            &self,
            _: Uuid,
        ) -> Result<ProcessExecutionRecord, crate::client::ClientError> {
            unimplemented!()
        }
        async fn result(
            &self,
            _: Uuid,
            _: &str,
        ) -> Result<(Vec<u8>, String), crate::client::ClientError> {
            *self.fetches.lock().unwrap() += 1;
            Ok((self.bytes.clone(), RASTER_MEDIA_TYPE.to_string()))
        }
    }

    struct FailingImporter;

    #[async_trait]
    impl ProductImporter for FailingImporter {
        fn name(&self) -> &str {
            "failing"
        }
        async fn import(&self, _: &[u8], _: &ProductMetadata) -> Result<String, ImportError> {
            Err(ImportError::Failed(500))
        }
    }

    fn event(execution_id: Uuid) -> serde_json::Value {
        serde_json::to_value(NewProductEvent {
            job_id: Uuid::new_v4(),
            execution_id,
            product_collection: "land-cover-classification".into(),
            result_references: vec![ResourceReference {
                input_identifier: "classification".into(),
                url: "file:///unused".into(),
                media_type: RASTER_MEDIA_TYPE.into(),
                sensing_time: Utc.with_ymd_and_hms(2020, 8, 1, 0, 0, 0).unwrap(),
            }],
            triggered_at: Utc.with_ymd_and_hms(2020, 8, 1, 0, 0, 0).unwrap(),
            area_of_interest: BoundingBox::new(6.931, 50.985, 7.607, 51.319).unwrap(),
        })
        .unwrap()
    }

    fn listener_fixture(
        dir: &std::path::Path,
        importers: Vec<Arc<dyn ProductImporter>>,
        runner: Arc<StaticRunner>,
    ) -> (Arc<ProductListener>, Broker) {
        let clock = Clock::simulated(Utc.with_ymd_and_hms(2020, 8, 1, 0, 0, 0).unwrap());
        let broker = Broker::new(clock.clone(), 64, false);
        let listener = ProductListener::new(
            importers,
            runner,
            broker.clone(),
            clock,
            dir.join("processed.json"),
        )
        .unwrap();
        (listener, broker)
    }

    #[tokio::test]
    async fn ingests_once_and_publishes_feedback_envelope() {
        let dir = tempfile::tempdir().unwrap();
        let runner = Arc::new(StaticRunner {
            bytes: b"grid-bytes".to_vec(),
            fetches: Mutex::new(0),
        });
        let fs = Arc::new(FilesystemImporter::new(dir.path().join("products")));
        let (listener, broker) =
            listener_fixture(dir.path(), vec![fs], Arc::clone(&runner));
        let mut envelopes = broker.subscribe(topics::DATA_AVAILABLE, "test").unwrap();

        let execution_id = Uuid::new_v4();
        let payload = event(execution_id);
        let stored = listener.on_new_product(&payload).await.unwrap();
        assert_eq!(stored.len(), 1);
        assert_eq!(*runner.fetches.lock().unwrap(), 1, "result fetched once");

        let msg = envelopes.recv().await.unwrap();
        let envelope: DataEnvelope = serde_json::from_value(msg.payload).unwrap();
        envelope.validate().unwrap();
        assert_eq!(envelope.source_type, SourceType::Product);
        assert_eq!(
            envelope.product_collection.as_deref(),
            Some("land-cover-classification")
        );
        assert_eq!(envelope.access_url, stored[0]);

        // Duplicate delivery: same locations, no second artifact or fetch.
        let again = listener.on_new_product(&payload).await.unwrap();
        assert_eq!(again, stored);
        assert_eq!(*runner.fetches.lock().unwrap(), 1);
        assert!(envelopes.try_recv().is_none());
    }

    #[tokio::test]
    async fn partial_importer_failure_keeps_first_and_publishes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let runner = Arc::new(StaticRunner {
            bytes: b"grid-bytes".to_vec(),
            fetches: Mutex::new(0),
        });
        let fs = Arc::new(FilesystemImporter::new(dir.path().join("products")));
        let (listener, broker) = listener_fixture(
            dir.path(),
            vec![fs, Arc::new(FailingImporter)],
            Arc::clone(&runner),
        );
        let mut envelopes = broker.subscribe(topics::DATA_AVAILABLE, "test").unwrap();

        let payload = event(Uuid::new_v4());
        match listener.on_new_product(&payload).await {
            Err(ListenerError::ImportFailures { failed, total, .. }) => {
                assert_eq!(failed, 1);
                assert_eq!(total, 2);
            }
            other => panic!("expected ImportFailures, got {other:?}"),
        }
        // First importer's artifact is retained, no envelope published.
        let collection_dir = dir.path().join("products").join("land-cover-classification");
        assert_eq!(std::fs::read_dir(collection_dir).unwrap().count(), 1);
        assert!(envelopes.try_recv().is_none());
    }

    #[tokio::test]
    async fn ledger_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let runner = Arc::new(StaticRunner {
            bytes: b"grid-bytes".to_vec(),
            fetches: Mutex::new(0),
        });
        let execution_id = Uuid::new_v4();
        let payload = event(execution_id);
        let stored = {
            let fs = Arc::new(FilesystemImporter::new(dir.path().join("products")));
            let (listener, _broker) =
                listener_fixture(dir.path(), vec![fs], Arc::clone(&runner));
            listener.on_new_product(&payload).await.unwrap()
        };
        let fs = Arc::new(FilesystemImporter::new(dir.path().join("products")));
        let (listener, _broker) = listener_fixture(dir.path(), vec![fs], Arc::clone(&runner));
        let again = listener.on_new_product(&payload).await.unwrap();
        assert_eq!(again, stored);
        assert_eq!(*runner.fetches.lock().unwrap(), 1);
    }
}
