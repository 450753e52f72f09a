//! Catalog polling: watches scene-list documents, converts newly appeared
//! scenes into data envelopes and publishes them on
//! `wacodis.data.available`.
//!
//! A catalog is a line-delimited JSON document, one scene object per line.
//! Scene `accessUrl` values may be plain paths relative to the catalog
//! location; they are resolved into absolute URLs at poll time. Catalogs are
//! treated as append-only; dedupe is by `sceneId` and survives restarts
//! through a persisted ledger.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use url::Url;
use uuid::Uuid;

use crate::broker::{topics, Broker};
use crate::clock::Clock;
use crate::model::{ts_millis, BoundingBox, DataEnvelope, SourceType};

#[derive(Debug, thiserror::Error)]
pub enum ObserverError {
    #[error("catalog {location:?} unreachable: {reason}")]
    CatalogUnreachable { location: String, reason: String },
    #[error("catalog {location:?} line {line}: {reason}")]
    BadScene {
        location: String,
        line: usize,
        reason: String,
    },
    #[error("invalid poll interval: must be >= 1 second")]
    BadPollInterval,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One available dataset as listed by a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogScene {
    #[serde(rename = "sceneId")]
    pub scene_id: String,
    pub satellite: String,
    #[serde(rename = "sensingTime", with = "ts_millis")]
    pub sensing_time: DateTime<Utc>,
    #[serde(rename = "cloudCoverage")]
    pub cloud_coverage: f64,
    #[serde(rename = "processingLevel")]
    pub processing_level: String,
    pub footprint: BoundingBox,
    #[serde(rename = "accessUrl")]
    pub access_url: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
}

/// A scene-list document to poll: filesystem path or HTTP URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSource {
    pub name: String,
    pub location: String,
    #[serde(rename = "pollIntervalSeconds")]
    pub poll_interval_seconds: u64,
}

impl CatalogSource {
    pub fn new(name: &str, location: &str, poll_interval_seconds: u64) -> Result<Self, ObserverError> {
        if poll_interval_seconds < 1 {
            return Err(ObserverError::BadPollInterval);
        }
        Ok(CatalogSource {
            name: name.to_string(),
            location: location.to_string(),
            poll_interval_seconds,
        })
    }
}

/// Resolves a scene access reference against the catalog location: absolute
/// URLs pass through, anything else is interpreted as a path (relative to
/// the catalog file for filesystem catalogs, joined for HTTP catalogs).
fn resolve_access_url(raw: &str, location: &str) -> Result<String, String> {
    if Url::parse(raw).is_ok() {
        return Ok(raw.to_string());
    }
    if let Ok(base) = Url::parse(location) {
        return base.join(raw).map(|u| u.to_string()).map_err(|e| e.to_string());
    }
    let base = Path::new(location)
        .parent()
        .unwrap_or_else(|| Path::new("."));
    let path = base.join(raw);
    let absolute = std::fs::canonicalize(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Url::from_file_path(&absolute)
        .map(|u| u.to_string())
        .map_err(|()| format!("not an absolute path: {}", absolute.display()))
}

async fn read_catalog_document(location: &str) -> Result<String, ObserverError> {
    if location.starts_with("http://") || location.starts_with("https://") {
        let response = reqwest::get(location).await.map_err(|e| {
            ObserverError::CatalogUnreachable {
                location: location.to_string(),
                reason: e.to_string(),
            }
        })?;
        if !response.status().is_success() {
            return Err(ObserverError::CatalogUnreachable {
                location: location.to_string(),
                reason: format!("status {}", response.status()),
            });
        }
        response
            .text()
            .await
            .map_err(|e| ObserverError::CatalogUnreachable {
                location: location.to_string(),
                reason: e.to_string(),
            })
    } else {
        std::fs::read_to_string(location).map_err(|e| ObserverError::CatalogUnreachable {
            location: location.to_string(),
            reason: e.to_string(),
        })
    }
}

/// Reads the catalog and returns only scenes not in `seen`, ordered by
/// sensing time ascending. `seen` is updated with the returned scene ids;
/// an unreachable catalog leaves it untouched.
pub async fn poll_catalog(
    source: &CatalogSource,
    seen: &mut HashSet<String>,
) -> Result<Vec<CatalogScene>, ObserverError> {
    let text = read_catalog_document(&source.location).await?;

    let mut fresh = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut scene: CatalogScene =
            serde_json::from_str(line).map_err(|e| ObserverError::BadScene {
                location: source.location.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if seen.contains(&scene.scene_id) {
            continue;
        }
        scene.access_url = resolve_access_url(&scene.access_url, &source.location).map_err(
            |reason| ObserverError::BadScene {
                location: source.location.clone(),
                line: i + 1,
                reason,
            },
        )?;
        fresh.push(scene);
    }
    fresh.sort_by(|a, b| a.sensing_time.cmp(&b.sensing_time).then(a.scene_id.cmp(&b.scene_id)));
    for scene in &fresh {
        seen.insert(scene.scene_id.clone());
    }
    Ok(fresh)
}

/// Maps a catalog scene onto a data envelope with a fresh id.
pub fn scene_to_envelope(scene: &CatalogScene, discovered: DateTime<Utc>) -> DataEnvelope {
    DataEnvelope {
        envelope_id: Uuid::new_v4(),
        source_type: SourceType::Copernicus,
        satellite: Some(scene.satellite.clone()),
        product_collection: None,
        sensing_time: scene.sensing_time,
        spatial_footprint: scene.footprint,
        cloud_coverage: Some(scene.cloud_coverage),
        processing_level: Some(scene.processing_level.clone()),
        access_url: scene.access_url.clone(),
        media_type: scene.media_type.clone(),
        discovered,
    }
}

/// Persisted set of already-published scene ids.
struct SeenLedger {
    path: PathBuf,
    set: HashSet<String>,
}

impl SeenLedger {
    fn open(path: PathBuf) -> Result<Self, ObserverError> {
        let set = if path.is_file() {
            let raw = std::fs::read_to_string(&path)?;
            serde_json::from_str::<Vec<String>>(&raw)
                .map(|ids| ids.into_iter().collect())
                .unwrap_or_default()
        } else {
            HashSet::new()
        };
        Ok(SeenLedger { path, set })
    }

    fn persist(&self) -> Result<(), ObserverError> {
        let mut ids: Vec<&String> = self.set.iter().collect();
        ids.sort();
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&ids).expect("ids serialize"))?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

/// Polls registered catalog sources and publishes envelopes for unseen
/// scenes. Each source gets its own sequential poll loop: one poll right at
/// registration, then one per elapsed interval.
pub struct DatasourceObserver {
    broker: Broker,
    clock: Clock,
    seen: Arc<Mutex<SeenLedger>>,
    sources: Mutex<Vec<CatalogSource>>,
    tasks: Mutex<Vec<tokio::task::JoinHandle<()>>>,
    poll_count: Arc<Mutex<u64>>,
}

impl DatasourceObserver {
    pub fn new(broker: Broker, clock: Clock, ledger_path: PathBuf) -> Result<Arc<Self>, ObserverError> {
        if let Some(parent) = ledger_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Arc::new(DatasourceObserver {
            broker,
            clock,
            seen: Arc::new(Mutex::new(SeenLedger::open(ledger_path)?)),
            sources: Mutex::new(Vec::new()),
            tasks: Mutex::new(Vec::new()),
            poll_count: Arc::new(Mutex::new(0)),
        }))
    }

    pub fn sources(&self) -> Vec<CatalogSource> {
        self.sources.lock().expect("observer poisoned").clone()
    }

    /// Total number of polls executed across all sources.
    pub fn poll_count(&self) -> u64 {
        *self.poll_count.lock().expect("observer poisoned")
    }

    /// Registers a source and starts its poll loop: an immediate poll, then
    /// one poll per interval.
    pub fn register_source(self: &Arc<Self>, source: CatalogSource) -> Result<(), ObserverError> {
        if source.poll_interval_seconds < 1 {
            return Err(ObserverError::BadPollInterval);
        }
        self.sources
            .lock()
            .expect("observer poisoned")
            .push(source.clone());
        let observer = Arc::clone(self);
        let handle = tokio::spawn(async move {
            observer.poll_once(&source).await;
            loop {
                observer
                    .clock
                    .sleep(Duration::seconds(source.poll_interval_seconds as i64))
                    .await;
                observer.poll_once(&source).await;
            }
        });
        self.tasks.lock().expect("observer poisoned").push(handle);
        Ok(())
    }

    async fn poll_once(&self, source: &CatalogSource) {
        let mut seen_snapshot = {
            let ledger = self.seen.lock().expect("observer poisoned");
            ledger.set.clone()
        };
        let result = poll_catalog(source, &mut seen_snapshot).await;
        *self.poll_count.lock().expect("observer poisoned") += 1;
        match result {
            Ok(fresh) => {
                if !fresh.is_empty() {
                    let mut ledger = self.seen.lock().expect("observer poisoned");
                    ledger.set = seen_snapshot;
                    if let Err(e) = ledger.persist() {
                        tracing::error!(source = %source.name, error = %e, "seen ledger write failed");
                    }
                }
                for scene in fresh {
                    let envelope = scene_to_envelope(&scene, self.clock.now());
                    tracing::info!(source = %source.name, scene = %scene.scene_id, "scene discovered");
                    if let Err(e) = self.broker.publish(
                        topics::DATA_AVAILABLE,
                        serde_json::to_value(&envelope).expect("envelope serializes"),
                    ) {
                        tracing::error!(error = %e, "publish failed");
                    }
                }
            }
            Err(e) => {
                // Not fatal: the catalog is retried on the next interval.
                tracing::warn!(source = %source.name, error = %e, "catalog poll failed");
            }
        }
    }

    pub fn shutdown(&self) {
        for task in self.tasks.lock().expect("observer poisoned").drain(..) {
            task.abort();
        }
    }
}

// ---------------------------------------------------------------------------
// REST surface
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct RegisterCatalogRequest {
    pub name: Option<String>,
    pub location: String,
    #[serde(rename = "pollIntervalSeconds")]
    pub poll_interval_seconds: Option<u64>,
}

pub fn router(observer: Arc<DatasourceObserver>) -> Router {
    Router::new()
        .route("/catalogs", get(list_catalogs_handler).post(register_catalog_handler))
        .with_state(observer)
}

async fn list_catalogs_handler(
    State(observer): State<Arc<DatasourceObserver>>,
) -> Json<Vec<CatalogSource>> {
    Json(observer.sources())
}

async fn register_catalog_handler(
    State(observer): State<Arc<DatasourceObserver>>,
    Json(request): Json<RegisterCatalogRequest>,
) -> Response {
    let name = request.name.unwrap_or_else(|| {
        Path::new(&request.location)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "catalog".to_string())
    });
    let source = CatalogSource {
        name,
        location: request.location,
        poll_interval_seconds: request.poll_interval_seconds.unwrap_or(1),
    };
    match observer.register_source(source.clone()) {
        Ok(()) => (StatusCode::CREATED, Json(source)).into_response(),
        Err(e) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(serde_json::json!({ "error": e.to_string() })),
        )
            .into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn scene_line(id: &str, sensing: &str, access: &str) -> String {
        serde_json::json!({
            "sceneId": id,
            "satellite": "sentinel-2",
            "sensingTime": sensing,
            "cloudCoverage": 15.0,
            "processingLevel": "Level-2A",
            "footprint": [7.0, 51.0, 7.2, 51.2],
            "accessUrl": access,
            "mediaType": "application/x-ascii-grid"
        })
        .to_string()
    }

    fn write_catalog(dir: &std::path::Path, lines: &[String]) -> String {
        let path = dir.join("catalog.jsonl");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path.to_string_lossy().into_owned()
    }

    #[tokio::test]
    async fn poll_returns_unseen_scenes_ascending() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.asc"), "x").unwrap();
        std::fs::write(dir.path().join("s2.asc"), "x").unwrap();
        std::fs::write(dir.path().join("s3.asc"), "x").unwrap();
        let location = write_catalog(
            dir.path(),
            &[
                scene_line("s2", "2020-07-03T10:00:00.000Z", "s2.asc"),
                scene_line("s1", "2020-07-01T10:00:00.000Z", "s1.asc"),
                scene_line("s3", "2020-07-05T10:00:00.000Z", "s3.asc"),
            ],
        );
        let source = CatalogSource::new("test", &location, 5).unwrap();
        let mut seen = HashSet::new();

        let scenes = poll_catalog(&source, &mut seen).await.unwrap();
        assert_eq!(
            scenes.iter().map(|s| s.scene_id.as_str()).collect::<Vec<_>>(),
            vec!["s1", "s2", "s3"]
        );
        assert!(scenes[0].access_url.starts_with("file:///"));

        // Second poll over the unchanged catalog yields nothing.
        let again = poll_catalog(&source, &mut seen).await.unwrap();
        assert!(again.is_empty());
    }

    #[tokio::test]
    async fn missing_catalog_is_unreachable_and_seen_unchanged() {
        let source = CatalogSource::new("test", "/nope/missing.jsonl", 5).unwrap();
        let mut seen: HashSet<String> = ["s1".to_string()].into_iter().collect();
        let err = poll_catalog(&source, &mut seen).await.unwrap_err();
        assert!(matches!(err, ObserverError::CatalogUnreachable { .. }));
        assert_eq!(seen.len(), 1);
    }

    #[tokio::test]
    async fn envelope_copies_scene_metadata() {
        let scene: CatalogScene = serde_json::from_str(&scene_line(
            "s1",
            "2020-07-01T10:00:00.000Z",
            "file:///data/s1.asc",
        ))
        .unwrap();
        let discovered = Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap();
        let env = scene_to_envelope(&scene, discovered);
        assert_eq!(env.source_type, SourceType::Copernicus);
        assert_eq!(env.satellite.as_deref(), Some("sentinel-2"));
        assert_eq!(env.cloud_coverage, Some(15.0));
        assert_eq!(env.sensing_time, scene.sensing_time);
        assert_eq!(env.access_url, scene.access_url);
        assert_eq!(env.discovered, discovered);
        env.validate().unwrap();

        // Zero cloud coverage passes through without special-casing, and
        // distinct scenes get distinct envelope ids.
        let mut clear = scene.clone();
        clear.cloud_coverage = 0.0;
        let env2 = scene_to_envelope(&clear, discovered);
        assert_eq!(env2.cloud_coverage, Some(0.0));
        assert_ne!(env.envelope_id, env2.envelope_id);
    }

    #[tokio::test]
    async fn loop_polls_once_per_interval_advance() {
        let dir = tempfile::tempdir().unwrap();
        let location = write_catalog(dir.path(), &[]);
        let clock = Clock::simulated(Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap());
        let broker = Broker::new(clock.clone(), 64, false);
        let observer =
            DatasourceObserver::new(broker, clock.clone(), dir.path().join("seen.json")).unwrap();
        observer
            .register_source(CatalogSource::new("test", &location, 10).unwrap())
            .unwrap();

        // Registration poll.
        for _ in 0..50 {
            if observer.poll_count() == 1 {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        }
        assert_eq!(observer.poll_count(), 1);

        // Advancing n intervals yields exactly n more polls.
        let n = 3;
        for _ in 0..n {
            clock.advance(Duration::seconds(10));
            tokio::time::sleep(std::time::Duration::from_millis(30)).await;
        }
        assert_eq!(observer.poll_count(), 1 + n);
        observer.shutdown();
    }

    #[tokio::test]
    async fn observer_publishes_and_dedupes_across_restart() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.asc"), "x").unwrap();
        let location = write_catalog(
            dir.path(),
            &[scene_line("s1", "2020-07-01T10:00:00.000Z", "s1.asc")],
        );
        let clock = Clock::simulated(Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap());
        let ledger = dir.path().join("seen.json");

        {
            let broker = Broker::new(clock.clone(), 64, false);
            let mut sub = broker.subscribe(topics::DATA_AVAILABLE, "test").unwrap();
            let observer =
                DatasourceObserver::new(broker.clone(), clock.clone(), ledger.clone()).unwrap();
            observer
                .register_source(CatalogSource::new("test", &location, 10).unwrap())
                .unwrap();
            let msg = sub.recv().await.unwrap();
            let env: DataEnvelope = serde_json::from_value(msg.payload).unwrap();
            env.validate().unwrap();
            observer.shutdown();
        }

        // Restarted observer loads the ledger and does not republish.
        {
            let broker = Broker::new(clock.clone(), 64, false);
            let mut sub = broker.subscribe(topics::DATA_AVAILABLE, "test").unwrap();
            let observer = DatasourceObserver::new(broker.clone(), clock.clone(), ledger).unwrap();
            observer
                .register_source(CatalogSource::new("test", &location, 10).unwrap())
                .unwrap();
            for _ in 0..40 {
                if observer.poll_count() >= 1 {
                    break;
                }
                tokio::time::sleep(std::time::Duration::from_millis(5)).await;
            }
            assert!(sub.try_recv().is_none(), "seen scene must not republish");
            observer.shutdown();
        }
    }
}
