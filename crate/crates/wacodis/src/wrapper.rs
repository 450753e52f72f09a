//! Envelope index and constraint-based resolution of subset definitions
//! into concrete resource references.
//!
//! The index is in-memory with an append-only ledger file for rebuild on
//! restart. Matching applies source type, satellite, inclusive cloud-cover
//! bound, optional processing level, product collection, temporal window
//! and spatial intersection; results come back newest first.

use std::collections::{BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::model::{
    BoundingBox, DataEnvelope, ResourceReference, SourceType, SubsetDefinition, TimeWindow,
};

#[derive(Debug, thiserror::Error)]
pub enum WrapperError {
    #[error("invalid envelope: {0:?}")]
    InvalidEnvelope(Vec<crate::model::ValidationIssue>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Constraints for resolving one subset definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResourceQuery {
    pub subset: SubsetDefinition,
    pub window: TimeWindow,
    #[serde(rename = "areaOfInterest")]
    pub area_of_interest: BoundingBox,
    #[serde(
        rename = "requiredProcessingLevel",
        skip_serializing_if = "Option::is_none",
        default
    )]
    pub required_processing_level: Option<String>,
}

/// True iff the envelope satisfies every constraint of the query: matching
/// source type and per-variant fields (satellite plus inclusive cloud bound
/// and optional processing level for the Copernicus variant, product
/// collection for the Product variant), sensing time inside the closed
/// window and footprint intersecting the area of interest.
pub fn match_envelope(query: &ResourceQuery, envelope: &DataEnvelope) -> bool {
    if envelope.source_type != query.subset.source_type() {
        return false;
    }
    match &query.subset {
        SubsetDefinition::CopernicusSubsetDefinition {
            satellite,
            maximum_cloud_coverage,
            ..
        } => {
            if envelope.satellite.as_deref() != Some(satellite.as_str()) {
                return false;
            }
            if let Some(max) = maximum_cloud_coverage {
                match envelope.cloud_coverage {
                    Some(cloud) if cloud <= *max => {}
                    _ => return false,
                }
            }
            if let Some(required) = &query.required_processing_level {
                if envelope.processing_level.as_deref() != Some(required.as_str()) {
                    return false;
                }
            }
        }
        SubsetDefinition::ProductSubsetDefinition {
            product_collection, ..
        } => {
            if envelope.product_collection.as_deref() != Some(product_collection.as_str()) {
                return false;
            }
        }
    }
    query.window.contains(envelope.sensing_time)
        && query.area_of_interest.intersects(&envelope.spatial_footprint)
}

struct IndexInner {
    by_id: HashMap<Uuid, DataEnvelope>,
    // Newest-first iteration order for queries.
    by_time: BTreeSet<(DateTime<Utc>, Uuid)>,
}

/// Envelope store keyed by id with secondary ordering by sensing time.
/// Insertion is idempotent on `envelopeId`.
pub struct EnvelopeIndex {
    inner: RwLock<IndexInner>,
    ledger: Option<Mutex<std::fs::File>>,
}

impl EnvelopeIndex {
    /// Purely in-memory index (tests, oracles).
    pub fn in_memory() -> Arc<Self> {
        Arc::new(EnvelopeIndex {
            inner: RwLock::new(IndexInner {
                by_id: HashMap::new(),
                by_time: BTreeSet::new(),
            }),
            ledger: None,
        })
    }

    /// Opens an index backed by an append-only JSONL ledger, replaying any
    /// existing entries. A torn trailing line (crash mid-append) is skipped.
    pub fn open(ledger_path: PathBuf) -> Result<Arc<Self>, WrapperError> {
        if let Some(parent) = ledger_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut inner = IndexInner {
            by_id: HashMap::new(),
            by_time: BTreeSet::new(),
        };
        if ledger_path.is_file() {
            for line in std::fs::read_to_string(&ledger_path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<DataEnvelope>(line) {
                    Ok(env) => {
                        inner.by_time.insert((env.sensing_time, env.envelope_id));
                        inner.by_id.insert(env.envelope_id, env);
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "skipping torn envelope ledger line");
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ledger_path)?;
        Ok(Arc::new(EnvelopeIndex {
            inner: RwLock::new(inner),
            ledger: Some(Mutex::new(file)),
        }))
    }

    /// Indexes an envelope; duplicates by id are a no-op. The envelope is
    /// queryable as soon as this returns.
    pub fn insert(&self, envelope: DataEnvelope) -> Result<bool, WrapperError> {
        envelope
            .validate()
            .map_err(WrapperError::InvalidEnvelope)?;
        {
            let mut inner = self.inner.write().expect("index poisoned");
            if inner.by_id.contains_key(&envelope.envelope_id) {
                return Ok(false);
            }
            inner
                .by_time
                .insert((envelope.sensing_time, envelope.envelope_id));
            inner.by_id.insert(envelope.envelope_id, envelope.clone());
        }
        if let Some(ledger) = &self.ledger {
            let mut file = ledger.lock().expect("ledger poisoned");
            let mut line = serde_json::to_vec(&envelope).expect("envelope serializes");
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("index poisoned").by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: Uuid) -> Option<DataEnvelope> {
        self.inner
            .read()
            .expect("index poisoned")
            .by_id
            .get(&id)
            .cloned()
    }

    pub fn snapshot(&self) -> Vec<DataEnvelope> {
        self.inner
            .read()
            .expect("index poisoned")
            .by_id
            .values()
            .cloned()
            .collect()
    }

    /// Exactly the envelopes matching the query, as references sorted by
    /// sensing time descending. An empty result is a valid answer.
    pub fn query(&self, query: &ResourceQuery) -> Vec<ResourceReference> {
        let inner = self.inner.read().expect("index poisoned");
        inner
            .by_time
            .iter()
            .rev()
            .filter_map(|(_, id)| inner.by_id.get(id))
            .filter(|env| match_envelope(query, env))
            .map(|env| ResourceReference {
                input_identifier: query.subset.identifier().to_string(),
                url: env.access_url.clone(),
                media_type: env.media_type.clone(),
                sensing_time: env.sensing_time,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// REST surface
// ---------------------------------------------------------------------------

pub fn router(index: Arc<EnvelopeIndex>) -> Router {
    Router::new()
        .route("/resources/query", post(query_handler))
        .with_state(index)
}

async fn query_handler(
    State(index): State<Arc<EnvelopeIndex>>,
    body: Result<Json<ResourceQuery>, axum::extract::rejection::JsonRejection>,
) -> Response {
    match body {
        Ok(Json(query)) => Json(index.query(&query)).into_response(),
        Err(rejection) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(serde_json::json!({ "error": rejection.to_string() })),
        )
            .into_response(),
    }
}
