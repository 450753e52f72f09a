//! Wire shapes of the broker payloads exchanged between components.
//!
//! Payloads are canonical serializations of the domain types plus the
//! event-specific fields below. Consumers must tolerate duplicate delivery
//! and dedupe on the identifiers carried here.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::model::{ts_millis, BoundingBox, ResourceReference};

/// Payload of `wacodis.products.new`: announces the results of one
/// succeeded execution so listeners can fetch and ingest them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewProductEvent {
    #[serde(rename = "jobId")]
    pub job_id: Uuid,
    #[serde(rename = "executionId")]
    pub execution_id: Uuid,
    #[serde(rename = "productCollection")]
    pub product_collection: String,
    #[serde(rename = "resultReferences")]
    pub result_references: Vec<ResourceReference>,
    #[serde(rename = "triggeredAt", with = "ts_millis")]
    pub triggered_at: DateTime<Utc>,
    #[serde(rename = "areaOfInterest")]
    pub area_of_interest: BoundingBox,
}

/// Payload of `wacodis.jobs.deleted`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobDeletedEvent {
    #[serde(rename = "jobId")]
    pub job_id: Uuid,
}
