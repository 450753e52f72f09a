//! Shared domain types, document validation and the spatial/temporal
//! predicates used across the pipeline.
//!
//! All types are immutable values after construction and serialize to the
//! canonical JSON field names of the job-definition document format.
//! Timestamps are RFC 3339 UTC with millisecond precision.

use std::collections::HashSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use url::Url;
use uuid::Uuid;

use crate::cron::CronPattern;

/// RFC 3339 with exactly millisecond precision, e.g. `2020-07-07T12:03:26.006Z`.
pub mod ts_millis {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{self, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Optional variant of [`ts_millis`].
pub mod ts_millis_opt {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{self, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_some(&t.to_rfc3339_opts(SecondsFormat::Millis, true)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<DateTime<Utc>>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(raw) => DateTime::parse_from_rfc3339(&raw)
                .map(|t| Some(t.with_timezone(&Utc)))
                .map_err(serde::de::Error::custom),
        }
    }
}

pub fn format_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

// ---------------------------------------------------------------------------
// Geometry and time
// ---------------------------------------------------------------------------

/// Axis-aligned WGS84 bounding box, serialized as `[minLon, minLat, maxLon, maxLat]`.
///
/// Boxes are closed rectangles; boxes crossing the antimeridian are rejected
/// at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    min_lon: f64,
    min_lat: f64,
    max_lon: f64,
    max_lat: f64,
}

impl BoundingBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, String> {
        for v in [min_lon, min_lat, max_lon, max_lat] {
            if !v.is_finite() {
                return Err("coordinates must be finite".into());
            }
        }
        if !(-180.0..=180.0).contains(&min_lon) || !(-180.0..=180.0).contains(&max_lon) {
            return Err("longitudes must lie in [-180, 180]".into());
        }
        if !(-90.0..=90.0).contains(&min_lat) || !(-90.0..=90.0).contains(&max_lat) {
            return Err("latitudes must lie in [-90, 90]".into());
        }
        if min_lon > max_lon {
            return Err(format!("minLon {min_lon} > maxLon {max_lon}"));
        }
        if min_lat > max_lat {
            return Err(format!("minLat {min_lat} > maxLat {max_lat}"));
        }
        Ok(BoundingBox {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        })
    }

    pub fn min_lon(&self) -> f64 {
        self.min_lon
    }
    pub fn min_lat(&self) -> f64 {
        self.min_lat
    }
    pub fn max_lon(&self) -> f64 {
        self.max_lon
    }
    pub fn max_lat(&self) -> f64 {
        self.max_lat
    }

    /// True iff the two closed rectangles share at least one point.
    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }

    pub fn extent(&self) -> [f64; 4] {
        [self.min_lon, self.min_lat, self.max_lon, self.max_lat]
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.extent().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(raw[0], raw[1], raw[2], raw[3]).map_err(serde::de::Error::custom)
    }
}

/// Closed UTC time interval: `start <= t <= end` counts as contained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    #[serde(with = "ts_millis")]
    pub start: DateTime<Utc>,
    #[serde(with = "ts_millis")]
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, String> {
        if start > end {
            return Err(format!("window start {start} after end {end}"));
        }
        Ok(TimeWindow { start, end })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t <= self.end
    }
}

// ---------------------------------------------------------------------------
// ISO-8601 durations
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DurationError {
    #[error("bad duration format: {0}")]
    BadFormat(String),
    #[error("duration must be strictly positive")]
    ZeroDuration,
}

/// Parses an ISO-8601 duration (`P…Y/M/W/D` and `T…H/M/S` designators) into
/// whole seconds. Calendar units are fixed-size approximations: a month is
/// 30 days and a year 365 days, since coverage windows are relative offsets
/// rather than calendar arithmetic.
pub fn parse_iso_duration(text: &str) -> Result<u64, DurationError> {
    let bad = |reason: &str| DurationError::BadFormat(format!("{text:?}: {reason}"));

    let rest = text
        .strip_prefix('P')
        .ok_or_else(|| bad("must start with 'P'"))?;
    if rest.is_empty() {
        return Err(bad("no components"));
    }

    let (date_part, time_part) = match rest.split_once('T') {
        Some((d, t)) => {
            if t.is_empty() {
                return Err(bad("'T' with no time components"));
            }
            (d, Some(t))
        }
        None => (rest, None),
    };

    fn scan(part: &str, designators: &[(char, u64)], text: &str) -> Result<u64, DurationError> {
        let mut total: u64 = 0;
        let mut number = String::new();
        let mut next_designator = 0;
        for c in part.chars() {
            if c.is_ascii_digit() {
                number.push(c);
                continue;
            }
            let pos = designators[next_designator..]
                .iter()
                .position(|(d, _)| *d == c)
                .ok_or_else(|| {
                    DurationError::BadFormat(format!("{text:?}: unexpected designator {c:?}"))
                })?;
            if number.is_empty() {
                return Err(DurationError::BadFormat(format!(
                    "{text:?}: designator {c:?} without a value"
                )));
            }
            let value: u64 = number.parse().map_err(|_| {
                DurationError::BadFormat(format!("{text:?}: value out of range before {c:?}"))
            })?;
            let (_, unit) = designators[next_designator + pos];
            total = total
                .checked_add(value.saturating_mul(unit))
                .ok_or_else(|| DurationError::BadFormat(format!("{text:?}: overflow")))?;
            next_designator += pos + 1;
            number.clear();
        }
        if !number.is_empty() {
            return Err(DurationError::BadFormat(format!(
                "{text:?}: trailing digits without designator"
            )));
        }
        Ok(total)
    }

    const DAY: u64 = 86_400;
    let mut seconds = scan(
        date_part,
        &[('Y', 365 * DAY), ('M', 30 * DAY), ('W', 7 * DAY), ('D', DAY)],
        text,
    )?;
    if let Some(time_part) = time_part {
        seconds += scan(time_part, &[('H', 3600), ('M', 60), ('S', 1)], text)?;
    }

    if seconds == 0 {
        return Err(DurationError::ZeroDuration);
    }
    Ok(seconds)
}

/// Canonical formatter for day/hour/minute/second durations; inverse of
/// [`parse_iso_duration`] for durations without calendar units.
pub fn format_iso_duration(total_seconds: u64) -> String {
    let days = total_seconds / 86_400;
    let hours = (total_seconds % 86_400) / 3600;
    let minutes = (total_seconds % 3600) / 60;
    let seconds = total_seconds % 60;
    let mut out = String::from("P");
    if days > 0 {
        out.push_str(&format!("{days}D"));
    }
    if hours > 0 || minutes > 0 || seconds > 0 {
        out.push('T');
        if hours > 0 {
            out.push_str(&format!("{hours}H"));
        }
        if minutes > 0 {
            out.push_str(&format!("{minutes}M"));
        }
        if seconds > 0 {
            out.push_str(&format!("{seconds}S"));
        }
    }
    if out == "P" {
        out.push_str("T0S");
    }
    out
}

// ---------------------------------------------------------------------------
// Subset definitions and job documents
// ---------------------------------------------------------------------------

/// Declarative description of one required process input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sourceType")]
pub enum SubsetDefinition {
    CopernicusSubsetDefinition {
        identifier: String,
        satellite: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        #[serde(rename = "maximumCloudCoverage")]
        #[serde(default)]
        maximum_cloud_coverage: Option<f64>,
    },
    ProductSubsetDefinition {
        identifier: String,
        #[serde(rename = "productCollection")]
        product_collection: String,
    },
}

impl SubsetDefinition {
    pub fn identifier(&self) -> &str {
        match self {
            SubsetDefinition::CopernicusSubsetDefinition { identifier, .. } => identifier,
            SubsetDefinition::ProductSubsetDefinition { identifier, .. } => identifier,
        }
    }

    pub fn source_type(&self) -> SourceType {
        match self {
            SubsetDefinition::CopernicusSubsetDefinition { .. } => SourceType::Copernicus,
            SubsetDefinition::ProductSubsetDefinition { .. } => SourceType::Product,
        }
    }
}

/// Dataset origin flavor, matching the subset-definition variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceType {
    #[serde(rename = "CopernicusSubsetDefinition")]
    Copernicus,
    #[serde(rename = "ProductSubsetDefinition")]
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Waiting,
    Running,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSpec {
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCoverage {
    pub duration: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaOfInterest {
    pub extent: BoundingBox,
}

/// A recurring processing task: schedule, temporal coverage, area of
/// interest, tool id and input subset definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDefinition {
    pub id: Uuid,
    pub name: String,
    pub description: String,
    #[serde(with = "ts_millis")]
    pub created: DateTime<Utc>,
    #[serde(rename = "lastFinishedExecution", with = "ts_millis_opt", default)]
    pub last_finished_execution: Option<DateTime<Utc>>,
    pub status: JobStatus,
    pub execution: ExecutionSpec,
    #[serde(rename = "temporalCoverage")]
    pub temporal_coverage: TemporalCoverage,
    #[serde(rename = "areaOfInterest")]
    pub area_of_interest: AreaOfInterest,
    #[serde(rename = "processingTool")]
    pub processing_tool: String,
    #[serde(rename = "productCollection")]
    pub product_collection: String,
    pub inputs: Vec<SubsetDefinition>,
}

impl JobDefinition {
    pub fn cron(&self) -> CronPattern {
        self.execution
            .pattern
            .parse()
            .expect("validated pattern must parse")
    }

    pub fn coverage_seconds(&self) -> u64 {
        parse_iso_duration(&self.temporal_coverage.duration)
            .expect("validated duration must parse")
    }

    pub fn extent(&self) -> &BoundingBox {
        &self.area_of_interest.extent
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissingField,
    BadFormat,
    InvariantViolation,
    UnknownField,
}

/// One field-level validation failure. Validation reports all violations,
/// not just the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub field: String,
    pub kind: IssueKind,
    pub message: String,
}

impl ValidationIssue {
    fn new(field: impl Into<String>, kind: IssueKind, message: impl Into<String>) -> Self {
        ValidationIssue {
            field: field.into(),
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Server-side fallbacks for fields a submitted document may omit.
#[derive(Debug, Clone, Copy)]
pub struct JobDefaults {
    pub id: Uuid,
    pub created: DateTime<Utc>,
}

struct Validator {
    issues: Vec<ValidationIssue>,
}

impl Validator {
    fn push(&mut self, field: impl Into<String>, kind: IssueKind, message: impl Into<String>) {
        self.issues.push(ValidationIssue::new(field, kind, message));
    }

    fn reject_unknown(&mut self, obj: &serde_json::Map<String, Value>, known: &[&str], prefix: &str) {
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                let field = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                self.push(field, IssueKind::UnknownField, "unknown field");
            }
        }
    }

    fn string(&mut self, obj: &serde_json::Map<String, Value>, field: &str) -> Option<String> {
        match obj.get(field) {
            None => {
                self.push(field, IssueKind::MissingField, "required field is missing");
                None
            }
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.push(field, IssueKind::BadFormat, "expected a string");
                None
            }
        }
    }

    fn timestamp(&mut self, raw: &Value, field: &str) -> Option<DateTime<Utc>> {
        match raw {
            Value::String(s) => match DateTime::parse_from_rfc3339(s) {
                Ok(t) => Some(t.with_timezone(&Utc)),
                Err(e) => {
                    self.push(field, IssueKind::BadFormat, format!("not an RFC 3339 timestamp: {e}"));
                    None
                }
            },
            _ => {
                self.push(field, IssueKind::BadFormat, "expected an RFC 3339 string");
                None
            }
        }
    }
}

/// Validates a parsed job document against the full schema, reporting every
/// violation. Unknown fields are rejected to surface client typos early.
/// `defaults` supplies `id` and `created` when the document omits them.
pub fn validate_job_definition(
    raw: &Value,
    defaults: JobDefaults,
) -> Result<JobDefinition, Vec<ValidationIssue>> {
    let mut v = Validator { issues: Vec::new() };

    let Some(obj) = raw.as_object() else {
        return Err(vec![ValidationIssue::new(
            "$",
            IssueKind::BadFormat,
            "job definition must be a JSON object",
        )]);
    };

    v.reject_unknown(
        obj,
        &[
            "id",
            "name",
            "description",
            "created",
            "lastFinishedExecution",
            "status",
            "execution",
            "temporalCoverage",
            "areaOfInterest",
            "processingTool",
            "productCollection",
            "inputs",
        ],
        "",
    );

    let id = match obj.get("id") {
        None => defaults.id,
        Some(Value::String(s)) => match s.parse::<Uuid>() {
            Ok(id) => id,
            Err(_) => {
                v.push("id", IssueKind::BadFormat, "not a UUID");
                defaults.id
            }
        },
        Some(_) => {
            v.push("id", IssueKind::BadFormat, "expected a UUID string");
            defaults.id
        }
    };

    let name = v.string(obj, "name").unwrap_or_default();
    let description = v.string(obj, "description").unwrap_or_default();

    let created = match obj.get("created") {
        None => defaults.created,
        Some(raw) => v.timestamp(raw, "created").unwrap_or(defaults.created),
    };

    let last_finished_execution = match obj.get("lastFinishedExecution") {
        None | Some(Value::Null) => None,
        Some(raw) => v.timestamp(raw, "lastFinishedExecution"),
    };

    let status = match obj.get("status") {
        None => JobStatus::Waiting,
        Some(raw) => match serde_json::from_value::<JobStatus>(raw.clone()) {
            Ok(s) => s,
            Err(_) => {
                v.push(
                    "status",
                    IssueKind::BadFormat,
                    "expected one of \"waiting\", \"running\", \"failed\"",
                );
                JobStatus::Waiting
            }
        },
    };

    let pattern = match obj.get("execution") {
        None => {
            v.push("execution", IssueKind::MissingField, "required field is missing");
            String::new()
        }
        Some(Value::Object(ex)) => {
            v.reject_unknown(ex, &["pattern"], "execution");
            match ex.get("pattern") {
                Some(Value::String(p)) => {
                    if let Err(e) = p.parse::<CronPattern>() {
                        v.push("execution.pattern", IssueKind::BadFormat, e.to_string());
                    }
                    p.clone()
                }
                Some(_) => {
                    v.push("execution.pattern", IssueKind::BadFormat, "expected a string");
                    String::new()
                }
                None => {
                    v.push("execution.pattern", IssueKind::MissingField, "required field is missing");
                    String::new()
                }
            }
        }
        Some(_) => {
            v.push("execution", IssueKind::BadFormat, "expected an object");
            String::new()
        }
    };

    let duration = match obj.get("temporalCoverage") {
        None => {
            v.push("temporalCoverage", IssueKind::MissingField, "required field is missing");
            String::new()
        }
        Some(Value::Object(tc)) => {
            v.reject_unknown(tc, &["duration"], "temporalCoverage");
            match tc.get("duration") {
                Some(Value::String(d)) => {
                    match parse_iso_duration(d) {
                        Err(DurationError::ZeroDuration) => v.push(
                            "temporalCoverage.duration",
                            IssueKind::InvariantViolation,
                            "duration must be strictly positive",
                        ),
                        Err(e) => v.push("temporalCoverage.duration", IssueKind::BadFormat, e.to_string()),
                        Ok(_) => {}
                    }
                    d.clone()
                }
                Some(_) => {
                    v.push("temporalCoverage.duration", IssueKind::BadFormat, "expected a string");
                    String::new()
                }
                None => {
                    v.push(
                        "temporalCoverage.duration",
                        IssueKind::MissingField,
                        "required field is missing",
                    );
                    String::new()
                }
            }
        }
        Some(_) => {
            v.push("temporalCoverage", IssueKind::BadFormat, "expected an object");
            String::new()
        }
    };

    let extent = match obj.get("areaOfInterest") {
        None => {
            v.push("areaOfInterest", IssueKind::MissingField, "required field is missing");
            None
        }
        Some(Value::Object(aoi)) => {
            v.reject_unknown(aoi, &["extent"], "areaOfInterest");
            match aoi.get("extent") {
                Some(raw) => {
                    let coords: Option<Vec<f64>> = raw
                        .as_array()
                        .filter(|a| a.len() == 4)
                        .map(|a| a.iter().filter_map(Value::as_f64).collect());
                    match coords {
                        Some(c) if c.len() == 4 => match BoundingBox::new(c[0], c[1], c[2], c[3]) {
                            Ok(b) => Some(b),
                            Err(e) => {
                                v.push("areaOfInterest", IssueKind::InvariantViolation, e);
                                None
                            }
                        },
                        _ => {
                            v.push(
                                "areaOfInterest.extent",
                                IssueKind::BadFormat,
                                "expected [minLon, minLat, maxLon, maxLat]",
                            );
                            None
                        }
                    }
                }
                None => {
                    v.push("areaOfInterest.extent", IssueKind::MissingField, "required field is missing");
                    None
                }
            }
        }
        Some(_) => {
            v.push("areaOfInterest", IssueKind::BadFormat, "expected an object");
            None
        }
    };

    let processing_tool = v.string(obj, "processingTool").unwrap_or_default();
    if processing_tool.is_empty() && obj.contains_key("processingTool") {
        v.push("processingTool", IssueKind::InvariantViolation, "must be non-empty");
    }
    let product_collection = v.string(obj, "productCollection").unwrap_or_default();
    if product_collection.is_empty() && obj.contains_key("productCollection") {
        v.push("productCollection", IssueKind::InvariantViolation, "must be non-empty");
    }

    let inputs = validate_inputs(obj.get("inputs"), &mut v);

    if !v.issues.is_empty() {
        return Err(v.issues);
    }

    Ok(JobDefinition {
        id,
        name,
        description,
        created,
        last_finished_execution,
        status,
        execution: ExecutionSpec { pattern },
        temporal_coverage: TemporalCoverage { duration },
        area_of_interest: AreaOfInterest {
            extent: extent.expect("no issues means extent present"),
        },
        processing_tool,
        product_collection,
        inputs,
    })
}

fn validate_inputs(raw: Option<&Value>, v: &mut Validator) -> Vec<SubsetDefinition> {
    let items = match raw {
        None => {
            v.push("inputs", IssueKind::MissingField, "required field is missing");
            return Vec::new();
        }
        Some(Value::Array(items)) => items,
        Some(_) => {
            v.push("inputs", IssueKind::BadFormat, "expected an array");
            return Vec::new();
        }
    };
    if items.is_empty() {
        v.push("inputs", IssueKind::InvariantViolation, "inputs must be non-empty");
        return Vec::new();
    }

    let mut seen_identifiers = HashSet::new();
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let prefix = format!("inputs[{i}]");
        let Some(obj) = item.as_object() else {
            v.push(prefix, IssueKind::BadFormat, "expected an object");
            continue;
        };

        let source_type = match obj.get("sourceType").and_then(Value::as_str) {
            Some(s @ ("CopernicusSubsetDefinition" | "ProductSubsetDefinition")) => s,
            Some(other) => {
                v.push(
                    format!("{prefix}.sourceType"),
                    IssueKind::BadFormat,
                    format!("unknown source type {other:?}"),
                );
                continue;
            }
            None => {
                v.push(format!("{prefix}.sourceType"), IssueKind::MissingField, "required field is missing");
                continue;
            }
        };

        let identifier = match obj.get("identifier").and_then(Value::as_str) {
            Some(id) if !id.is_empty() => id.to_string(),
            Some(_) => {
                v.push(format!("{prefix}.identifier"), IssueKind::InvariantViolation, "must be non-empty");
                continue;
            }
            None => {
                v.push(format!("{prefix}.identifier"), IssueKind::MissingField, "required field is missing");
                continue;
            }
        };
        if !seen_identifiers.insert(identifier.clone()) {
            v.push(
                format!("{prefix}.identifier"),
                IssueKind::InvariantViolation,
                format!("duplicate input identifier {identifier:?}"),
            );
        }

        match source_type {
            "CopernicusSubsetDefinition" => {
                v.reject_unknown(
                    obj,
                    &["sourceType", "identifier", "satellite", "maximumCloudCoverage"],
                    &prefix,
                );
                let satellite = match obj.get("satellite").and_then(Value::as_str) {
                    Some(s) if !s.is_empty() => s.to_string(),
                    _ => {
                        v.push(
                            format!("{prefix}.satellite"),
                            IssueKind::MissingField,
                            "required for CopernicusSubsetDefinition",
                        );
                        continue;
                    }
                };
                let maximum_cloud_coverage = match obj.get("maximumCloudCoverage") {
                    None | Some(Value::Null) => None,
                    Some(raw) => match raw.as_f64() {
                        Some(c) if (0.0..=100.0).contains(&c) => Some(c),
                        _ => {
                            v.push(
                                format!("{prefix}.maximumCloudCoverage"),
                                IssueKind::InvariantViolation,
                                "must be a percentage in [0, 100]",
                            );
                            None
                        }
                    },
                };
                out.push(SubsetDefinition::CopernicusSubsetDefinition {
                    identifier,
                    satellite,
                    maximum_cloud_coverage,
                });
            }
            _ => {
                v.reject_unknown(obj, &["sourceType", "identifier", "productCollection"], &prefix);
                let product_collection = match obj.get("productCollection").and_then(Value::as_str) {
                    Some(c) if !c.is_empty() => c.to_string(),
                    _ => {
                        v.push(
                            format!("{prefix}.productCollection"),
                            IssueKind::MissingField,
                            "required for ProductSubsetDefinition",
                        );
                        continue;
                    }
                };
                out.push(SubsetDefinition::ProductSubsetDefinition {
                    identifier,
                    product_collection,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Data envelopes and resource references
// ---------------------------------------------------------------------------

/// Indexed metadata describing one available dataset (satellite scene or
/// generated product) plus its access reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEnvelope {
    #[serde(rename = "envelopeId")]
    pub envelope_id: Uuid,
    #[serde(rename = "sourceType")]
    pub source_type: SourceType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub satellite: Option<String>,
    #[serde(rename = "productCollection", skip_serializing_if = "Option::is_none", default)]
    pub product_collection: Option<String>,
    #[serde(rename = "sensingTime", with = "ts_millis")]
    pub sensing_time: DateTime<Utc>,
    #[serde(rename = "spatialFootprint")]
    pub spatial_footprint: BoundingBox,
    #[serde(rename = "cloudCoverage", skip_serializing_if = "Option::is_none", default)]
    pub cloud_coverage: Option<f64>,
    #[serde(rename = "processingLevel", skip_serializing_if = "Option::is_none", default)]
    pub processing_level: Option<String>,
    #[serde(rename = "accessUrl")]
    pub access_url: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
    #[serde(with = "ts_millis")]
    pub discovered: DateTime<Utc>,
}

impl DataEnvelope {
    /// Checks envelope invariants: the access URL must parse and cloud
    /// coverage, when present, must be a percentage.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let mut issues = Vec::new();
        if self.access_url.is_empty() || Url::parse(&self.access_url).is_err() {
            issues.push(ValidationIssue::new(
                "accessUrl",
                IssueKind::InvariantViolation,
                format!("not a URL: {:?}", self.access_url),
            ));
        }
        if let Some(c) = self.cloud_coverage {
            if !(0.0..=100.0).contains(&c) {
                issues.push(ValidationIssue::new(
                    "cloudCoverage",
                    IssueKind::InvariantViolation,
                    "must be a percentage in [0, 100]",
                ));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

/// A resolved, fetchable pointer handed to the process runner instead of
/// payload bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReference {
    #[serde(rename = "inputIdentifier")]
    pub input_identifier: String,
    pub url: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
    #[serde(rename = "sensingTime", with = "ts_millis")]
    pub sensing_time: DateTime<Utc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    pub(crate) fn listing_style_document() -> Value {
        serde_json::json!({
            "id": "851956cb-0975-407c-bada-a08247f13c5c",
            "name": "Land cover classification catchment area",
            "description": "Monthly executed land cover classification.",
            "created": "2020-07-07T12:03:26.006Z",
            "lastFinishedExecution": "2020-07-07T14:00:00.000Z",
            "status": "waiting",
            "execution": { "pattern": "0 0 1 * *" },
            "temporalCoverage": { "duration": "P14D" },
            "areaOfInterest": { "extent": [6.931, 50.985, 7.607, 51.319] },
            "processingTool": "de.hsbo.wacodis.land_cover_classification",
            "productCollection": "land-cover-classification",
            "inputs": [
                {
                    "sourceType": "CopernicusSubsetDefinition",
                    "identifier": "opticalImage",
                    "maximumCloudCoverage": 20.0,
                    "satellite": "sentinel-2"
                }
            ]
        })
    }

    fn defaults() -> JobDefaults {
        JobDefaults {
            id: Uuid::nil(),
            created: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    #[test]
    fn full_document_validates() {
        let job = validate_job_definition(&listing_style_document(), defaults()).unwrap();
        assert_eq!(job.id.to_string(), "851956cb-0975-407c-bada-a08247f13c5c");
        assert_eq!(job.execution.pattern, "0 0 1 * *");
        assert_eq!(job.temporal_coverage.duration, "P14D");
        assert_eq!(job.extent().extent(), [6.931, 50.985, 7.607, 51.319]);
        assert_eq!(job.status, JobStatus::Waiting);
        match &job.inputs[0] {
            SubsetDefinition::CopernicusSubsetDefinition {
                identifier,
                satellite,
                maximum_cloud_coverage,
            } => {
                assert_eq!(identifier, "opticalImage");
                assert_eq!(satellite, "sentinel-2");
                assert_eq!(*maximum_cloud_coverage, Some(20.0));
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut doc = listing_style_document();
        doc["inputs"] = serde_json::json!([]);
        let issues = validate_job_definition(&doc, defaults()).unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.field == "inputs" && i.kind == IssueKind::InvariantViolation));
    }

    #[test]
    fn flipped_extent_rejected() {
        let mut doc = listing_style_document();
        doc["areaOfInterest"]["extent"] = serde_json::json!([7.607, 50.985, 6.931, 51.319]);
        let issues = validate_job_definition(&doc, defaults()).unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.field == "areaOfInterest" && i.kind == IssueKind::InvariantViolation));
        assert!(issues[0].message.contains("minLon"));
    }

    #[test]
    fn unknown_fields_named() {
        let mut doc = listing_style_document();
        doc["spurious"] = serde_json::json!(1);
        doc["execution"]["timezone"] = serde_json::json!("UTC");
        let issues = validate_job_definition(&doc, defaults()).unwrap_err();
        let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
        assert!(fields.contains(&"spurious"));
        assert!(fields.contains(&"execution.timezone"));
    }

    #[test]
    fn all_violations_reported_not_just_first() {
        let doc = serde_json::json!({
            "name": "x",
            "description": "",
            "execution": { "pattern": "61 0 1 * *" },
            "temporalCoverage": { "duration": "PT0S" },
            "areaOfInterest": { "extent": [1.0, 2.0, 0.0, 3.0] },
            "processingTool": "t",
            "productCollection": "c",
            "inputs": []
        });
        let issues = validate_job_definition(&doc, defaults()).unwrap_err();
        let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
        assert!(fields.contains(&"execution.pattern"));
        assert!(fields.contains(&"temporalCoverage.duration"));
        assert!(fields.contains(&"areaOfInterest"));
        assert!(fields.contains(&"inputs"));
    }

    #[test]
    fn validation_is_idempotent_on_serialized_output() {
        let job = validate_job_definition(&listing_style_document(), defaults()).unwrap();
        let round = serde_json::to_value(&job).unwrap();
        let again = validate_job_definition(&round, defaults()).unwrap();
        assert_eq!(job, again);
        assert_eq!(round, serde_json::to_value(&again).unwrap());
    }

    #[test]
    fn duration_paper_values() {
        assert_eq!(parse_iso_duration("P14D").unwrap(), 1_209_600);
        assert_eq!(parse_iso_duration("PT1H").unwrap(), 3600);
        assert_eq!(parse_iso_duration("P1DT12H").unwrap(), 129_600);
    }

    #[test]
    fn duration_calendar_approximations() {
        assert_eq!(parse_iso_duration("P1M").unwrap(), 30 * 86_400);
        assert_eq!(parse_iso_duration("P1Y").unwrap(), 365 * 86_400);
        assert_eq!(parse_iso_duration("P2W").unwrap(), 14 * 86_400);
    }

    #[test]
    fn duration_errors() {
        assert_eq!(parse_iso_duration("PT0S"), Err(DurationError::ZeroDuration));
        assert!(matches!(parse_iso_duration("14D"), Err(DurationError::BadFormat(_))));
        assert!(matches!(parse_iso_duration("P"), Err(DurationError::BadFormat(_))));
        assert!(matches!(parse_iso_duration("P14DT"), Err(DurationError::BadFormat(_))));
        assert!(matches!(parse_iso_duration("PT1H30"), Err(DurationError::BadFormat(_))));
        assert!(matches!(parse_iso_duration("P1D2H"), Err(DurationError::BadFormat(_))));
    }

    #[test]
    fn bbox_examples() {
        let aoi = BoundingBox::new(6.931, 50.985, 7.607, 51.319).unwrap();
        assert!(aoi.intersects(&aoi));
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert!(!a.intersects(&b));
        // Shared corner counts: boxes are closed.
        let c = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert!(a.intersects(&c));
    }

    #[test]
    fn window_from_job_document() {
        let end = Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap();
        let start = end - chrono::Duration::seconds(parse_iso_duration("P14D").unwrap() as i64);
        assert_eq!(start, Utc.with_ymd_and_hms(2020, 6, 23, 14, 0, 0).unwrap());
        let w = TimeWindow::new(start, end).unwrap();
        assert!(w.contains(Utc.with_ymd_and_hms(2020, 7, 1, 0, 0, 0).unwrap()));
        assert!(w.contains(w.start));
        assert!(w.contains(w.end));
        assert!(!w.contains(w.end + chrono::Duration::seconds(1)));
    }

    #[test]
    fn envelope_validation() {
        let mut env = DataEnvelope {
            envelope_id: Uuid::new_v4(),
            source_type: SourceType::Copernicus,
            satellite: Some("sentinel-2".into()),
            product_collection: None,
            sensing_time: Utc.with_ymd_and_hms(2020, 7, 1, 10, 0, 0).unwrap(),
            spatial_footprint: BoundingBox::new(7.0, 51.0, 7.2, 51.2).unwrap(),
            cloud_coverage: Some(15.0),
            processing_level: Some("Level-2A".into()),
            access_url: "file:///data/scene.asc".into(),
            media_type: "application/x-ascii-grid".into(),
            discovered: Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap(),
        };
        env.validate().unwrap();
        env.cloud_coverage = Some(120.0);
        assert!(env.validate().is_err());
        env.cloud_coverage = Some(15.0);
        env.access_url = "not a url".into();
        assert!(env.validate().is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (
            -180.0f64..179.0,
            -90.0f64..89.0,
            0.0f64..1.0,
            0.0f64..1.0,
        )
            .prop_map(|(lon, lat, dlon, dlat)| {
                BoundingBox::new(lon, lat, (lon + dlon).min(180.0), (lat + dlat).min(90.0)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn intersection_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(a.intersects(&b), b.intersects(&a));
        }

        #[test]
        fn duration_round_trips(days in 0u64..400, hours in 0u64..24, minutes in 0u64..60, seconds in 0u64..60) {
            let total = days * 86_400 + hours * 3600 + minutes * 60 + seconds;
            prop_assume!(total > 0);
            let text = format_iso_duration(total);
            prop_assert_eq!(parse_iso_duration(&text).unwrap(), total);
        }
    }
}
