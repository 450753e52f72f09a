//! In-process topic-routing publish/subscribe bus coupling all components.
//!
//! Routing keys are dot-separated lowercase tokens; subscription patterns
//! use the AMQP-style wildcards `*` (exactly one segment) and `#` (zero or
//! more segments). Delivery is at-least-once: consumers must dedupe on
//! `messageId`. Publishing never blocks on slow consumers; each subscription
//! owns a bounded buffer and overflow is reported as an error rather than
//! dropped silently.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde_json::Value;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::clock::Clock;

/// Routing-key namespace used by the pipeline components.
pub mod topics {
    pub const JOBS_CREATED: &str = "wacodis.jobs.created";
    pub const JOBS_DELETED: &str = "wacodis.jobs.deleted";
    pub const DATA_AVAILABLE: &str = "wacodis.data.available";
    pub const EXECUTIONS_STARTED: &str = "wacodis.executions.started";
    pub const EXECUTIONS_FAILED: &str = "wacodis.executions.failed";
    pub const PRODUCTS_NEW: &str = "wacodis.products.new";

    pub const ALL: [&str; 6] = [
        JOBS_CREATED,
        JOBS_DELETED,
        DATA_AVAILABLE,
        EXECUTIONS_STARTED,
        EXECUTIONS_FAILED,
        PRODUCTS_NEW,
    ];
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("broker is stopped")]
    Stopped,
    #[error("invalid routing key {0:?}: {1}")]
    InvalidKey(String, String),
    #[error("invalid subscription pattern {0:?}: {1}")]
    InvalidPattern(String, String),
    #[error("buffer overflow for consumer {consumer:?} on key {key:?}")]
    BufferOverflow { consumer: String, key: String },
}

/// Dot-separated channel address: 1-8 segments of `[a-z0-9_]+`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingKey {
    raw: String,
}

fn valid_token(tok: &str) -> bool {
    !tok.is_empty()
        && tok
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl FromStr for RoutingKey {
    type Err = BrokerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let segments: Vec<&str> = s.split('.').collect();
        if segments.is_empty() || segments.len() > 8 {
            return Err(BrokerError::InvalidKey(s.into(), "1-8 segments required".into()));
        }
        for tok in &segments {
            if !valid_token(tok) {
                return Err(BrokerError::InvalidKey(
                    s.into(),
                    format!("bad segment {tok:?}"),
                ));
            }
        }
        Ok(RoutingKey { raw: s.to_string() })
    }
}

impl RoutingKey {
    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.raw.split('.')
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PatternSegment {
    Token(String),
    Single,
    Rest,
}

/// Topic pattern where `*` consumes exactly one segment and `#` zero or
/// more. At most one `#` is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionPattern {
    raw: String,
    segments: Vec<PatternSegment>,
}

impl FromStr for SubscriptionPattern {
    type Err = BrokerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut segments = Vec::new();
        let mut rest_seen = false;
        for tok in s.split('.') {
            match tok {
                "*" => segments.push(PatternSegment::Single),
                "#" => {
                    if rest_seen {
                        return Err(BrokerError::InvalidPattern(
                            s.into(),
                            "at most one '#' segment".into(),
                        ));
                    }
                    rest_seen = true;
                    segments.push(PatternSegment::Rest);
                }
                tok if valid_token(tok) => segments.push(PatternSegment::Token(tok.to_string())),
                tok => {
                    return Err(BrokerError::InvalidPattern(
                        s.into(),
                        format!("bad segment {tok:?}"),
                    ))
                }
            }
        }
        if segments.is_empty() {
            return Err(BrokerError::InvalidPattern(s.into(), "empty pattern".into()));
        }
        Ok(SubscriptionPattern {
            raw: s.to_string(),
            segments,
        })
    }
}

impl fmt::Display for SubscriptionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl SubscriptionPattern {
    /// Standard topic-wildcard match, deterministic for all inputs.
    pub fn matches(&self, key: &RoutingKey) -> bool {
        let key_segments: Vec<&str> = key.segments().collect();
        match_segments(&self.segments, &key_segments)
    }
}

fn match_segments(pattern: &[PatternSegment], key: &[&str]) -> bool {
    match pattern.first() {
        None => key.is_empty(),
        Some(PatternSegment::Token(tok)) => {
            key.first() == Some(&tok.as_str()) && match_segments(&pattern[1..], &key[1..])
        }
        Some(PatternSegment::Single) => {
            !key.is_empty() && match_segments(&pattern[1..], &key[1..])
        }
        Some(PatternSegment::Rest) => (0..=key.len())
            .any(|consumed| match_segments(&pattern[1..], &key[consumed..])),
    }
}

/// Enveloped pub/sub message.
#[derive(Debug, Clone)]
pub struct BrokerMessage {
    pub message_id: Uuid,
    pub routing_key: RoutingKey,
    pub timestamp: DateTime<Utc>,
    pub payload: Value,
    /// Global publish ordinal; strictly increasing per published message.
    pub sequence: u64,
}

struct SubscriberEntry {
    id: u64,
    consumer: String,
    pattern: SubscriptionPattern,
    sender: mpsc::Sender<BrokerMessage>,
}

struct BrokerState {
    subscribers: Vec<SubscriberEntry>,
    stopped: bool,
}

/// Topic-routing bus shared by all components of one process. Cloning is
/// cheap and yields a handle onto the same bus.
#[derive(Clone)]
pub struct Broker {
    state: Arc<Mutex<BrokerState>>,
    clock: Clock,
    buffer_size: usize,
    /// Test/chaos knob: deliver every message twice to every matching
    /// subscription to exercise at-least-once tolerance.
    duplicate_delivery: bool,
    sequence: Arc<AtomicU64>,
    next_subscriber: Arc<AtomicU64>,
}

/// Receiving side of one subscription; messages arrive in publish order.
pub struct Subscription {
    pub consumer: String,
    pub pattern: SubscriptionPattern,
    id: u64,
    receiver: mpsc::Receiver<BrokerMessage>,
    state: Arc<Mutex<BrokerState>>,
}

impl Subscription {
    pub async fn recv(&mut self) -> Option<BrokerMessage> {
        self.receiver.recv().await
    }

    pub fn try_recv(&mut self) -> Option<BrokerMessage> {
        self.receiver.try_recv().ok()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Ok(mut state) = self.state.lock() {
            state.subscribers.retain(|s| s.id != self.id);
        }
    }
}

impl Broker {
    pub fn new(clock: Clock, buffer_size: usize, duplicate_delivery: bool) -> Self {
        Broker {
            state: Arc::new(Mutex::new(BrokerState {
                subscribers: Vec::new(),
                stopped: false,
            })),
            clock,
            buffer_size: buffer_size.max(1),
            duplicate_delivery,
            sequence: Arc::new(AtomicU64::new(0)),
            next_subscriber: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Enqueues the payload for every currently matching subscription and
    /// returns the fresh message id. Messages matching no subscription are
    /// dropped. Never blocks; a full subscriber buffer is reported as
    /// [`BrokerError::BufferOverflow`] after remaining deliveries complete.
    pub fn publish(&self, key: &str, payload: Value) -> Result<Uuid, BrokerError> {
        let key: RoutingKey = key.parse()?;
        let message = BrokerMessage {
            message_id: Uuid::new_v4(),
            routing_key: key.clone(),
            timestamp: self.clock.now(),
            payload,
            sequence: self.sequence.fetch_add(1, Ordering::SeqCst),
        };

        let mut state = self.state.lock().expect("broker poisoned");
        if state.stopped {
            return Err(BrokerError::Stopped);
        }

        let copies = if self.duplicate_delivery { 2 } else { 1 };
        let mut overflow: Option<String> = None;
        let mut closed: Vec<u64> = Vec::new();
        for sub in &state.subscribers {
            if !sub.pattern.matches(&key) {
                continue;
            }
            for _ in 0..copies {
                match sub.sender.try_send(message.clone()) {
                    Ok(()) => {}
                    Err(mpsc::error::TrySendError::Full(_)) => {
                        overflow.get_or_insert_with(|| sub.consumer.clone());
                    }
                    Err(mpsc::error::TrySendError::Closed(_)) => {
                        closed.push(sub.id);
                    }
                }
            }
        }
        state.subscribers.retain(|s| !closed.contains(&s.id));

        match overflow {
            Some(consumer) => Err(BrokerError::BufferOverflow {
                consumer,
                key: key.as_str().to_string(),
            }),
            None => Ok(message.message_id),
        }
    }

    pub fn subscribe(&self, pattern: &str, consumer: &str) -> Result<Subscription, BrokerError> {
        let pattern: SubscriptionPattern = pattern.parse()?;
        let mut state = self.state.lock().expect("broker poisoned");
        if state.stopped {
            return Err(BrokerError::Stopped);
        }
        let (sender, receiver) = mpsc::channel(self.buffer_size);
        let id = self.next_subscriber.fetch_add(1, Ordering::SeqCst);
        state.subscribers.push(SubscriberEntry {
            id,
            consumer: consumer.to_string(),
            pattern: pattern.clone(),
            sender,
        });
        Ok(Subscription {
            consumer: consumer.to_string(),
            pattern,
            id,
            receiver,
            state: Arc::clone(&self.state),
        })
    }

    /// Number of live subscriptions whose pattern matches `key`.
    pub fn matching_subscribers(&self, key: &str) -> usize {
        let Ok(key) = key.parse::<RoutingKey>() else {
            return 0;
        };
        let state = self.state.lock().expect("broker poisoned");
        state
            .subscribers
            .iter()
            .filter(|s| s.pattern.matches(&key))
            .count()
    }

    pub fn duplicate_delivery(&self) -> bool {
        self.duplicate_delivery
    }

    /// Stops the bus: subsequent publish/subscribe calls fail and all open
    /// subscriptions end after draining.
    pub fn stop(&self) {
        let mut state = self.state.lock().expect("broker poisoned");
        state.stopped = true;
        state.subscribers.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn broker() -> Broker {
        Broker::new(Clock::real(), 64, false)
    }

    #[tokio::test]
    async fn exact_and_wildcard_delivery() {
        let b = broker();
        let mut exact = b.subscribe("wacodis.products.new", "exact").unwrap();
        let mut star = b.subscribe("wacodis.*.new", "star").unwrap();
        let mut hash = b.subscribe("wacodis.#", "hash").unwrap();

        let id = b
            .publish("wacodis.products.new", serde_json::json!({"n": 1}))
            .unwrap();

        for sub in [&mut exact, &mut star, &mut hash] {
            let msg = sub.recv().await.unwrap();
            assert_eq!(msg.message_id, id, "fan-out copies share the message id");
            assert_eq!(msg.payload, serde_json::json!({"n": 1}));
        }
    }

    #[tokio::test]
    async fn star_consumes_exactly_one_segment() {
        let b = broker();
        let mut sub = b.subscribe("wacodis.*.new", "s").unwrap();
        b.publish("wacodis.products.new", Value::Null).unwrap();
        b.publish("wacodis.a.b.new", Value::Null).unwrap();
        let got = sub.recv().await.unwrap();
        assert_eq!(got.routing_key.as_str(), "wacodis.products.new");
        assert!(sub.try_recv().is_none());
    }

    #[test]
    fn hash_matches_zero_or_more() {
        let pattern: SubscriptionPattern = "wacodis.#".parse().unwrap();
        for (key, expected) in [
            ("wacodis", true),
            ("wacodis.jobs.created", true),
            ("other.jobs", false),
        ] {
            assert_eq!(pattern.matches(&key.parse().unwrap()), expected, "{key}");
        }
    }

    /// Enumerates every key of up to 3 segments over a 3-token alphabet
    /// against an independent recursive matcher.
    #[test]
    fn hash_semantics_enumerated_against_oracle() {
        fn oracle(pattern: &[&str], key: &[&str]) -> bool {
            match (pattern.first(), key.first()) {
                (None, None) => true,
                (None, Some(_)) => false,
                (Some(&"#"), _) => {
                    oracle(&pattern[1..], key) || (!key.is_empty() && oracle(pattern, &key[1..]))
                }
                (Some(&"*"), Some(_)) => oracle(&pattern[1..], &key[1..]),
                (Some(p), Some(k)) => p == k && oracle(&pattern[1..], &key[1..]),
                (Some(_), None) => false,
            }
        }

        let alphabet = ["wacodis", "jobs", "a"];
        let mut keys: Vec<Vec<&str>> = Vec::new();
        for a in alphabet {
            keys.push(vec![a]);
            for b in alphabet {
                keys.push(vec![a, b]);
                for c in alphabet {
                    keys.push(vec![a, b, c]);
                }
            }
        }
        let patterns = [
            vec!["wacodis", "#"],
            vec!["#"],
            vec!["#", "jobs"],
            vec!["wacodis", "*"],
            vec!["*", "#", "a"],
            vec!["wacodis", "jobs", "a"],
        ];
        for pat in &patterns {
            let pattern: SubscriptionPattern = pat.join(".").parse().unwrap();
            for key in &keys {
                let routing: RoutingKey = key.join(".").parse().unwrap();
                assert_eq!(
                    pattern.matches(&routing),
                    oracle(pat, key),
                    "pattern {pat:?} key {key:?}"
                );
            }
        }
    }

    #[tokio::test]
    async fn publish_order_preserved_per_subscription() {
        let b = broker();
        let mut sub = b.subscribe("k.#", "s").unwrap();
        for i in 0..10 {
            b.publish("k.x", serde_json::json!(i)).unwrap();
        }
        let mut last_seq = None;
        for i in 0..10 {
            let msg = sub.recv().await.unwrap();
            assert_eq!(msg.payload, serde_json::json!(i));
            if let Some(prev) = last_seq {
                assert!(msg.sequence > prev);
            }
            last_seq = Some(msg.sequence);
        }
    }

    #[tokio::test]
    async fn no_subscriber_drop_is_silent_success() {
        let b = broker();
        assert!(b.publish("nobody.home", Value::Null).is_ok());
    }

    #[tokio::test]
    async fn no_replay_for_late_subscribers() {
        let b = broker();
        b.publish("k.x", Value::Null).unwrap();
        let mut sub = b.subscribe("k.#", "late").unwrap();
        assert!(sub.try_recv().is_none());
    }

    #[tokio::test]
    async fn overflow_reported_not_silent() {
        let b = Broker::new(Clock::real(), 1, false);
        let _sub = b.subscribe("k.x", "slow").unwrap();
        b.publish("k.x", Value::Null).unwrap();
        let err = b.publish("k.x", Value::Null).unwrap_err();
        assert!(matches!(err, BrokerError::BufferOverflow { .. }));
    }

    #[tokio::test]
    async fn stopped_broker_rejects() {
        let b = broker();
        b.stop();
        assert_eq!(b.publish("k.x", Value::Null), Err(BrokerError::Stopped));
        assert!(matches!(b.subscribe("k.x", "s"), Err(BrokerError::Stopped)));
    }

    #[tokio::test]
    async fn duplicate_delivery_mode_delivers_twice() {
        let b = Broker::new(Clock::real(), 16, true);
        let mut sub = b.subscribe("k.x", "s").unwrap();
        let id = b.publish("k.x", Value::Null).unwrap();
        let first = sub.recv().await.unwrap();
        let second = sub.recv().await.unwrap();
        assert_eq!(first.message_id, id);
        assert_eq!(second.message_id, id);
    }

    #[test]
    fn key_validation() {
        assert!("wacodis.jobs.created".parse::<RoutingKey>().is_ok());
        assert!("Wacodis.jobs".parse::<RoutingKey>().is_err());
        assert!("a..b".parse::<RoutingKey>().is_err());
        assert!("a.b.c.d.e.f.g.h.i".parse::<RoutingKey>().is_err());
        assert!("#.#".parse::<SubscriptionPattern>().is_err());
    }

    fn arb_key_segments() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            proptest::sample::select(vec!["a", "b", "jobs", "x1"]),
            1..5,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    fn arb_pattern_segments() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            proptest::sample::select(vec!["a", "b", "jobs", "x1", "*"]),
            1..5,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        /// Fan-out completeness against a brute-force matcher for random
        /// pattern/key pairs (with an optional trailing '#').
        #[test]
        fn matcher_agrees_with_bruteforce(
            key in arb_key_segments(),
            mut pat in arb_pattern_segments(),
            hash_tail in proptest::bool::ANY,
        ) {
            fn brute(pattern: &[String], key: &[&str]) -> bool {
                match pattern.first() {
                    None => key.is_empty(),
                    Some(p) if p == "#" =>
                        brute(&pattern[1..], key) || (!key.is_empty() && brute(pattern, &key[1..])),
                    Some(p) if p == "*" => !key.is_empty() && brute(&pattern[1..], &key[1..]),
                    Some(p) => key.first() == Some(&p.as_str()) && brute(&pattern[1..], &key[1..]),
                }
            }
            if hash_tail {
                pat.push("#".to_string());
            }
            let pattern: SubscriptionPattern = pat.join(".").parse().unwrap();
            let routing: RoutingKey = key.join(".").parse().unwrap();
            let key_refs: Vec<&str> = key.iter().map(String::as_str).collect();
            prop_assert_eq!(pattern.matches(&routing), brute(&pat, &key_refs));
        }
    }
}
