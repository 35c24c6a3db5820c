//! Structured audit events. Every data-modifying step records one so that
//! marker additions and conflict resolutions are machine-auditable; the CLI
//! prints them as one JSON object per line.

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub event: String,
    pub stage: String,
    #[serde(flatten)]
    pub detail: serde_json::Map<String, Value>,
}

impl Event {
    pub fn new(stage: &str, event: &str) -> Self {
        Event { event: event.to_string(), stage: stage.to_string(), detail: serde_json::Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.detail.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn extend(&mut self, other: EventLog) {
        self.events.extend(other.events);
    }
}
