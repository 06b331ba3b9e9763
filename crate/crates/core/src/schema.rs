//! Event and entity definition schemas, plus the instance types they govern.
//!
//! The on-disk document uses the capitalised field names of the original
//! definition layout (`EventType`, `PropertyName`, `AggregateExpression`, ...).
//! Those are parsed into [`wire`] structs first and then lowered into the
//! domain types, so unknown operators and property types surface as
//! dedicated errors instead of generic serde messages.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Group-by keys resolved from event metadata when no property of that name exists.
pub const BUILTIN_GROUP_KEYS: &[&str] = &["user", "topic", "session", "event_type"];

/// Event property whose comma or semicolon separated values become keyword
/// graph links instead of record text.
pub const KEYWORDS_PROPERTY: &str = "keywords";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropType {
    String,
    Number,
    Integer,
    Boolean,
    Timestamp,
}

impl PropType {
    pub fn is_numeric(self) -> bool {
        matches!(self, PropType::Number | PropType::Integer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PropType::String => "string",
            PropType::Number => "number",
            PropType::Integer => "integer",
            PropType::Boolean => "boolean",
            PropType::Timestamp => "timestamp",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "string" => Some(PropType::String),
            "number" => Some(PropType::Number),
            "integer" => Some(PropType::Integer),
            "boolean" => Some(PropType::Boolean),
            "timestamp" => Some(PropType::Timestamp),
            _ => None,
        }
    }
}

impl fmt::Display for PropType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The closed operator algebra for entity updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregateOp {
    Sum,
    Count,
    Max,
    Avg,
    LlmMerge,
    TimeCompress,
}

impl AggregateOp {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregateOp::Sum => "SUM",
            AggregateOp::Count => "COUNT",
            AggregateOp::Max => "MAX",
            AggregateOp::Avg => "AVG",
            AggregateOp::LlmMerge => "LLM_MERGE",
            AggregateOp::TimeCompress => "TIME_COMPRESS",
        }
    }

    pub fn is_statistical(self) -> bool {
        matches!(
            self,
            AggregateOp::Sum | AggregateOp::Count | AggregateOp::Max | AggregateOp::Avg
        )
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "SUM" => Some(AggregateOp::Sum),
            "COUNT" => Some(AggregateOp::Count),
            "MAX" => Some(AggregateOp::Max),
            "AVG" => Some(AggregateOp::Avg),
            "LLM_MERGE" => Some(AggregateOp::LlmMerge),
            "TIME_COMPRESS" => Some(AggregateOp::TimeCompress),
            _ => None,
        }
    }
}

impl fmt::Display for AggregateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed property value. Timestamps are carried as `Integer` epoch milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Boolean(bool),
    Integer(i64),
    Number(f64),
    String(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    /// Plain-text rendering used in prompts, group keys and record text.
    pub fn render(&self) -> String {
        match self {
            Value::Boolean(b) => b.to_string(),
            Value::Integer(i) => i.to_string(),
            Value::Number(n) => n.to_string(),
            Value::String(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub prop_type: PropType,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTypeDef {
    pub event_type: String,
    pub description: String,
    pub properties: Vec<PropertyDef>,
    pub instance_weight_field: Option<String>,
}

impl EventTypeDef {
    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Option<i64>,
    pub end: Option<i64>,
}

impl TimeWindow {
    /// Half-open `[start, end)`.
    pub fn contains(&self, ts: i64) -> bool {
        self.start.map_or(true, |s| ts >= s) && self.end.map_or(true, |e| ts < e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Filters {
    pub time_window: Option<TimeWindow>,
    pub equals: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateExpression {
    pub source_event_type: String,
    pub source_property: String,
    pub op: AggregateOp,
    pub group_by: Vec<String>,
    pub filters: Option<Filters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPropertyDef {
    pub property: PropertyDef,
    pub aggregate: AggregateExpression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTypeDef {
    pub entity_type: String,
    pub description: String,
    pub properties: Vec<EntityPropertyDef>,
}

impl EntityTypeDef {
    pub fn property(&self, name: &str) -> Option<&EntityPropertyDef> {
        self.properties.iter().find(|p| p.property.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySchema {
    pub tenant: String,
    pub version: u64,
    pub events: Vec<EventTypeDef>,
    pub entities: Vec<EntityTypeDef>,
}

impl MemorySchema {
    pub fn event(&self, event_type: &str) -> Option<&EventTypeDef> {
        self.events.iter().find(|e| e.event_type == event_type)
    }

    pub fn entity(&self, entity_type: &str) -> Option<&EntityTypeDef> {
        self.entities.iter().find(|e| e.entity_type == entity_type)
    }

    /// Number of memory types (event + entity definitions).
    pub fn type_count(&self) -> usize {
        self.events.len() + self.entities.len()
    }
}

/// A timestamped, schema-typed episodic memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventInstance {
    pub id: String,
    pub event_type: String,
    pub timestamp: i64,
    pub properties: BTreeMap<String, Value>,
    pub source_session: String,
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub ttl_deadline: Option<i64>,
}

impl EventInstance {
    /// Record text: `Type: k=v; k=v`. The `keywords` property only feeds the
    /// keyword graph and is left out.
    pub fn render_text(&self) -> String {
        let body = self
            .properties
            .iter()
            .filter(|(k, _)| k.as_str() != KEYWORDS_PROPERTY)
            .map(|(k, v)| format!("{k}={}", v.render()))
            .collect::<Vec<_>>()
            .join("; ");
        format!("{}: {body}", self.event_type)
    }

    /// Value used for grouping: a property of that name wins over metadata.
    pub fn group_value(&self, key: &str) -> Option<String> {
        if let Some(v) = self.properties.get(key) {
            return Some(v.render());
        }
        match key {
            "user" => self.user.clone(),
            "topic" => self.topic.clone(),
            "session" => Some(self.source_session.clone()),
            "event_type" => Some(self.event_type.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub sum: f64,
    pub count: u64,
}

/// A persistent, versioned state record materialized from events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInstance {
    pub id: String,
    pub entity_type: String,
    pub group_key: String,
    pub properties: BTreeMap<String, Value>,
    pub accumulators: BTreeMap<String, Accumulator>,
    pub version: u64,
    pub updated_at: i64,
}

impl EntityInstance {
    pub fn entity_id(entity_type: &str, group_key: &str) -> String {
        format!("{entity_type}/{group_key}")
    }

    /// A fresh instance: string fields empty, SUM/COUNT fields zero, MAX/AVG absent.
    pub fn genesis(def: &EntityTypeDef, group_key: &str, now: i64) -> Self {
        let mut properties = BTreeMap::new();
        for p in &def.properties {
            let initial = match (p.aggregate.op, p.property.prop_type) {
                (AggregateOp::LlmMerge | AggregateOp::TimeCompress, _) => {
                    Some(Value::String(String::new()))
                }
                (AggregateOp::Sum | AggregateOp::Count, PropType::Integer) => Some(Value::Integer(0)),
                (AggregateOp::Sum | AggregateOp::Count, _) => Some(Value::Number(0.0)),
                (AggregateOp::Max | AggregateOp::Avg, _) => None,
            };
            if let Some(v) = initial {
                properties.insert(p.property.name.clone(), v);
            }
        }
        EntityInstance {
            id: Self::entity_id(&def.entity_type, group_key),
            entity_type: def.entity_type.clone(),
            group_key: group_key.to_string(),
            properties,
            accumulators: BTreeMap::new(),
            version: 0,
            updated_at: now,
        }
    }

    pub fn render_text(&self) -> String {
        let body = self
            .properties
            .iter()
            .filter(|(_, v)| !matches!(v, Value::String(s) if s.is_empty()))
            .map(|(k, v)| format!("{k}={}", v.render()))
            .collect::<Vec<_>>()
            .join("; ");
        format!("{} [{}]: {body}", self.entity_type, self.group_key)
    }
}

/// Canonical group key: `key=value` pairs sorted by key, joined by `|`.
pub fn canonical_group_key<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, String)>,
{
    let sorted: BTreeMap<&str, String> = pairs.into_iter().collect();
    sorted
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("|")
}

/// Re-canonicalizes a group key string produced elsewhere (e.g. by an LLM).
pub fn normalize_group_key(raw: &str) -> String {
    let pairs = raw.split('|').filter(|p| !p.trim().is_empty()).map(|p| {
        let (k, v) = p.split_once('=').unwrap_or((p, ""));
        (k.trim(), v.trim().to_string())
    });
    canonical_group_key(pairs)
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown operator {name:?} at {path}")]
    UnknownOperator { name: String, path: String },
    #[error("unknown property type {name:?} at {path}")]
    UnknownPropertyType { name: String, path: String },
}

/// Parses a schema document.
pub fn parse_schema(document: &str) -> Result<MemorySchema, SchemaError> {
    let doc: wire::SchemaDoc = serde_json::from_str(document).map_err(|e| SchemaError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.lower()
}

/// Canonical serialization; `parse_schema(&serialize_schema(s)) == s`.
pub fn serialize_schema(schema: &MemorySchema) -> String {
    serde_json::to_string_pretty(&wire::SchemaDoc::from(schema)).expect("schema serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Validation outcome. `violations` empty means valid; `notes` are informational.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub notes: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, path: String, message: impl Into<String>) {
        self.violations.push(Violation {
            path,
            message: message.into(),
        });
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

/// Checks names, cross-references and operator/type compatibility. Total.
pub fn validate_schema(s: &MemorySchema) -> ValidationReport {
    let mut report = ValidationReport::default();
    if s.tenant.trim().is_empty() {
        report.violation("tenant".into(), "tenant is empty");
    }

    let mut seen_events = BTreeSet::new();
    for (i, ev) in s.events.iter().enumerate() {
        let path = format!("events[{i}]");
        if !is_identifier(&ev.event_type) {
            report.violation(format!("{path}.EventType"), "invalid identifier");
        }
        if !seen_events.insert(ev.event_type.as_str()) {
            report.violation(
                format!("{path}.EventType"),
                format!("duplicate event type {:?}", ev.event_type),
            );
        }
        if ev.description.trim().is_empty() {
            report.violation(format!("{path}.Description"), "description is empty");
        }
        check_properties(&mut report, &path, &ev.properties);
        if let Some(field) = &ev.instance_weight_field {
            match ev.property(field) {
                None => report.violation(
                    format!("{path}.InstanceWeightField"),
                    format!("unresolved instance weight field {field:?}"),
                ),
                Some(p) if !p.prop_type.is_numeric() => report.violation(
                    format!("{path}.InstanceWeightField"),
                    "instance weight field must be numeric",
                ),
                _ => {}
            }
        }
    }

    let mut seen_entities = BTreeSet::new();
    let mut feeds: HashMap<(&str, &str), Vec<String>> = HashMap::new();
    for (i, ent) in s.entities.iter().enumerate() {
        let path = format!("entities[{i}]");
        if !is_identifier(&ent.entity_type) {
            report.violation(format!("{path}.EntityType"), "invalid identifier");
        }
        if !seen_entities.insert(ent.entity_type.as_str()) {
            report.violation(
                format!("{path}.EntityType"),
                format!("duplicate entity type {:?}", ent.entity_type),
            );
        }
        if ent.description.trim().is_empty() {
            report.violation(format!("{path}.Description"), "description is empty");
        }
        check_properties(&mut report, &path, ent.properties.iter().map(|p| &p.property));

        for (j, p) in ent.properties.iter().enumerate() {
            let ppath = format!("{path}.Properties[{j}].AggregateExpression");
            let agg = &p.aggregate;
            let Some(source_event) = s.event(&agg.source_event_type) else {
                report.violation(
                    format!("{ppath}.EventType"),
                    format!("unresolved source_event_type {:?}", agg.source_event_type),
                );
                continue;
            };
            let Some(source) = source_event.property(&agg.source_property) else {
                report.violation(
                    format!("{ppath}.PropertyName"),
                    format!(
                        "unresolved source_property {:?} on {}",
                        agg.source_property, agg.source_event_type
                    ),
                );
                continue;
            };
            feeds
                .entry((agg.source_event_type.as_str(), agg.source_property.as_str()))
                .or_default()
                .push(format!("{}.{}", ent.entity_type, p.property.name));

            let target = p.property.prop_type;
            match agg.op {
                AggregateOp::Sum | AggregateOp::Avg | AggregateOp::Max => {
                    if !source.prop_type.is_numeric() {
                        report.violation(
                            format!("{ppath}.Op"),
                            format!("{} requires numeric source", agg.op),
                        );
                    }
                    if !target.is_numeric() {
                        report.violation(
                            format!("{ppath}.Op"),
                            format!("{} requires a numeric entity property", agg.op),
                        );
                    }
                    if agg.op == AggregateOp::Avg && target != PropType::Number {
                        report.violation(
                            format!("{ppath}.Op"),
                            "AVG requires a number entity property",
                        );
                    }
                }
                AggregateOp::Count => {
                    if !target.is_numeric() {
                        report.violation(
                            format!("{ppath}.Op"),
                            "COUNT requires a numeric entity property",
                        );
                    }
                }
                AggregateOp::LlmMerge | AggregateOp::TimeCompress => {
                    if source.prop_type != PropType::String {
                        report.violation(
                            format!("{ppath}.Op"),
                            format!("{} requires string source", agg.op),
                        );
                    }
                    if target != PropType::String {
                        report.violation(
                            format!("{ppath}.Op"),
                            format!("{} requires a string entity property", agg.op),
                        );
                    }
                }
            }

            if agg.group_by.is_empty() {
                report.violation(format!("{ppath}.GroupBy"), "group_by is empty");
            }
            for key in &agg.group_by {
                if source_event.property(key).is_none() && !BUILTIN_GROUP_KEYS.contains(&key.as_str())
                {
                    report.violation(
                        format!("{ppath}.GroupBy"),
                        format!("unresolved group key {key:?}"),
                    );
                }
            }
            if let Some(filters) = &agg.filters {
                if let Some(w) = &filters.time_window {
                    if let (Some(a), Some(b)) = (w.start, w.end) {
                        if a >= b {
                            report.violation(
                                format!("{ppath}.Filters.TimeWindow"),
                                "empty time window",
                            );
                        }
                    }
                }
                for name in filters.equals.keys() {
                    if source_event.property(name).is_none() {
                        report.violation(
                            format!("{ppath}.Filters.Equals"),
                            format!("unresolved filter property {name:?}"),
                        );
                    }
                }
            }
        }
    }

    let mut fanout: Vec<_> = feeds.into_iter().filter(|(_, v)| v.len() > 1).collect();
    fanout.sort();
    for ((ev, prop), targets) in fanout {
        report.notes.push(Violation {
            path: format!("{ev}.{prop}"),
            message: format!("feeds multiple entity properties: {}", targets.join(", ")),
        });
    }
    report
}

fn check_properties<'a>(
    report: &mut ValidationReport,
    path: &str,
    props: impl IntoIterator<Item = &'a PropertyDef>,
) {
    let mut seen = BTreeSet::new();
    for (j, p) in props.into_iter().enumerate() {
        let ppath = format!("{path}.Properties[{j}]");
        if p.name.trim().is_empty() {
            report.violation(format!("{ppath}.PropertyName"), "property name is empty");
        } else if !seen.insert(p.name.as_str()) {
            report.violation(
                format!("{ppath}.PropertyName"),
                format!("duplicate property {:?}", p.name),
            );
        }
        if p.description.trim().is_empty() {
            report.violation(format!("{ppath}.Description"), "description is empty");
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConformError {
    #[error("type mismatch on property {property}: expected {expected}, got {got}")]
    TypeMismatch {
        property: String,
        expected: PropType,
        got: String,
    },
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("timestamp must be positive, got {0}")]
    BadTimestamp(i64),
}

/// A conformed event plus the names of extra keys that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformed {
    pub event: EventInstance,
    pub dropped: Vec<String>,
}

fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "boolean",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// Coerces a raw value to the declared type where the conversion is lossless.
pub fn coerce(name: &str, raw: &serde_json::Value, ty: PropType) -> Result<Value, ConformError> {
    use serde_json::Value as J;
    let mismatch = || ConformError::TypeMismatch {
        property: name.to_string(),
        expected: ty,
        got: json_kind(raw).to_string(),
    };
    match (ty, raw) {
        (PropType::String, J::String(s)) => Ok(Value::String(s.clone())),
        (PropType::Number, J::Number(n)) => n.as_f64().map(Value::Number).ok_or_else(mismatch),
        (PropType::Number, J::String(s)) => s
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::Number)
            .ok_or_else(mismatch),
        (PropType::Integer | PropType::Timestamp, J::Number(n)) => {
            if let Some(i) = n.as_i64() {
                Ok(Value::Integer(i))
            } else {
                match n.as_f64() {
                    Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Ok(Value::Integer(f as i64)),
                    _ => Err(mismatch()),
                }
            }
        }
        (PropType::Integer | PropType::Timestamp, J::String(s)) => s
            .trim()
            .parse::<i64>()
            .map(Value::Integer)
            .map_err(|_| mismatch()),
        (PropType::Boolean, J::Bool(b)) => Ok(Value::Boolean(*b)),
        (PropType::Boolean, J::String(s)) => match s.trim() {
            "true" => Ok(Value::Boolean(true)),
            "false" => Ok(Value::Boolean(false)),
            _ => Err(mismatch()),
        },
        _ => Err(mismatch()),
    }
}

/// Conforms raw extracted values to an event definition.
pub fn conform_event(
    raw: &serde_json::Map<String, serde_json::Value>,
    def: &EventTypeDef,
    ts: i64,
) -> Result<Conformed, ConformError> {
    if ts <= 0 {
        return Err(ConformError::BadTimestamp(ts));
    }
    let mut properties = BTreeMap::new();
    for p in &def.properties {
        let v = match raw.get(&p.name) {
            None | Some(serde_json::Value::Null) => {
                return Err(ConformError::MissingProperty(p.name.clone()))
            }
            Some(v) => v,
        };
        properties.insert(p.name.clone(), coerce(&p.name, v, p.prop_type)?);
    }
    let dropped = raw
        .keys()
        .filter(|k| def.property(k).is_none())
        .cloned()
        .collect();

    let mut hasher = Sha256::new();
    hasher.update(def.event_type.as_bytes());
    hasher.update(ts.to_le_bytes());
    hasher.update(serde_json::to_vec(&properties).expect("values serialize"));
    let id = format!("evt-{}", &hex::encode(hasher.finalize())[..16]);

    Ok(Conformed {
        event: EventInstance {
            id,
            event_type: def.event_type.clone(),
            timestamp: ts,
            properties,
            source_session: String::new(),
            user: None,
            topic: None,
            ttl_deadline: None,
        },
        dropped,
    })
}

/// Document structs mirroring the external schema format field-for-field.
pub mod wire {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SchemaDoc {
        pub tenant: String,
        pub version: u64,
        #[serde(default)]
        pub events: Vec<EventDoc>,
        #[serde(default)]
        pub entities: Vec<EntityDoc>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PropertyDoc {
        #[serde(rename = "PropertyName")]
        pub name: String,
        #[serde(rename = "PropertyType")]
        pub prop_type: String,
        #[serde(rename = "Description")]
        pub description: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct EventDoc {
        #[serde(rename = "EventType")]
        pub event_type: String,
        #[serde(rename = "Description")]
        pub description: String,
        #[serde(rename = "Properties", default)]
        pub properties: Vec<PropertyDoc>,
        #[serde(
            rename = "InstanceWeightField",
            default,
            skip_serializing_if = "Option::is_none"
        )]
        pub instance_weight_field: Option<String>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct TimeWindowDoc {
        #[serde(rename = "Start", default, skip_serializing_if = "Option::is_none")]
        pub start: Option<i64>,
        #[serde(rename = "End", default, skip_serializing_if = "Option::is_none")]
        pub end: Option<i64>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct FiltersDoc {
        #[serde(rename = "TimeWindow", default, skip_serializing_if = "Option::is_none")]
        pub time_window: Option<TimeWindowDoc>,
        #[serde(rename = "Equals", default, skip_serializing_if = "BTreeMap::is_empty")]
        pub equals: BTreeMap<String, Value>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct AggregateDoc {
        #[serde(rename = "EventType")]
        pub event_type: String,
        #[serde(rename = "PropertyName")]
        pub property_name: String,
        #[serde(rename = "Op")]
        pub op: String,
        #[serde(rename = "GroupBy", default, skip_serializing_if = "Option::is_none")]
        pub group_by: Option<Vec<String>>,
        #[serde(rename = "Filters", default, skip_serializing_if = "Option::is_none")]
        pub filters: Option<FiltersDoc>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct EntityPropertyDoc {
        #[serde(rename = "PropertyName")]
        pub name: String,
        #[serde(rename = "PropertyType")]
        pub prop_type: String,
        #[serde(rename = "Description")]
        pub description: String,
        #[serde(rename = "AggregateExpression")]
        pub aggregate: AggregateDoc,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct EntityDoc {
        #[serde(rename = "EntityType")]
        pub entity_type: String,
        #[serde(rename = "Description")]
        pub description: String,
        #[serde(rename = "Properties", default)]
        pub properties: Vec<EntityPropertyDoc>,
    }

    fn prop_type(name: &str, path: String) -> Result<PropType, SchemaError> {
        PropType::parse(name).ok_or_else(|| SchemaError::UnknownPropertyType {
            name: name.to_string(),
            path,
        })
    }

    impl SchemaDoc {
        pub fn lower(self) -> Result<MemorySchema, SchemaError> {
            let mut events = Vec::with_capacity(self.events.len());
            for (i, e) in self.events.into_iter().enumerate() {
                let mut properties = Vec::with_capacity(e.properties.len());
                for (j, p) in e.properties.into_iter().enumerate() {
                    properties.push(PropertyDef {
                        prop_type: prop_type(
                            &p.prop_type,
                            format!("events[{i}].Properties[{j}].PropertyType"),
                        )?,
                        name: p.name,
                        description: p.description,
                    });
                }
                events.push(EventTypeDef {
                    event_type: e.event_type,
                    description: e.description,
                    properties,
                    instance_weight_field: e.instance_weight_field,
                });
            }
            let mut entities = Vec::with_capacity(self.entities.len());
            for (i, e) in self.entities.into_iter().enumerate() {
                let mut properties = Vec::with_capacity(e.properties.len());
                for (j, p) in e.properties.into_iter().enumerate() {
                    let path = format!("entities[{i}].Properties[{j}]");
                    let op = AggregateOp::parse(&p.aggregate.op).ok_or_else(|| {
                        SchemaError::UnknownOperator {
                            name: p.aggregate.op.clone(),
                            path: format!("{path}.AggregateExpression.Op"),
                        }
                    })?;
                    let filters = p.aggregate.filters.map(|f| Filters {
                        time_window: f.time_window.map(|w| TimeWindow {
                            start: w.start,
                            end: w.end,
                        }),
                        equals: f.equals,
                    });
                    properties.push(EntityPropertyDef {
                        property: PropertyDef {
                            prop_type: prop_type(&p.prop_type, format!("{path}.PropertyType"))?,
                            name: p.name,
                            description: p.description,
                        },
                        aggregate: AggregateExpression {
                            source_event_type: p.aggregate.event_type,
                            source_property: p.aggregate.property_name,
                            op,
                            group_by: p
                                .aggregate
                                .group_by
                                .unwrap_or_else(|| vec!["user".to_string()]),
                            filters,
                        },
                    });
                }
                entities.push(EntityTypeDef {
                    entity_type: e.entity_type,
                    description: e.description,
                    properties,
                });
            }
            Ok(MemorySchema {
                tenant: self.tenant,
                version: self.version,
                events,
                entities,
            })
        }
    }

    impl From<&MemorySchema> for SchemaDoc {
        fn from(s: &MemorySchema) -> Self {
            SchemaDoc {
                tenant: s.tenant.clone(),
                version: s.version,
                events: s
                    .events
                    .iter()
                    .map(|e| EventDoc {
                        event_type: e.event_type.clone(),
                        description: e.description.clone(),
                        properties: e
                            .properties
                            .iter()
                            .map(|p| PropertyDoc {
                                name: p.name.clone(),
                                prop_type: p.prop_type.as_str().to_string(),
                                description: p.description.clone(),
                            })
                            .collect(),
                        instance_weight_field: e.instance_weight_field.clone(),
                    })
                    .collect(),
                entities: s
                    .entities
                    .iter()
                    .map(|e| EntityDoc {
                        entity_type: e.entity_type.clone(),
                        description: e.description.clone(),
                        properties: e
                            .properties
                            .iter()
                            .map(|p| EntityPropertyDoc {
                                name: p.property.name.clone(),
                                prop_type: p.property.prop_type.as_str().to_string(),
                                description: p.property.description.clone(),
                                aggregate: AggregateDoc {
                                    event_type: p.aggregate.source_event_type.clone(),
                                    property_name: p.aggregate.source_property.clone(),
                                    op: p.aggregate.op.as_str().to_string(),
                                    group_by: Some(p.aggregate.group_by.clone()),
                                    filters: p.aggregate.filters.as_ref().map(|f| FiltersDoc {
                                        time_window: f.time_window.as_ref().map(|w| {
                                            TimeWindowDoc {
                                                start: w.start,
                                                end: w.end,
                                            }
                                        }),
                                        equals: f.equals.clone(),
                                    }),
                                },
                            })
                            .collect(),
                    })
                    .collect(),
            }
        }
    }
}
