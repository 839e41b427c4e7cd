//! The value model for environment state.
//!
//! A [`StateValue`] is a JSON-like tree with finite 64-bit float numbers and
//! records whose keys are kept sorted. Canonical bytes are valid UTF-8 JSON
//! with keys in byte order and numbers in shortest round-trip form; the
//! [`StateId`] digest is computed over those bytes.

mod path;

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub(crate) use path::{parse_segments, RawSegment};
pub use path::{KeyPath, PathParseError, Segment};

/// Name of the hash used for [`StateId`]s, reported in service metadata.
pub const DIGEST_ALGORITHM: &str = "sha256";

/// Integral values below this magnitude are rendered without a fraction.
const INTEGRAL_LIMIT: f64 = 1e16;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite number at {0}")]
    NonFinite(String),
}

/// A finite 64-bit float. Negative zero is normalised to zero so that
/// structural equality and canonical bytes agree.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Number(f64);

impl Number {
    pub fn new(value: f64) -> Option<Self> {
        if !value.is_finite() {
            return None;
        }
        Some(Number(if value == 0.0 { 0.0 } else { value }))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    fn as_integral(self) -> Option<i64> {
        (self.0.fract() == 0.0 && self.0.abs() < INTEGRAL_LIMIT).then_some(self.0 as i64)
    }

    fn write_canonical(self, out: &mut String) {
        match self.as_integral() {
            Some(i) => out.push_str(&i.to_string()),
            None => out.push_str(ryu::Buffer::new().format_finite(self.0)),
        }
    }
}

impl Eq for Number {}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_canonical(&mut s);
        f.write_str(&s)
    }
}

/// Environment state: null, boolean, finite number, text, array or record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StateValue {
    #[default]
    Null,
    Bool(bool),
    Number(Number),
    Text(String),
    Array(Vec<StateValue>),
    Record(BTreeMap<String, StateValue>),
}

impl StateValue {
    pub fn empty_record() -> Self {
        StateValue::Record(BTreeMap::new())
    }

    /// Builds a number value, returning `None` for NaN or infinities.
    pub fn number(value: f64) -> Option<Self> {
        Number::new(value).map(StateValue::Number)
    }

    pub fn is_record(&self) -> bool {
        matches!(self, StateValue::Record(_))
    }

    pub fn as_record(&self) -> Option<&BTreeMap<String, StateValue>> {
        match self {
            StateValue::Record(map) => Some(map),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[StateValue]> {
        match self {
            StateValue::Array(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            StateValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            StateValue::Number(n) => Some(n.get()),
            _ => None,
        }
    }

    /// Parses UTF-8 JSON text.
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, StateError> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        Self::try_from(value)
    }

    pub fn from_json_str(text: &str) -> Result<Self, StateError> {
        Self::from_json_slice(text.as_bytes())
    }

    /// Canonical JSON bytes: sorted keys, shortest round-trip numbers, no whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.canonical_string().into_bytes()
    }

    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut String) {
        match self {
            StateValue::Null => out.push_str("null"),
            StateValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            StateValue::Number(n) => n.write_canonical(out),
            StateValue::Text(s) => write_json_string(s, out),
            StateValue::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write_canonical(out);
                }
                out.push(']');
            }
            StateValue::Record(map) => {
                out.push('{');
                for (i, (key, value)) in map.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write_json_string(key, out);
                    out.push(':');
                    value.write_canonical(out);
                }
                out.push('}');
            }
        }
    }

    pub fn digest(&self) -> StateId {
        StateId::of(self)
    }

    /// Resolves `path` against this value. Missing keys, out-of-range
    /// indices and kind mismatches all yield `None`.
    pub fn get_at(&self, path: &KeyPath) -> Option<&StateValue> {
        let mut node = self;
        for segment in path.segments() {
            node = match (segment, node) {
                (Segment::Field(name), StateValue::Record(map)) => map.get(name)?,
                (Segment::Index(i), StateValue::Array(items)) => items.get(*i)?,
                _ => return None,
            };
        }
        Some(node)
    }

    /// Record-wise deep merge; anything that is not a record on both
    /// sides is replaced wholesale by `patch`.
    pub fn deep_merge(&self, patch: &StateValue) -> StateValue {
        match (self, patch) {
            (StateValue::Record(base), StateValue::Record(patch)) => {
                let mut merged = base.clone();
                for (key, value) in patch {
                    let next = match base.get(key) {
                        Some(existing) => existing.deep_merge(value),
                        None => value.clone(),
                    };
                    merged.insert(key.clone(), next);
                }
                StateValue::Record(merged)
            }
            _ => patch.clone(),
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        match self {
            StateValue::Null => serde_json::Value::Null,
            StateValue::Bool(b) => serde_json::Value::Bool(*b),
            StateValue::Number(n) => match n.as_integral() {
                Some(i) => serde_json::Value::from(i),
                None => serde_json::Value::from(n.get()),
            },
            StateValue::Text(s) => serde_json::Value::String(s.clone()),
            StateValue::Array(items) => serde_json::Value::Array(items.iter().map(StateValue::to_json_value).collect()),
            StateValue::Record(map) => {
                serde_json::Value::Object(map.iter().map(|(k, v)| (k.clone(), v.to_json_value())).collect())
            }
        }
    }

    fn from_json_at(value: serde_json::Value, at: &mut Vec<Segment>) -> Result<Self, StateError> {
        Ok(match value {
            serde_json::Value::Null => StateValue::Null,
            serde_json::Value::Bool(b) => StateValue::Bool(b),
            serde_json::Value::Number(n) => n
                .as_f64()
                .and_then(StateValue::number)
                .ok_or_else(|| StateError::NonFinite(KeyPath::new(at.clone()).to_string()))?,
            serde_json::Value::String(s) => StateValue::Text(s),
            serde_json::Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, item) in items.into_iter().enumerate() {
                    at.push(Segment::Index(i));
                    out.push(Self::from_json_at(item, at)?);
                    at.pop();
                }
                StateValue::Array(out)
            }
            serde_json::Value::Object(map) => {
                let mut out = BTreeMap::new();
                for (key, item) in map {
                    at.push(Segment::Field(key.clone()));
                    let converted = Self::from_json_at(item, at)?;
                    at.pop();
                    out.insert(key, converted);
                }
                StateValue::Record(out)
            }
        })
    }
}

fn write_json_string(s: &str, out: &mut String) {
    // serde_json's string escaping is deterministic and minimal.
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

impl TryFrom<serde_json::Value> for StateValue {
    type Error = StateError;

    fn try_from(value: serde_json::Value) -> Result<Self, Self::Error> {
        StateValue::from_json_at(value, &mut Vec::new())
    }
}

impl From<&StateValue> for serde_json::Value {
    fn from(value: &StateValue) -> Self {
        value.to_json_value()
    }
}

impl Serialize for StateValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StateValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        StateValue::try_from(value).map_err(D::Error::custom)
    }
}

impl fmt::Display for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_string())
    }
}

/// Lowercase hex SHA-256 of a value's canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(String);

impl StateId {
    pub fn of(value: &StateValue) -> Self {
        StateId(hex::encode(Sha256::digest(value.canonical_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use proptest::prelude::*;

    /// Small random state trees: depth ≤ `depth`, fan-out ≤ `fanout`.
    pub fn arb_state(depth: u32, fanout: usize) -> impl Strategy<Value = StateValue> {
        let leaf = prop_oneof![
            Just(StateValue::Null),
            any::<bool>().prop_map(StateValue::Bool),
            (-1000i64..1000).prop_map(|i| StateValue::number(i as f64).unwrap()),
            (-1e6f64..1e6).prop_map(|f| StateValue::number(f).unwrap()),
            "[a-z \"\\\\é.]{0,6}".prop_map(StateValue::Text),
        ];
        leaf.prop_recursive(depth, 64, fanout as u32, move |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..=fanout).prop_map(StateValue::Array),
                prop::collection::btree_map("[a-c.\\[\"]{0,3}", inner, 0..=fanout).prop_map(StateValue::Record),
            ]
        })
    }

    pub fn arb_record(depth: u32, fanout: usize) -> impl Strategy<Value = StateValue> {
        prop::collection::btree_map("[a-d]{1,2}", arb_state(depth, fanout), 0..=fanout).prop_map(StateValue::Record)
    }
}
