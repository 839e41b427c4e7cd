//! Flat key-path diff between two state snapshots.
//!
//! Records are compared by recursive descent. Arrays are atomic: any
//! difference reports the whole array at its own path, and when both sides
//! have the same length the changed element paths are reported as well, so
//! consumers can look up either `channels` or `channels[0].name`. Subtrees
//! matching the volatile mask are removed from both sides first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::state_document::{parse_segments, KeyPath, PathParseError, RawSegment, Segment, StateValue};

/// The default volatile mask.
pub const DEFAULT_MASK: &[&str] = &["*.lastViewedAt"];

/// One side of a diff entry. `Absent` means the path does not exist on that side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Side {
    Absent,
    Present(StateValue),
}

impl Side {
    pub fn value(&self) -> Option<&StateValue> {
        match self {
            Side::Absent => None,
            Side::Present(v) => Some(v),
        }
    }

    fn is_absent(&self) -> bool {
        matches!(self, Side::Absent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffEntry {
    pub path: KeyPath,
    pub old: Side,
    pub new: Side,
}

impl DiffEntry {
    pub fn swapped(&self) -> DiffEntry {
        DiffEntry { path: self.path.clone(), old: self.new.clone(), new: self.old.clone() }
    }
}

/// Changed paths keyed by their canonical rendering.
///
/// On the wire each entry is `{"old": v, "new": v}`; a missing side is
/// written as `null` and named by a sibling `"absent": "old" | "new"`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DiffReport {
    entries: BTreeMap<String, DiffEntry>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, path: &str) -> Option<&DiffEntry> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DiffEntry> {
        self.entries.values()
    }

    fn insert(&mut self, entry: DiffEntry) {
        self.entries.insert(entry.path.to_string(), entry);
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("diff reports always serialize")
    }
}

impl Serialize for DiffReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (key, entry) in &self.entries {
            let mut body = serde_json::Map::new();
            body.insert("old".into(), entry.old.value().map_or(serde_json::Value::Null, StateValue::to_json_value));
            body.insert("new".into(), entry.new.value().map_or(serde_json::Value::Null, StateValue::to_json_value));
            if entry.old.is_absent() {
                body.insert("absent".into(), "old".into());
            } else if entry.new.is_absent() {
                body.insert("absent".into(), "new".into());
            }
            map.serialize_entry(key, &body)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for DiffReport {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;

        #[derive(Deserialize)]
        struct WireEntry {
            old: StateValue,
            new: StateValue,
            #[serde(default)]
            absent: Option<String>,
        }

        let raw = BTreeMap::<String, WireEntry>::deserialize(deserializer)?;
        let mut report = DiffReport::default();
        for (key, wire) in raw {
            let path: KeyPath = key.parse().map_err(D::Error::custom)?;
            let (old, new) = match wire.absent.as_deref() {
                None => (Side::Present(wire.old), Side::Present(wire.new)),
                Some("old") => (Side::Absent, Side::Present(wire.new)),
                Some("new") => (Side::Present(wire.old), Side::Absent),
                Some(other) => return Err(D::Error::custom(format!("invalid absent marker {other:?}"))),
            };
            if path.to_string() != key {
                return Err(D::Error::custom(format!("non-canonical diff key {key:?}")));
            }
            report.insert(DiffEntry { path, old, new });
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PatternSegment {
    Exact(Segment),
    Any,
}

/// A key-path pattern where `*` (or `[*]`) matches any single field or index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPattern {
    source: String,
    segments: Vec<PatternSegment>,
}

impl PathPattern {
    /// True when the pattern covers `path` or one of its ancestors.
    pub fn matches(&self, path: &KeyPath) -> bool {
        let segments = path.segments();
        self.segments.len() <= segments.len()
            && self.segments.iter().zip(segments).all(|(pattern, actual)| match pattern {
                PatternSegment::Any => true,
                PatternSegment::Exact(expected) => expected == actual,
            })
    }
}

impl FromStr for PathPattern {
    type Err = PathParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let segments = parse_segments(s)?
            .into_iter()
            .map(|raw| match raw {
                RawSegment::Field(name) => PatternSegment::Exact(Segment::Field(name)),
                RawSegment::Index(i) => PatternSegment::Exact(Segment::Index(i)),
                RawSegment::Wildcard => PatternSegment::Any,
            })
            .collect();
        Ok(PathPattern { source: s.to_owned(), segments })
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Set of volatile-field patterns removed before diffing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VolatileMask {
    patterns: Vec<PathPattern>,
}

impl VolatileMask {
    pub fn empty() -> Self {
        VolatileMask::default()
    }

    pub fn parse<I, S>(patterns: I) -> Result<Self, PathParseError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns = patterns.into_iter().map(|p| p.as_ref().parse()).collect::<Result<Vec<_>, _>>()?;
        Ok(VolatileMask { patterns })
    }

    pub fn patterns(&self) -> &[PathPattern] {
        &self.patterns
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

pub fn default_mask() -> VolatileMask {
    VolatileMask::parse(DEFAULT_MASK).expect("default mask patterns are valid")
}

pub fn matches_mask(path: &KeyPath, mask: &VolatileMask) -> bool {
    mask.patterns.iter().any(|p| p.matches(path))
}

/// Returns `value` with every masked subtree removed. Masked record fields
/// are dropped; masked array elements become `null` so sibling indices
/// keep their meaning.
pub fn apply_mask(value: &StateValue, mask: &VolatileMask) -> StateValue {
    if mask.is_empty() {
        return value.clone();
    }
    if matches_mask(&KeyPath::root(), mask) {
        return StateValue::Null;
    }
    let mut path = KeyPath::root();
    strip(value, mask, &mut path)
}

fn strip(value: &StateValue, mask: &VolatileMask, path: &mut KeyPath) -> StateValue {
    match value {
        StateValue::Record(map) => {
            let mut out = BTreeMap::new();
            for (key, child) in map {
                path.push(Segment::Field(key.clone()));
                if !matches_mask(path, mask) {
                    out.insert(key.clone(), strip(child, mask, path));
                }
                path.pop();
            }
            StateValue::Record(out)
        }
        StateValue::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, child) in items.iter().enumerate() {
                path.push(Segment::Index(i));
                out.push(if matches_mask(path, mask) { StateValue::Null } else { strip(child, mask, path) });
                path.pop();
            }
            StateValue::Array(out)
        }
        scalar => scalar.clone(),
    }
}

pub fn compute_diff(initial: &StateValue, current: &StateValue, mask: &VolatileMask) -> DiffReport {
    let initial = apply_mask(initial, mask);
    let current = apply_mask(current, mask);
    let mut report = DiffReport::default();
    let mut path = KeyPath::root();
    walk(&initial, &current, &mut path, &mut report);
    report
}

fn walk(old: &StateValue, new: &StateValue, path: &mut KeyPath, report: &mut DiffReport) {
    match (old, new) {
        (StateValue::Record(a), StateValue::Record(b)) => {
            for (key, old_child) in a {
                path.push(Segment::Field(key.clone()));
                match b.get(key) {
                    Some(new_child) => walk(old_child, new_child, path, report),
                    None => report.insert(DiffEntry {
                        path: path.clone(),
                        old: Side::Present(old_child.clone()),
                        new: Side::Absent,
                    }),
                }
                path.pop();
            }
            for (key, new_child) in b.iter().filter(|(k, _)| !a.contains_key(*k)) {
                report.insert(DiffEntry {
                    path: path.child_field(key),
                    old: Side::Absent,
                    new: Side::Present(new_child.clone()),
                });
            }
        }
        (StateValue::Array(a), StateValue::Array(b)) => {
            if a == b {
                return;
            }
            report.insert(DiffEntry {
                path: path.clone(),
                old: Side::Present(old.clone()),
                new: Side::Present(new.clone()),
            });
            if a.len() == b.len() {
                for (i, (x, y)) in a.iter().zip(b).enumerate() {
                    path.push(Segment::Index(i));
                    walk(x, y, path, report);
                    path.pop();
                }
            }
        }
        _ if old != new => report.insert(DiffEntry {
            path: path.clone(),
            old: Side::Present(old.clone()),
            new: Side::Present(new.clone()),
        }),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_document::testing::arb_state;
    use proptest::prelude::*;

    fn v(text: &str) -> StateValue {
        StateValue::from_json_str(text).unwrap()
    }

    fn path(text: &str) -> KeyPath {
        text.parse().unwrap()
    }

    #[test]
    fn channel_rename_reports_leaf_and_array() {
        let initial = v(r#"{"channels":[{"name":"general","id":1}]}"#);
        let current = v(r#"{"channels":[{"name":"engineering","id":1}]}"#);
        let diff = compute_diff(&initial, &current, &VolatileMask::empty());
        let entry = diff.get("channels[0].name").unwrap();
        assert_eq!(entry.old, Side::Present(v(r#""general""#)));
        assert_eq!(entry.new, Side::Present(v(r#""engineering""#)));
        assert!(diff.contains("channels"));
        assert_eq!(diff.len(), 2);
    }

    #[test]
    fn unequal_length_arrays_report_only_the_array() {
        let diff = compute_diff(&v(r#"{"a":[1,2]}"#), &v(r#"{"a":[1,2,3]}"#), &VolatileMask::empty());
        assert_eq!(diff.keys().collect::<Vec<_>>(), vec!["a"]);
    }

    #[test]
    fn reordering_marks_the_array() {
        let diff = compute_diff(&v("[1,2]"), &v("[2,1]"), &VolatileMask::empty());
        assert_eq!(diff.keys().collect::<Vec<_>>(), vec!["", "[0]", "[1]"]);
    }

    #[test]
    fn added_and_removed_keys_carry_absent_sides() {
        let diff = compute_diff(&v(r#"{"a":1,"b":{"x":1}}"#), &v(r#"{"a":1,"c":null}"#), &VolatileMask::empty());
        assert_eq!(diff.get("b").unwrap().new, Side::Absent);
        assert_eq!(diff.get("c").unwrap().old, Side::Absent);
        assert_eq!(diff.get("c").unwrap().new, Side::Present(StateValue::Null));
        let wire = serde_json::to_value(&diff).unwrap();
        assert_eq!(wire["c"], serde_json::json!({"old": null, "new": null, "absent": "old"}));
        assert_eq!(wire["b"], serde_json::json!({"old": {"x": 1}, "new": null, "absent": "new"}));
        let back: DiffReport = serde_json::from_value(wire).unwrap();
        assert_eq!(back, diff);
    }

    #[test]
    fn identical_states_give_empty_diff() {
        let s = v(r#"{"a":[{"b":1}],"c":"x"}"#);
        assert!(compute_diff(&s, &s, &VolatileMask::empty()).is_empty());
    }

    #[test]
    fn mask_examples() {
        let mask = VolatileMask::parse(["*.lastViewedAt"]).unwrap();
        assert!(matches_mask(&path("channels.lastViewedAt"), &mask));
        assert!(matches_mask(&path("channels.lastViewedAt.ms"), &mask));
        assert!(!matches_mask(&path("lastViewedAt"), &mask));
        assert!(!matches_mask(&path("channels"), &mask));
        assert!(!matches_mask(&path("anything"), &VolatileMask::empty()));
        let descendant = VolatileMask::parse(["a.b"]).unwrap();
        assert!(matches_mask(&path("a.b.c"), &descendant));
        assert!(!matches_mask(&path("a.bc"), &descendant));
        let indexed = VolatileMask::parse(["items[*].seen"]).unwrap();
        assert!(matches_mask(&path("items[3].seen"), &indexed));
    }

    #[test]
    fn masked_fields_never_appear() {
        let mask = default_mask();
        let initial = v(r#"{"ui":{"lastViewedAt":1,"tab":"a"},"n":1}"#);
        let current = v(r#"{"ui":{"lastViewedAt":99,"tab":"a"},"n":1}"#);
        assert!(compute_diff(&initial, &current, &mask).is_empty());
        let current = v(r#"{"ui":{"lastViewedAt":99,"tab":"b"},"n":1}"#);
        assert_eq!(compute_diff(&initial, &current, &mask).keys().collect::<Vec<_>>(), vec!["ui.tab"]);
    }

    #[test]
    fn masked_array_elements_are_ignored() {
        let mask = VolatileMask::parse(["cache[*]"]).unwrap();
        let diff = compute_diff(&v(r#"{"cache":[1,2]}"#), &v(r#"{"cache":[3,4]}"#), &mask);
        assert!(diff.is_empty());
    }

    proptest! {
        #[test]
        fn reflexive(s in arb_state(4, 5)) {
            prop_assert!(compute_diff(&s, &s, &default_mask()).is_empty());
        }

        #[test]
        fn swap_antisymmetry(a in arb_state(4, 4), b in arb_state(4, 4)) {
            let forward = compute_diff(&a, &b, &VolatileMask::empty());
            let backward = compute_diff(&b, &a, &VolatileMask::empty());
            prop_assert_eq!(forward.keys().collect::<Vec<_>>(), backward.keys().collect::<Vec<_>>());
            for entry in forward.entries() {
                prop_assert_eq!(&entry.swapped(), backward.get(&entry.path.to_string()).unwrap());
            }
        }

        #[test]
        fn entries_are_resolvable_and_distinct(a in arb_state(4, 4), b in arb_state(4, 4)) {
            for entry in compute_diff(&a, &b, &VolatileMask::empty()).entries() {
                prop_assert!(a.get_at(&entry.path).is_some() || b.get_at(&entry.path).is_some());
                prop_assert_eq!(entry.old.value().cloned(), a.get_at(&entry.path).cloned());
                prop_assert_eq!(entry.new.value().cloned(), b.get_at(&entry.path).cloned());
                prop_assert_ne!(&entry.old, &entry.new);
            }
        }

        #[test]
        fn mask_soundness(a in arb_state(4, 4), b in arb_state(4, 4)) {
            let mask = VolatileMask::parse(["*.a", "b[*]", "c"]).unwrap();
            let diff = compute_diff(&a, &b, &mask);
            for entry in diff.entries() {
                let mut prefix = KeyPath::root();
                prop_assert!(!matches_mask(&prefix, &mask));
                for segment in entry.path.segments() {
                    prefix.push(segment.clone());
                    prop_assert!(!matches_mask(&prefix, &mask), "{} has masked prefix", entry.path);
                }
            }
        }

        #[test]
        fn wire_round_trip(a in arb_state(3, 4), b in arb_state(3, 4)) {
            let diff = compute_diff(&a, &b, &VolatileMask::empty());
            let text = serde_json::to_string(&diff).unwrap();
            let back: DiffReport = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, diff);
        }
    }
}
