use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// One step of a [`KeyPath`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Field(String),
    Index(usize),
}

/// A location inside a state tree, rendered as `channels[0].name`.
///
/// Field names that would be ambiguous in the dotted form (empty, `*`, or
/// containing `.`, `[`, `]` or `"`) render as `["raw key"]`, where the
/// quoted part is a JSON string literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct KeyPath(Vec<Segment>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid key path {input:?} at byte {offset}: {reason}")]
pub struct PathParseError {
    pub input: String,
    pub offset: usize,
    pub reason: &'static str,
}

impl KeyPath {
    pub fn new(segments: Vec<Segment>) -> Self {
        KeyPath(segments)
    }

    pub fn root() -> Self {
        KeyPath(Vec::new())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child_field(&self, name: &str) -> KeyPath {
        let mut segments = self.0.clone();
        segments.push(Segment::Field(name.to_owned()));
        KeyPath(segments)
    }

    pub fn child_index(&self, index: usize) -> KeyPath {
        let mut segments = self.0.clone();
        segments.push(Segment::Index(index));
        KeyPath(segments)
    }

    pub fn push(&mut self, segment: Segment) {
        self.0.push(segment);
    }

    pub fn pop(&mut self) -> Option<Segment> {
        self.0.pop()
    }

    /// True when `self` is a strict prefix of `other`.
    pub fn is_ancestor_of(&self, other: &KeyPath) -> bool {
        self.0.len() < other.0.len() && other.0.starts_with(&self.0)
    }
}

pub(crate) fn needs_quoting(name: &str) -> bool {
    name.is_empty() || name == "*" || name.contains(['.', '[', ']', '"'])
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, segment) in self.0.iter().enumerate() {
            match segment {
                Segment::Index(index) => write!(f, "[{index}]")?,
                Segment::Field(name) if needs_quoting(name) => {
                    let quoted = serde_json::to_string(name).map_err(|_| fmt::Error)?;
                    write!(f, "[{quoted}]")?;
                }
                Segment::Field(name) => {
                    if i > 0 {
                        f.write_str(".")?;
                    }
                    f.write_str(name)?;
                }
            }
        }
        Ok(())
    }
}

/// Segment as produced by the shared path grammar, which also admits the
/// `*` wildcard used by mask patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum RawSegment {
    Field(String),
    Index(usize),
    Wildcard,
}

pub(crate) fn parse_segments(input: &str) -> Result<Vec<RawSegment>, PathParseError> {
    let err = |offset: usize, reason: &'static str| PathParseError { input: input.to_owned(), offset, reason };
    let bytes = input.as_bytes();
    let mut segments = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match bytes[pos] {
            b'[' => {
                let (segment, next) = parse_bracket(input, pos).map_err(|(o, r)| err(o, r))?;
                segments.push(segment);
                pos = next;
            }
            b'.' if segments.is_empty() => return Err(err(pos, "path starts with '.'")),
            b'.' => {
                pos += 1;
                if pos >= bytes.len() || matches!(bytes[pos], b'.' | b'[') {
                    return Err(err(pos, "expected field name after '.'"));
                }
                let (segment, next) = parse_plain(input, pos).map_err(|(o, r)| err(o, r))?;
                segments.push(segment);
                pos = next;
            }
            _ if segments.is_empty() => {
                let (segment, next) = parse_plain(input, pos).map_err(|(o, r)| err(o, r))?;
                segments.push(segment);
                pos = next;
            }
            _ => return Err(err(pos, "expected '.' or '['")),
        }
    }
    Ok(segments)
}

fn parse_plain(input: &str, start: usize) -> Result<(RawSegment, usize), (usize, &'static str)> {
    let rest = &input[start..];
    let len = rest.find(['.', '[', ']', '"']).unwrap_or(rest.len());
    if len == 0 {
        return Err((start, "empty field name"));
    }
    let name = &rest[..len];
    let segment = if name == "*" { RawSegment::Wildcard } else { RawSegment::Field(name.to_owned()) };
    Ok((segment, start + len))
}

fn parse_bracket(input: &str, start: usize) -> Result<(RawSegment, usize), (usize, &'static str)> {
    let bytes = input.as_bytes();
    let inner = start + 1;
    match bytes.get(inner) {
        Some(b'"') => {
            let mut i = inner + 1;
            loop {
                match bytes.get(i) {
                    None => return Err((inner, "unterminated quoted key")),
                    Some(b'\\') => i += 2,
                    Some(b'"') => break,
                    Some(_) => i += 1,
                }
            }
            let name: String = serde_json::from_str(&input[inner..=i]).map_err(|_| (inner, "invalid quoted key"))?;
            if bytes.get(i + 1) != Some(&b']') {
                return Err((i + 1, "expected ']' after quoted key"));
            }
            Ok((RawSegment::Field(name), i + 2))
        }
        Some(b'*') => {
            if bytes.get(inner + 1) != Some(&b']') {
                return Err((inner + 1, "expected ']' after '*'"));
            }
            Ok((RawSegment::Wildcard, inner + 2))
        }
        Some(b) if b.is_ascii_digit() => {
            let digits = input[inner..].find(|c: char| !c.is_ascii_digit()).unwrap_or(input.len() - inner);
            let text = &input[inner..inner + digits];
            if text.len() > 1 && text.starts_with('0') {
                return Err((inner, "index has leading zeros"));
            }
            let index = text.parse().map_err(|_| (inner, "index out of range"))?;
            if bytes.get(inner + digits) != Some(&b']') {
                return Err((inner + digits, "expected ']' after index"));
            }
            Ok((RawSegment::Index(index), inner + digits + 1))
        }
        _ => Err((inner, "expected index, quoted key or '*' inside brackets")),
    }
}

impl FromStr for KeyPath {
    type Err = PathParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_segments(s)?
            .into_iter()
            .map(|segment| match segment {
                RawSegment::Field(name) => Ok(Segment::Field(name)),
                RawSegment::Index(i) => Ok(Segment::Index(i)),
                RawSegment::Wildcard => Err(PathParseError {
                    input: s.to_owned(),
                    offset: 0,
                    reason: "wildcards are only valid in mask patterns",
                }),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(KeyPath)
    }
}
