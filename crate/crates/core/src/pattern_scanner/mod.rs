//! Static scan of reward scripts for forbidden reward-hacking patterns.
//!
//! The front-end parses a Python subset into a block tree (see `parser`),
//! and the rules in `rules` walk it. Unparseable input yields a single
//! finding with `pattern: None` whose explanation starts with
//! [`PARSE_ERROR`].

mod lexer;
mod parser;
mod rules;

use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Reserved explanation prefix of the finding emitted for unparseable source.
pub const PARSE_ERROR: &str = "PARSE_ERROR";

const EXCERPT_LIMIT: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatternId {
    #[serde(rename = "P1_DIRECT_BOOL")]
    DirectBool,
    #[serde(rename = "P2_PLACEHOLDER")]
    Placeholder,
    #[serde(rename = "P3_HARDCODED_SUCCESS")]
    HardcodedSuccess,
    #[serde(rename = "P4_BARE_EXISTENCE")]
    BareExistence,
    #[serde(rename = "P5_CHILD_PROCESS")]
    ChildProcess,
    #[serde(rename = "P6_COMMENT_ONLY")]
    CommentOnly,
}

impl PatternId {
    pub const ALL: [PatternId; 6] = [
        PatternId::DirectBool,
        PatternId::Placeholder,
        PatternId::HardcodedSuccess,
        PatternId::BareExistence,
        PatternId::ChildProcess,
        PatternId::CommentOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternId::DirectBool => "P1_DIRECT_BOOL",
            PatternId::Placeholder => "P2_PLACEHOLDER",
            PatternId::HardcodedSuccess => "P3_HARDCODED_SUCCESS",
            PatternId::BareExistence => "P4_BARE_EXISTENCE",
            PatternId::ChildProcess => "P5_CHILD_PROCESS",
            PatternId::CommentOnly => "P6_COMMENT_ONLY",
        }
    }

    fn explanation(self) -> &'static str {
        match self {
            PatternId::DirectBool => "verification flag is assigned a literal True and then guards a score increment",
            PatternId::Placeholder => {
                "flag is assigned a constant and conditionally added to the score with no evaluation in between"
            }
            PatternId::HardcodedSuccess => "function returns a constant success value without reading the environment",
            PatternId::BareExistence => "score is awarded on path existence alone, without inspecting contents",
            PatternId::ChildProcess => "reward references a child-process facility",
            PatternId::CommentOnly => "score increment is justified by a comment rather than by a check",
        }
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatternId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatternId::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| format!("unknown pattern id '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    /// `None` marks a parse failure.
    pub pattern: Option<PatternId>,
    pub line: usize,
    pub excerpt: String,
    pub explanation: String,
}

impl Finding {
    pub fn is_parse_error(&self) -> bool {
        self.pattern.is_none()
    }
}

/// Syntax error in the scanned source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("{field} is not a valid regex: {source}")]
    Regex {
        field: &'static str,
        #[source]
        source: regex::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerConfig {
    /// Regex matched (unanchored) against identifiers to spot verification flags.
    pub flag_lexicon: String,
    /// Regex matched against assignment targets to spot score accumulators.
    pub score_lexicon: String,
    pub spawn_symbols: Vec<String>,
    pub success_constants: Vec<f64>,
    /// Call names (by prefix of the last dotted segment) that inspect the environment.
    pub read_symbols: Vec<String>,
    pub existence_symbols: Vec<String>,
    pub comment_keywords: Vec<String>,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        let owned = |items: &[&str]| items.iter().map(|s| s.to_string()).collect();
        ScannerConfig {
            flag_lexicon: "(?i)(verified|passed|success|ok|correct|complete)".into(),
            score_lexicon: "(?i)(score|points|reward|total)".into(),
            spawn_symbols: owned(&["subprocess", "os.system", "popen", "spawn"]),
            success_constants: vec![0.5, 1.0],
            read_symbols: owned(&["open", "read", "load", "get"]),
            existence_symbols: owned(&["exists", "isfile", "isdir", "is_file", "is_dir", "lexists"]),
            comment_keywords: owned(&["assume", "assumed", "trust"]),
        }
    }
}

/// A validated configuration, ready to scan many sources.
#[derive(Debug, Clone)]
pub struct Scanner {
    flag: Regex,
    score: Regex,
    comment: Regex,
    spawn: Vec<String>,
    success: Vec<f64>,
    read: Vec<String>,
    existence: Vec<String>,
}

impl Scanner {
    pub fn new(config: &ScannerConfig) -> Result<Self, ConfigError> {
        fn non_empty<T>(field: &'static str, items: &[T]) -> Result<(), ConfigError> {
            if items.is_empty() {
                Err(ConfigError::Empty { field })
            } else {
                Ok(())
            }
        }
        let lexicon = |field: &'static str, pattern: &str| -> Result<Regex, ConfigError> {
            if pattern.is_empty() {
                return Err(ConfigError::Empty { field });
            }
            Regex::new(pattern).map_err(|source| ConfigError::Regex { field, source })
        };
        non_empty("spawn_symbols", &config.spawn_symbols)?;
        non_empty("success_constants", &config.success_constants)?;
        non_empty("read_symbols", &config.read_symbols)?;
        non_empty("existence_symbols", &config.existence_symbols)?;
        non_empty("comment_keywords", &config.comment_keywords)?;
        let lower = |items: &[String]| -> Vec<String> {
            items.iter().map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect()
        };
        let keywords: Vec<String> = lower(&config.comment_keywords).iter().map(|k| regex::escape(k)).collect();
        if keywords.is_empty() {
            return Err(ConfigError::Empty { field: "comment_keywords" });
        }
        Ok(Scanner {
            flag: lexicon("flag_lexicon", &config.flag_lexicon)?,
            score: lexicon("score_lexicon", &config.score_lexicon)?,
            comment: lexicon("comment_keywords", &format!(r"(?i)\b({})\b", keywords.join("|")))?,
            spawn: lower(&config.spawn_symbols),
            success: config.success_constants.clone(),
            read: lower(&config.read_symbols),
            existence: lower(&config.existence_symbols),
        })
    }

    /// Findings ordered by line, then pattern.
    pub fn scan(&self, source: &str) -> Vec<Finding> {
        let module = match parser::parse(source) {
            Ok(module) => module,
            Err(error) => {
                let line_count = source.lines().count().max(1);
                let line = error.line.clamp(1, line_count);
                return vec![Finding {
                    pattern: None,
                    line,
                    excerpt: excerpt(source, line),
                    explanation: format!("{PARSE_ERROR}: {}", error.message),
                }];
            }
        };
        let mut hits = rules::run(self, &module);
        hits.sort();
        hits.dedup();
        hits.into_iter()
            .map(|(line, pattern)| Finding {
                pattern: Some(pattern),
                line,
                excerpt: excerpt(source, line),
                explanation: pattern.explanation().to_string(),
            })
            .collect()
    }

    pub fn is_clean(&self, source: &str) -> bool {
        self.scan(source).is_empty()
    }
}

fn excerpt(source: &str, line: usize) -> String {
    let text = source.lines().nth(line.saturating_sub(1)).unwrap_or("").trim();
    text.chars().take(EXCERPT_LIMIT).collect()
}

pub fn scan(source: &str, config: &ScannerConfig) -> Result<Vec<Finding>, ConfigError> {
    Ok(Scanner::new(config)?.scan(source))
}

pub fn is_clean(source: &str, config: &ScannerConfig) -> Result<bool, ConfigError> {
    Ok(Scanner::new(config)?.is_clean(source))
}
