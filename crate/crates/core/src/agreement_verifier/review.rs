//! REVIEW document rendering and parsing.
//!
//! The machine form is a key-value document whose table rows and feedback
//! fields carry JSON values:
//!
//! ```text
//! # REVIEW.md
//! verdict: FAIL
//! agreement_table:
//!   C1_initial_executes: {"pass":true,"evidence":"exit 0 in 0.04s"}
//!   ...
//! feedback_to_setup_gen:
//!   failing_conditions: ["C3"]
//!   setup_issues: ["Make the golden state score exactly 1.0 (observed 0.65)"]
//!   recommended_action: "..."
//! ```
//!
//! The markdown display form (`## Verdict: PASS` plus a status table) is
//! also accepted by [`parse_review`].

use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use super::{AgreementReport, ConditionId, ConditionResult, Feedback, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("REVIEW schema violation at {path}: {message}")]
pub struct ReviewParseError {
    /// Dotted field path, e.g. `agreement_table.C3_golden_reward_eq_1.observed`.
    pub path: String,
    pub message: String,
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> ReviewParseError {
    ReviewParseError { path: path.into(), message: message.into() }
}

pub fn render_review(report: &AgreementReport) -> String {
    let mut out = String::from("# REVIEW.md\n");
    out.push_str(&format!("verdict: {}\n", report.verdict));
    out.push_str("agreement_table:\n");
    for id in ConditionId::ALL {
        let Some(c) = report.condition(id) else { continue };
        // Field order is part of the format, so the object is written by hand.
        let mut fields = vec![format!("\"pass\":{}", c.passed)];
        if matches!(id, ConditionId::C3 | ConditionId::C4) || c.observed.is_some() {
            fields.push(format!("\"observed\":{}", c.observed.map_or(Value::Null, |v| json!(v))));
        }
        if id == ConditionId::C5 || c.matched_pattern.is_some() {
            fields.push(format!("\"matched_pattern\":{}", json!(c.matched_pattern)));
        }
        fields.push(format!("\"evidence\":{}", json!(c.evidence)));
        out.push_str(&format!("  {}: {{{}}}\n", id.table_key(), fields.join(",")));
    }
    let fb = &report.feedback;
    let failing: Vec<&str> = fb.failing_conditions.iter().map(|c| c.as_str()).collect();
    out.push_str("feedback_to_setup_gen:\n");
    out.push_str(&format!("  failing_conditions: {}\n", json!(failing)));
    out.push_str(&format!("  setup_issues: {}\n", json!(fb.setup_issues)));
    out.push_str(&format!("  recommended_action: {}\n", json!(fb.recommended_action)));
    out
}

pub fn parse_review(text: &str) -> Result<AgreementReport, ReviewParseError> {
    let report = if text.lines().any(|l| l.trim_start().starts_with("## Verdict:")) {
        parse_display(text)?
    } else {
        parse_schema(text)?
    };
    let all_passed = report.conditions.iter().all(|c| c.passed);
    if (report.verdict == Verdict::Pass) != all_passed {
        return Err(violation("verdict", format!("verdict {} contradicts the agreement table", report.verdict)));
    }
    Ok(report)
}

fn parse_verdict(path: &str, raw: &str) -> Result<Verdict, ReviewParseError> {
    match raw.trim() {
        "PASS" => Ok(Verdict::Pass),
        "FAIL" => Ok(Verdict::Fail),
        other => Err(violation(path, format!("expected PASS or FAIL, found '{other}'"))),
    }
}

#[derive(PartialEq)]
enum Section {
    Top,
    Table,
    Feedback,
}

fn parse_schema(text: &str) -> Result<AgreementReport, ReviewParseError> {
    let mut verdict = None;
    let mut rows: Vec<Option<ConditionResult>> = vec![None; ConditionId::ALL.len()];
    let mut failing = None;
    let mut issues = None;
    let mut action = None;
    let mut section = Section::Top;
    let mut seen_table = false;
    let mut seen_feedback = false;

    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indented = line.starts_with(' ') || line.starts_with('\t');
        let (key, value) = trimmed
            .split_once(':')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| violation(current_path(&section), format!("expected 'key: value', found '{trimmed}'")))?;
        if !indented {
            section = match key {
                "verdict" => {
                    if verdict.is_some() {
                        return Err(violation("verdict", "duplicate field"));
                    }
                    verdict = Some(parse_verdict("verdict", value)?);
                    Section::Top
                }
                "agreement_table" if !seen_table => {
                    seen_table = true;
                    Section::Table
                }
                "feedback_to_setup_gen" if !seen_feedback => {
                    seen_feedback = true;
                    Section::Feedback
                }
                "agreement_table" | "feedback_to_setup_gen" => return Err(violation(key, "duplicate section")),
                other => return Err(violation(other, "unknown field")),
            };
            if section != Section::Top && !value.is_empty() {
                return Err(violation(key, "section header must not carry a value"));
            }
            continue;
        }
        match section {
            Section::Top => return Err(violation(key, "indented field outside a section")),
            Section::Table => {
                let id = ConditionId::ALL
                    .into_iter()
                    .find(|c| c.table_key() == key)
                    .ok_or_else(|| violation(format!("agreement_table.{key}"), "unknown condition"))?;
                let slot = &mut rows[id as usize];
                if slot.is_some() {
                    return Err(violation(format!("agreement_table.{key}"), "duplicate condition"));
                }
                *slot = Some(parse_row(id, value)?);
            }
            Section::Feedback => {
                let path = format!("feedback_to_setup_gen.{key}");
                let json: Value =
                    serde_json::from_str(value).map_err(|e| violation(&path, format!("invalid JSON: {e}")))?;
                let slot_taken = match key {
                    "failing_conditions" => failing.replace(parse_conditions(&path, &json)?).is_some(),
                    "setup_issues" => issues.replace(parse_strings(&path, &json)?).is_some(),
                    "recommended_action" => {
                        let s = json.as_str().ok_or_else(|| violation(&path, "expected a string"))?;
                        action.replace(s.to_string()).is_some()
                    }
                    _ => return Err(violation(path, "unknown field")),
                };
                if slot_taken {
                    return Err(violation(path, "duplicate field"));
                }
            }
        }
    }

    let verdict = verdict.ok_or_else(|| violation("verdict", "missing"))?;
    let mut conditions = Vec::with_capacity(rows.len());
    for (id, row) in ConditionId::ALL.into_iter().zip(rows) {
        conditions.push(row.ok_or_else(|| violation(format!("agreement_table.{}", id.table_key()), "missing"))?);
    }
    let feedback = Feedback {
        failing_conditions: failing.ok_or_else(|| violation("feedback_to_setup_gen.failing_conditions", "missing"))?,
        setup_issues: issues.ok_or_else(|| violation("feedback_to_setup_gen.setup_issues", "missing"))?,
        recommended_action: action.ok_or_else(|| violation("feedback_to_setup_gen.recommended_action", "missing"))?,
    };
    Ok(AgreementReport { verdict, conditions, feedback })
}

fn current_path(section: &Section) -> &'static str {
    match section {
        Section::Top => "<root>",
        Section::Table => "agreement_table",
        Section::Feedback => "feedback_to_setup_gen",
    }
}

fn parse_row(id: ConditionId, value: &str) -> Result<ConditionResult, ReviewParseError> {
    let base = format!("agreement_table.{}", id.table_key());
    let json: Value = serde_json::from_str(value).map_err(|e| violation(&base, format!("invalid JSON: {e}")))?;
    let obj = json.as_object().ok_or_else(|| violation(&base, "expected an object"))?;
    let field = |name: &str| format!("{base}.{name}");
    let passed =
        obj.get("pass").and_then(Value::as_bool).ok_or_else(|| violation(field("pass"), "expected a boolean"))?;
    let evidence = match obj.get("evidence") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(violation(field("evidence"), "expected a string")),
    };
    let observed = match obj.get("observed") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| violation(field("observed"), "expected a number or null"))?),
    };
    let matched_pattern = match obj.get("matched_pattern") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(violation(field("matched_pattern"), "expected a string or null")),
    };
    Ok(ConditionResult { id, passed, evidence, observed, matched_pattern })
}

fn parse_conditions(path: &str, json: &Value) -> Result<Vec<ConditionId>, ReviewParseError> {
    parse_strings(path, json)?
        .iter()
        .enumerate()
        .map(|(i, s)| s.parse().map_err(|e: String| violation(format!("{path}[{i}]"), e)))
        .collect()
}

fn parse_strings(path: &str, json: &Value) -> Result<Vec<String>, ReviewParseError> {
    let items = json.as_array().ok_or_else(|| violation(path, "expected an array"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str().map(str::to_string).ok_or_else(|| violation(format!("{path}[{i}]"), "expected a string"))
        })
        .collect()
}

fn score_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Score:\s*([0-9]*\.?[0-9]+)").expect("valid regex"))
}

/// Markdown display form: `## Verdict:`, a `| # | Condition | Status | Details |`
/// table, and a free-text feedback section.
fn parse_display(text: &str) -> Result<AgreementReport, ReviewParseError> {
    let mut verdict = None;
    let mut rows: Vec<Option<ConditionResult>> = vec![None; ConditionId::ALL.len()];
    let mut heading = String::new();
    let mut feedback_text: Vec<&str> = Vec::new();

    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("## ") {
            heading = rest.trim().to_lowercase();
            if let Some(v) = rest.strip_prefix("Verdict:") {
                verdict = Some(parse_verdict("verdict", v)?);
            }
            continue;
        }
        if heading.starts_with("agreement conditions") && trimmed.starts_with('|') {
            let cells: Vec<&str> = trimmed.trim_matches('|').split('|').map(str::trim).collect();
            let Ok(index) = cells.first().copied().unwrap_or("").parse::<usize>() else { continue };
            let path = format!("agreement_table.row{index}");
            if !(1..=ConditionId::ALL.len()).contains(&index) || cells.len() < 4 {
                return Err(violation(path, "expected rows 1..5 with status and details"));
            }
            let id = ConditionId::ALL[index - 1];
            let passed = match cells[2] {
                "PASS" => true,
                "FAIL" => false,
                other => {
                    return Err(violation(format!("{path}.status"), format!("expected PASS or FAIL, found '{other}'")))
                }
            };
            let evidence = cells[3].to_string();
            let observed = match id {
                ConditionId::C3 | ConditionId::C4 => {
                    score_pattern().captures(&evidence).and_then(|c| c[1].parse::<f64>().ok())
                }
                _ => None,
            };
            let matched_pattern = (id == ConditionId::C5 && !passed).then(|| evidence.clone());
            rows[index - 1] = Some(ConditionResult { id, passed, evidence, observed, matched_pattern });
        } else if heading.starts_with("feedback") && !trimmed.is_empty() {
            feedback_text.push(trimmed);
        }
    }

    let verdict = verdict.ok_or_else(|| violation("verdict", "missing"))?;
    let mut conditions = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        conditions.push(row.ok_or_else(|| violation(format!("agreement_table.row{}", i + 1), "missing"))?);
    }
    let derived = AgreementReport::from_conditions(conditions);
    Ok(AgreementReport {
        verdict,
        feedback: Feedback {
            recommended_action: if feedback_text.is_empty() {
                derived.feedback.recommended_action.clone()
            } else {
                feedback_text.join(" ")
            },
            ..derived.feedback
        },
        conditions: derived.conditions,
    })
}
