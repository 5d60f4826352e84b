//! Name-pattern rules mapping checkpoint tensors to projection kinds.
//!
//! A rule pattern is a literal tensor name with a `{layer}` placeholder and
//! an optional `{expert}` placeholder, both matching decimal indices. A rule
//! either assigns one `kind`, or splits a fused tensor by rows following
//! `fused_order`.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ProjectionKind;
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../rules/builtin.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_order: Option<Vec<ProjectionKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Deserialize)]
struct RuleDocument {
    rules: Vec<MappingRule>,
}

/// What a matching rule produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Target {
    Single(ProjectionKind),
    Fused(Vec<ProjectionKind>),
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledRule {
    pub(crate) pattern: String,
    pub(crate) target: Target,
    regex: Regex,
}

/// Captured indices of a rule match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RuleMatch {
    pub(crate) layer: usize,
    pub(crate) expert: Option<usize>,
}

impl CompiledRule {
    pub(crate) fn matches(&self, name: &str) -> Option<RuleMatch> {
        let caps = self.regex.captures(name)?;
        let layer = caps.name("layer")?.as_str().parse().ok()?;
        let expert = match caps.name("expert") {
            Some(m) => Some(m.as_str().parse().ok()?),
            None => None,
        };
        Some(RuleMatch { layer, expert })
    }
}

/// An ordered, validated rule table.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

impl RuleSet {
    /// The table shipped with the crate.
    pub fn builtin() -> RuleSet {
        RuleSet::from_json(BUILTIN).expect("built-in rule table is valid")
    }

    pub fn builtin_document() -> &'static str {
        BUILTIN
    }

    /// Loads a user mapping file; it replaces the built-in table.
    pub fn from_file(path: impl AsRef<Path>) -> Result<RuleSet> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RuleSet::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RuleSet> {
        let doc: RuleDocument = serde_json::from_str(text).map_err(|e| Error::MapInvalid(e.to_string()))?;
        RuleSet::new(doc.rules)
    }

    pub fn new(rules: Vec<MappingRule>) -> Result<RuleSet> {
        if rules.is_empty() {
            return Err(Error::MapInvalid("rule table is empty".into()));
        }
        let rules = rules.into_iter().map(compile).collect::<Result<Vec<_>>>()?;
        Ok(RuleSet { rules })
    }

    pub(crate) fn rules(&self) -> &[CompiledRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn compile(rule: MappingRule) -> Result<CompiledRule> {
    let p = &rule.pattern;
    if p.matches("{layer}").count() != 1 {
        return Err(Error::MapInvalid(format!(
            "pattern {p:?} must contain {{layer}} exactly once"
        )));
    }
    if p.matches("{expert}").count() > 1 {
        return Err(Error::MapInvalid(format!(
            "pattern {p:?} contains {{expert}} more than once"
        )));
    }

    let target = match (&rule.kind, &rule.fused_order) {
        (Some(kind), None) => Target::Single(kind.parse().map_err(Error::MapInvalid)?),
        (None, Some(order)) => Target::Fused(validate_fused(p, order)?),
        (Some(kind), Some(order)) if kind.eq_ignore_ascii_case("fused") => {
            Target::Fused(validate_fused(p, order)?)
        }
        _ => {
            return Err(Error::MapInvalid(format!(
                "rule {p:?} needs exactly one of kind or fused_order"
            )))
        }
    };

    let mut re = String::from("^");
    let mut rest = p.as_str();
    while let Some(open) = rest.find('{') {
        re.push_str(&regex::escape(&rest[..open]));
        let tail = &rest[open..];
        if let Some(r) = tail.strip_prefix("{layer}") {
            re.push_str(r"(?P<layer>\d+)");
            rest = r;
        } else if let Some(r) = tail.strip_prefix("{expert}") {
            re.push_str(r"(?P<expert>\d+)");
            rest = r;
        } else {
            return Err(Error::MapInvalid(format!(
                "pattern {p:?} has an unknown placeholder"
            )));
        }
    }
    re.push_str(&regex::escape(rest));
    re.push('$');

    Ok(CompiledRule {
        regex: Regex::new(&re).map_err(|e| Error::MapInvalid(e.to_string()))?,
        pattern: rule.pattern,
        target,
    })
}

fn validate_fused(pattern: &str, order: &[ProjectionKind]) -> Result<Vec<ProjectionKind>> {
    use ProjectionKind::*;
    let mut sorted = order.to_vec();
    sorted.sort();
    sorted.dedup();
    let qkv_subset = !sorted.is_empty() && sorted.iter().all(|k| matches!(k, Q | K | V));
    let gate_up = sorted == [Gate, Up];
    if sorted.len() != order.len() || !(qkv_subset || gate_up) {
        return Err(Error::MapInvalid(format!(
            "rule {pattern:?}: fused_order must be distinct kinds drawn from q/k/v, or gate+up"
        )));
    }
    Ok(order.to_vec())
}
