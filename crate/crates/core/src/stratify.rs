//! Rule-based stratification: every document lands in exactly one stratum.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Document};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule {rule_id}: invalid pattern: {source}")]
    Pattern {
        rule_id: String,
        #[source]
        source: Box<regex::Error>,
    },
    #[error("rule {0} has neither a pattern nor max_lines")]
    NoCondition(String),
    #[error("priority {priority} is used by both {first} and {second}")]
    DuplicatePriority {
        priority: i64,
        first: String,
        second: String,
    },
    #[error("rule id {0} is used more than once")]
    DuplicateRuleId(String),
    #[error("rule set has no default_stratum")]
    MissingDefault,
    #[error("cannot read rule set {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rule set: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A key-phrase pattern and/or length threshold. When both are given, both
/// must hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratificationRule {
    pub rule_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_lines: Option<usize>,
    pub target_stratum: String,
    /// Higher wins.
    pub priority: i64,
}

/// The rule-set config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub default_stratum: String,
    #[serde(default)]
    pub rules: Vec<StratificationRule>,
    /// Patterns only see this many leading bytes of each document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_prefix_bytes: Option<usize>,
}

impl RuleSet {
    pub fn from_json(json: &str) -> Result<Self, RuleError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        let json = std::fs::read_to_string(path).map_err(|source| RuleError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json)
    }

    /// Validates the set and compiles every pattern.
    pub fn compile(&self) -> Result<CompiledRules, RuleError> {
        if self.default_stratum.trim().is_empty() {
            return Err(RuleError::MissingDefault);
        }
        let mut ids = HashSet::new();
        let mut priorities: BTreeMap<i64, &str> = BTreeMap::new();
        let mut rules = Vec::with_capacity(self.rules.len());
        for rule in &self.rules {
            if !ids.insert(rule.rule_id.as_str()) {
                return Err(RuleError::DuplicateRuleId(rule.rule_id.clone()));
            }
            if let Some(first) = priorities.insert(rule.priority, &rule.rule_id) {
                return Err(RuleError::DuplicatePriority {
                    priority: rule.priority,
                    first: first.to_string(),
                    second: rule.rule_id.clone(),
                });
            }
            if rule.pattern.is_none() && rule.max_lines.is_none() {
                return Err(RuleError::NoCondition(rule.rule_id.clone()));
            }
            let regex = rule
                .pattern
                .as_deref()
                .map(Regex::new)
                .transpose()
                .map_err(|e| RuleError::Pattern {
                    rule_id: rule.rule_id.clone(),
                    source: Box::new(e),
                })?;
            rules.push(CompiledRule {
                rule: rule.clone(),
                regex,
            });
        }
        rules.sort_by(|a, b| b.rule.priority.cmp(&a.rule.priority));

        let mut labels: Vec<String> = Vec::new();
        for r in &rules {
            if !labels.contains(&r.rule.target_stratum) {
                labels.push(r.rule.target_stratum.clone());
            }
        }
        if !labels.contains(&self.default_stratum) {
            labels.push(self.default_stratum.clone());
        }

        Ok(CompiledRules {
            rules,
            default_stratum: self.default_stratum.clone(),
            match_prefix_bytes: self.match_prefix_bytes,
            labels,
        })
    }
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: StratificationRule,
    regex: Option<Regex>,
}

/// A validated rule set in evaluation order.
#[derive(Debug, Clone)]
pub struct CompiledRules {
    rules: Vec<CompiledRule>,
    default_stratum: String,
    match_prefix_bytes: Option<usize>,
    labels: Vec<String>,
}

impl CompiledRules {
    /// Stratum labels in a fixed order: rule targets by descending priority,
    /// then the default.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn default_stratum(&self) -> &str {
        &self.default_stratum
    }

    /// First matching rule's stratum, or the default.
    pub fn classify(&self, text: &str, line_count: usize) -> &str {
        let text = match self.match_prefix_bytes {
            Some(n) if n < text.len() => &text[..text.floor_char_boundary(n)],
            _ => text,
        };
        self.rules
            .iter()
            .find(|r| {
                r.rule.max_lines.is_none_or(|max| line_count <= max)
                    && r.regex.as_ref().is_none_or(|re| re.is_match(text))
            })
            .map(|r| r.rule.target_stratum.as_str())
            .unwrap_or(&self.default_stratum)
    }

    pub fn classify_document(&self, doc: &Document, text: &str) -> &str {
        self.classify(text, doc.line_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMembers {
    pub label: String,
    pub count: usize,
    /// Share of the corpus, `count / total_count`.
    pub fraction: f64,
    pub doc_ids: Vec<String>,
}

impl StratumMembers {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// The partition file: per-stratum counts, fractions and members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumPartition {
    pub default_stratum: String,
    pub total_count: usize,
    pub strata: Vec<StratumMembers>,
}

impl StratumPartition {
    pub fn stratum(&self, label: &str) -> Option<&StratumMembers> {
        self.strata.iter().find(|s| s.label == label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.strata.iter().map(|s| s.label.as_str())
    }

    pub fn empty_strata(&self) -> impl Iterator<Item = &str> {
        self.strata.iter().filter(|s| s.is_empty()).map(|s| s.label.as_str())
    }

    /// Builds a partition from per-document labels, in corpus order.
    pub fn from_assignments<'a>(
        labels: &[String],
        default_stratum: &str,
        assignments: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let mut strata: Vec<StratumMembers> = labels
            .iter()
            .map(|l| StratumMembers {
                label: l.clone(),
                count: 0,
                fraction: 0.0,
                doc_ids: Vec::new(),
            })
            .collect();
        let mut total = 0;
        for (doc_id, label) in assignments {
            let slot = strata
                .iter_mut()
                .find(|s| s.label == label)
                .expect("classify only returns known labels");
            slot.doc_ids.push(doc_id.to_string());
            slot.count += 1;
            total += 1;
        }
        for s in &mut strata {
            s.fraction = if total == 0 {
                0.0
            } else {
                s.count as f64 / total as f64
            };
        }
        Self {
            default_stratum: default_stratum.to_string(),
            total_count: total,
            strata,
        }
    }
}

/// Classifies every document of the corpus.
pub fn stratify_corpus(corpus: &Corpus, rules: &CompiledRules) -> Result<StratumPartition, RuleError> {
    let assigned: Vec<&str> = corpus.map_documents(|doc, text| rules.classify_document(doc, text))?;
    let partition = StratumPartition::from_assignments(
        rules.labels(),
        rules.default_stratum(),
        corpus
            .documents
            .iter()
            .map(|d| d.doc_id.as_str())
            .zip(assigned),
    );
    for label in partition.empty_strata() {
        tracing::warn!(stratum = label, "stratum is empty and cannot be sampled");
    }
    Ok(partition)
}
