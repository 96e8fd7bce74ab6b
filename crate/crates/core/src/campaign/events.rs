use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationPlan;
use crate::combine::CombinedEstimate;
use crate::density::ElicitedPrior;
use crate::sampler::{Phase, Tally, Verdict};

/// A stratum's prior: flat, or splined from elicited points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorChoice {
    Uniform,
    Elicited(ElicitedPrior),
}

impl PriorChoice {
    pub fn is_uniform(&self) -> bool {
        matches!(self, PriorChoice::Uniform)
    }

    pub fn describe(&self) -> &'static str {
        match self {
            PriorChoice::Uniform => "non-informative",
            PriorChoice::Elicited(_) => "informative",
        }
    }
}

/// Per-stratum summary stored with each result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub label: String,
    pub fraction: f64,
    pub prior: String,
    pub tally: Tally,
    pub posterior_mean: f64,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    PriorSet {
        stratum: String,
        prior: PriorChoice,
    },
    /// Opens a batch of draws; the `draw` events follow immediately.
    PhaseOpened {
        batch: u32,
        phase: Phase,
        seed: u64,
        rng: String,
        /// New draws per stratum in this batch.
        counts: BTreeMap<String, u64>,
        first_draw_id: u64,
    },
    Draw {
        draw_id: u64,
        batch: u32,
        stratum: String,
        doc_id: String,
    },
    Judgment {
        draw_id: u64,
        verdict: Verdict,
        reviewer: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auto_filled_from: Option<u64>,
    },
    /// Supersedes the verdict of an already judged draw.
    Correction {
        draw_id: u64,
        verdict: Verdict,
        reviewer: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Planned {
        budget: u64,
        costs: BTreeMap<String, f64>,
        plan: AllocationPlan,
    },
    Finalized {
        index: u32,
        /// Number of batches the result covers.
        batches: u32,
        estimate: CombinedEstimate,
        strata: Vec<StratumResult>,
        density_file: String,
        density_sha256: String,
    },
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::PriorSet { .. } => "prior_set",
            Event::PhaseOpened { .. } => "phase_opened",
            Event::Draw { .. } => "draw",
            Event::Judgment { .. } => "judgment",
            Event::Correction { .. } => "correction",
            Event::Planned { .. } => "planned",
            Event::Finalized { .. } => "finalized",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judgment_line_shape() {
        let rec = EventRecord {
            seq: 4,
            at: DateTime::UNIX_EPOCH,
            event: Event::Judgment {
                draw_id: 2,
                verdict: Verdict::NoMatch,
                reviewer: "kt".into(),
                note: None,
                auto_filled_from: None,
            },
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"seq":4,"at":"1970-01-01T00:00:00Z","event":"judgment","draw_id":2,"verdict":"no_match","reviewer":"kt"}"#
        );
        assert_eq!(serde_json::from_str::<EventRecord>(&line).unwrap(), rec);
    }

    #[test]
    fn prior_choice_shapes() {
        assert_eq!(serde_json::to_string(&PriorChoice::Uniform).unwrap(), r#"{"kind":"uniform"}"#);
        let e = PriorChoice::Elicited(ElicitedPrior::at_tenths([1.0; 11]).unwrap());
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.starts_with(r#"{"kind":"elicited","points":[{"x":0.0,"likelihood":1.0}"#), "{json}");
        assert_eq!(serde_json::from_str::<PriorChoice>(&json).unwrap(), e);
    }
}
