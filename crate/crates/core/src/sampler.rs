//! With-replacement draws from a stratum and tallies of reviewer verdicts.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`), seeded with
//! `seed_from_u64` and with one counter stream per stratum, so a draw
//! sequence is a pure function of `(seed, stream, stratum order, count)` on
//! every platform.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the generator recorded alongside every seed.
pub const RNG_ALGORITHM: &str = "chacha20";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("cannot draw {count} documents from empty stratum {stratum}")]
    EmptyStratum { stratum: String, count: u64 },
    #[error("unjudged draws: {}", format_ids(.0))]
    Pending(Vec<u64>),
}

fn format_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Presample,
    Full,
    Extension,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Presample => "presample",
            Phase::Full => "full",
            Phase::Extension => "extension",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "presample" => Ok(Phase::Presample),
            "full" => Ok(Phase::Full),
            "extension" => Ok(Phase::Extension),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub draw_id: u64,
    pub stratum: String,
    pub doc_id: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Match,
    NoMatch,
}

impl Verdict {
    pub fn is_match(self) -> bool {
        self == Verdict::Match
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub draw_id: u64,
    pub verdict: Verdict,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Set when the verdict was copied from an earlier judgment of the same
    /// document rather than read again.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_filled_from: Option<u64>,
}

/// Successes and trials for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub successes: u64,
    pub trials: u64,
}

impl Tally {
    pub fn new(successes: u64, trials: u64) -> Self {
        debug_assert!(successes <= trials);
        Self { successes, trials }
    }

    pub fn merged(self, other: Tally) -> Tally {
        Tally {
            successes: self.successes + other.successes,
            trials: self.trials + other.trials,
        }
    }
}

impl std::fmt::Display for Tally {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.successes, self.trials)
    }
}

/// The generator for one `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of `count` uniform draws, with replacement, from `0..population`.
pub fn draw_indices(population: usize, count: u64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let n = population as u64;
    (0..count).map(|_| rng.random_range(0..n) as usize).collect()
}

/// `count` independent uniform draws from `stratum_docs`, numbered from
/// `first_draw_id`.
pub fn draw_with_replacement(
    stratum: &str,
    stratum_docs: &[String],
    count: u64,
    phase: Phase,
    first_draw_id: u64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<SampleDraw>, SamplingError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if stratum_docs.is_empty() {
        return Err(SamplingError::EmptyStratum {
            stratum: stratum.to_string(),
            count,
        });
    }
    Ok(draw_indices(stratum_docs.len(), count, rng)
        .into_iter()
        .enumerate()
        .map(|(i, k)| SampleDraw {
            draw_id: first_draw_id + i as u64,
            stratum: stratum.to_string(),
            doc_id: stratum_docs[k].clone(),
            phase,
        })
        .collect())
}

/// Counts matches among the judged draws of `stratum` in `phases`.
///
/// Every draw is a trial, including repeated draws of one document. If a
/// draw has several judgments the last one counts.
pub fn tally(
    judgments: &[Judgment],
    draws: &[SampleDraw],
    stratum: &str,
    phases: &BTreeSet<Phase>,
) -> Result<Tally, SamplingError> {
    let verdicts: BTreeMap<u64, Verdict> = judgments.iter().map(|j| (j.draw_id, j.verdict)).collect();
    let mut t = Tally::default();
    let mut pending = Vec::new();
    for d in draws
        .iter()
        .filter(|d| d.stratum == stratum && phases.contains(&d.phase))
    {
        match verdicts.get(&d.draw_id) {
            Some(v) => {
                t.trials += 1;
                t.successes += u64::from(v.is_match());
            }
            None => pending.push(d.draw_id),
        }
    }
    if pending.is_empty() {
        Ok(t)
    } else {
        Err(SamplingError::Pending(pending))
    }
}
