//! A study as an append-only event log.
//!
//! The header (`campaign.json`) freezes the corpus reference, rules and
//! partition. Everything after that (priors, draws, judgments, plans and
//! results) is an [`Event`] in `events.jsonl`, and all state is derived by
//! folding the log. The expected order is
//!
//! ```text
//! priors -> presample -> plan -> full sample -> finalize -> (extension -> finalize)*
//! ```
//!
//! Posteriors are chained batch by batch: each batch's binomial likelihood
//! multiplies the posterior left by the batches before it, starting from the
//! stratum prior.

mod events;
mod report;
mod store;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocation::{newbold_allocate, AllocationError, AllocationPlan, StratumState};
use crate::combine::{self, CombineError, CombinedEstimate};
use crate::corpus::{Corpus, CorpusError};
use crate::density::{
    posterior, spline_prior, DensityError, ElicitedPrior, Grid, GridDensity,
};
use crate::sampler::{draw_with_replacement, rng_for, Phase, SampleDraw, SamplingError, Tally, Verdict, RNG_ALGORITHM};
use crate::stratify::{RuleError, RuleSet, StratumPartition};

pub use events::{Event, EventRecord, PriorChoice, StratumResult};
pub use report::{build_report, Report, ReportRow, ReportStratum, ReportTally, REPORT_SCHEMA, REPORT_SCHEMA_VERSION};
pub use store::{CampaignStore, ReplayReport, CORPUS_FILE, EVENTS_FILE, HEADER_FILE, LOCK_FILE, RESULTS_DIR};

pub const CAMPAIGN_SCHEMA_VERSION: u32 = 1;

/// Lines of a document shown to a reviewer before expanding.
pub const PREVIEW_LINES: usize = 50;

pub const DEFAULT_QUESTION: &str = "Is this a real document rather than publication apparatus?";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("unknown stratum {0:?}")]
    UnknownStratum(String),
    #[error("unknown draw {0}")]
    UnknownDraw(u64),
    #[error("draw {0} is already judged")]
    AlreadyJudged(u64),
    #[error("draw {0} has not been judged yet")]
    NotJudged(u64),
    #[error("cannot {action} in state {state}")]
    InvalidState { action: &'static str, state: CampaignState },
    #[error("priors are locked once an allocation plan exists")]
    PriorLocked,
    #[error("stratum {stratum}: plan allots {planned} draws but {taken} were already presampled")]
    PlanBelowPresample { stratum: String, planned: u64, taken: u64 },
    #[error("unjudged draws: {}", join_ids(.0))]
    Pending(Vec<u64>),
    #[error("campaign has no results")]
    NoResults,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed campaign data: {reason}")]
    Malformed { path: std::path::PathBuf, reason: String },
    #[error("campaign already exists at {0}")]
    Exists(std::path::PathBuf),
    #[error("no campaign at {0}")]
    NotFound(std::path::PathBuf),
}

fn join_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

/// Coarse error classes, for exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Invalid,
    Internal,
}

impl CampaignError {
    pub fn kind(&self) -> ErrorKind {
        use CampaignError::*;
        match self {
            UnknownStratum(_) | UnknownDraw(_) | NotFound(_) => ErrorKind::NotFound,
            AlreadyJudged(_) | NotJudged(_) | InvalidState { .. } | PriorLocked | Pending(_) | NoResults
            | Exists(_) => ErrorKind::Conflict,
            PlanBelowPresample { .. } | Invalid(_) | Density(_) | Allocation(_) | Rules(_) => ErrorKind::Invalid,
            Sampling(SamplingError::Pending(_)) => ErrorKind::Conflict,
            Sampling(_) | Combine(_) => ErrorKind::Invalid,
            Corpus(_) | Io { .. } | Malformed { .. } => ErrorKind::Internal,
        }
    }

    /// Short stable code for machine consumers.
    pub fn code(&self) -> &'static str {
        use CampaignError::*;
        match self {
            UnknownStratum(_) => "unknown_stratum",
            UnknownDraw(_) => "unknown_draw",
            AlreadyJudged(_) => "already_judged",
            NotJudged(_) => "not_judged",
            InvalidState { .. } => "invalid_state",
            PriorLocked => "prior_locked",
            PlanBelowPresample { .. } => "plan_below_presample",
            Pending(_) | Sampling(SamplingError::Pending(_)) => "pending_judgments",
            NoResults => "no_results",
            Invalid(_) => "invalid_request",
            Density(_) => "invalid_density",
            Allocation(_) => "allocation_failed",
            Combine(_) => "combine_failed",
            Sampling(_) => "sampling_failed",
            Corpus(_) => "corpus_error",
            Rules(_) => "rules_error",
            Io { .. } => "io_error",
            Malformed { .. } => "malformed_campaign",
            Exists(_) => "campaign_exists",
            NotFound(_) => "campaign_not_found",
        }
    }
}

type Result<T, E = CampaignError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignState {
    AwaitingPresample,
    Presampling,
    AwaitingPlan,
    Planned,
    FullSampling,
    ReadyToFinalize,
    Finalized,
    Extending,
}

impl fmt::Display for CampaignState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub corpus_id: String,
    pub total_count: u64,
    /// Copy of the corpus index, relative to the campaign directory.
    pub index_file: String,
}

/// Contents of `campaign.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignHeader {
    pub schema_version: u32,
    pub campaign_id: String,
    pub question: String,
    pub created_at: DateTime<Utc>,
    pub corpus: CorpusRef,
    pub rules: RuleSet,
    pub partition: StratumPartition,
    /// Serialized as the grid step.
    pub grid: Grid,
    pub mc_draws: u64,
    pub rng: String,
}

/// Inputs to [`create_campaign`] beyond the corpus and rules.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub question: String,
    pub campaign_id: Option<String>,
    pub grid: Grid,
    pub mc_draws: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            question: DEFAULT_QUESTION.to_string(),
            campaign_id: None,
            grid: Grid::default(),
            mc_draws: combine::DEFAULT_MC_DRAWS,
        }
    }
}

/// Stratifies the corpus and freezes the partition into a new header.
pub fn create_campaign(
    corpus: &Corpus,
    rules: &RuleSet,
    config: &CampaignConfig,
    at: DateTime<Utc>,
) -> Result<CampaignHeader> {
    let compiled = rules.compile()?;
    let partition = crate::stratify::stratify_corpus(corpus, &compiled)?;
    header_for_partition(corpus, rules, partition, config, at)
}

/// Builds a header around an already computed partition.
pub fn header_for_partition(
    corpus: &Corpus,
    rules: &RuleSet,
    partition: StratumPartition,
    config: &CampaignConfig,
    at: DateTime<Utc>,
) -> Result<CampaignHeader> {
    if config.mc_draws == 0 {
        return Err(CampaignError::Invalid("mc_draws must be positive".into()));
    }
    let campaign_id = match &config.campaign_id {
        Some(id) => {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(CampaignError::Invalid(format!("bad campaign id {id:?}")));
            }
            id.clone()
        }
        None => {
            let mut h = Sha256::new();
            h.update(corpus.corpus_id.as_bytes());
            h.update([0]);
            h.update(serde_json::to_vec(rules).expect("rules serialize"));
            h.update([0]);
            h.update(config.question.as_bytes());
            format!("campaign-{}", &hex::encode(h.finalize())[..12])
        }
    };
    Ok(CampaignHeader {
        schema_version: CAMPAIGN_SCHEMA_VERSION,
        campaign_id,
        question: config.question.clone(),
        created_at: at,
        corpus: CorpusRef {
            corpus_id: corpus.corpus_id.clone(),
            total_count: partition.total_count as u64,
            index_file: CORPUS_FILE.to_string(),
        },
        rules: rules.clone(),
        partition,
        grid: config.grid,
        mc_draws: config.mc_draws,
        rng: RNG_ALGORITHM.to_string(),
    })
}

/// One opened batch of draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: u32,
    pub phase: Phase,
    pub seed: u64,
    pub counts: BTreeMap<String, u64>,
    pub first_draw_id: u64,
    pub size: u64,
}

impl Batch {
    fn draw_ids(&self) -> std::ops::Range<u64> {
        self.first_draw_id..self.first_draw_id + self.size
    }
}

/// A draw with its current (latest) verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawStatus {
    #[serde(flatten)]
    pub draw: SampleDraw,
    pub batch: u32,
    pub verdict: Option<Verdict>,
    pub reviewer: Option<String>,
    pub auto_filled_from: Option<u64>,
    pub corrected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub budget: u64,
    pub costs: BTreeMap<String, f64>,
    pub plan: AllocationPlan,
}

/// A stored result. The density is only present once loaded or computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub index: u32,
    pub batches: u32,
    pub at: DateTime<Utc>,
    pub estimate: CombinedEstimate,
    pub strata: Vec<StratumResult>,
    pub density_file: String,
    pub density_sha256: String,
    pub density: Option<GridDensity>,
}

/// The folded state of a campaign.
#[derive(Debug, Clone)]
pub struct Campaign {
    header: CampaignHeader,
    records: Vec<EventRecord>,
    priors: BTreeMap<String, PriorChoice>,
    batches: Vec<Batch>,
    draws: Vec<DrawStatus>,
    /// Draws announced by the open batch but not yet logged.
    unlisted: u64,
    plan: Option<PlanRecord>,
    results: Vec<ResultRecord>,
}

/// Hex SHA-256 over the little-endian bits of the masses.
pub fn density_digest(d: &GridDensity) -> String {
    let mut h = Sha256::new();
    for m in d.masses() {
        h.update(m.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// The first `PREVIEW_LINES` lines of a document, and whether more follow.
pub fn preview(text: &str) -> (&str, bool) {
    let mut end = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i == PREVIEW_LINES {
            return (&text[..end], true);
        }
        end += line.len();
    }
    (text, false)
}

impl Campaign {
    pub fn new(header: CampaignHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            priors: BTreeMap::new(),
            batches: Vec::new(),
            draws: Vec::new(),
            unlisted: 0,
            plan: None,
            results: Vec::new(),
        }
    }

    /// Folds `records` over a fresh campaign, validating each event.
    pub fn from_records(header: CampaignHeader, records: Vec<EventRecord>) -> Result<Self> {
        let mut c = Self::new(header);
        for r in records {
            c.apply(r)?;
        }
        Ok(c)
    }

    pub fn header(&self) -> &CampaignHeader {
        &self.header
    }

    pub fn id(&self) -> &str {
        &self.header.campaign_id
    }

    pub fn grid(&self) -> Grid {
        self.header.grid
    }

    pub fn partition(&self) -> &StratumPartition {
        &self.header.partition
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn draws(&self) -> &[DrawStatus] {
        &self.draws
    }

    pub fn draw(&self, draw_id: u64) -> Result<&DrawStatus> {
        self.draws
            .get(draw_id as usize)
            .ok_or(CampaignError::UnknownDraw(draw_id))
    }

    pub fn plan(&self) -> Option<&PlanRecord> {
        self.plan.as_ref()
    }

    pub fn results(&self) -> &[ResultRecord] {
        &self.results
    }

    pub(crate) fn results_mut(&mut self) -> &mut [ResultRecord] {
        &mut self.results
    }

    pub fn prior_choice(&self, stratum: &str) -> Result<&PriorChoice> {
        self.stratum_index(stratum)?;
        Ok(self.priors.get(stratum).unwrap_or(&PriorChoice::Uniform))
    }

    fn stratum_index(&self, stratum: &str) -> Result<usize> {
        self.header
            .partition
            .strata
            .iter()
            .position(|s| s.label == stratum)
            .ok_or_else(|| CampaignError::UnknownStratum(stratum.to_string()))
    }

    /// Draws in log order that still lack a verdict.
    pub fn pending(&self) -> Vec<u64> {
        self.draws
            .iter()
            .filter(|d| d.verdict.is_none())
            .map(|d| d.draw.draw_id)
            .collect()
    }

    pub fn state(&self) -> CampaignState {
        let Some(last) = self.batches.last() else {
            return CampaignState::AwaitingPresample;
        };
        let open = self.unlisted > 0 || self.draws[last.draw_ids().start as usize..].iter().any(|d| d.verdict.is_none());
        match (last.phase, open) {
            (Phase::Presample, true) => CampaignState::Presampling,
            (Phase::Presample, false) if self.plan.is_some() => CampaignState::Planned,
            (Phase::Presample, false) => CampaignState::AwaitingPlan,
            (Phase::Full, true) => CampaignState::FullSampling,
            (Phase::Extension, true) => CampaignState::Extending,
            (_, false) => {
                if self.results.last().is_some_and(|r| r.batches as usize == self.batches.len()) {
                    CampaignState::Finalized
                } else {
                    CampaignState::ReadyToFinalize
                }
            }
        }
    }

    fn require(&self, action: &'static str, allowed: &[CampaignState]) -> Result<()> {
        let state = self.state();
        if allowed.contains(&state) {
            Ok(())
        } else {
            Err(CampaignError::InvalidState { action, state })
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> CampaignError {
        CampaignError::Malformed {
            path: std::path::PathBuf::from(EVENTS_FILE),
            reason: reason.into(),
        }
    }

    /// Validates and folds one event.
    pub fn apply(&mut self, record: EventRecord) -> Result<()> {
        if record.seq != self.records.len() as u64 {
            return Err(self.malformed(format!(
                "event seq {} where {} was expected",
                record.seq,
                self.records.len()
            )));
        }
        if self.unlisted > 0 && !matches!(record.event, Event::Draw { .. }) {
            return Err(self.malformed(format!("{} event inside an unfinished batch", record.event.name())));
        }
        match &record.event {
            Event::PriorSet { stratum, prior } => {
                self.stratum_index(stratum)?;
                if self.plan.is_some() {
                    return Err(CampaignError::PriorLocked);
                }
                self.prior_density_for(prior)?;
                self.priors.insert(stratum.clone(), prior.clone());
            }
            Event::PhaseOpened {
                batch,
                phase,
                seed,
                rng,
                counts,
                first_draw_id,
            } => {
                self.check_phase_allowed(*phase)?;
                if *batch as usize != self.batches.len() || *first_draw_id != self.draws.len() as u64 {
                    return Err(self.malformed("batch or draw numbering out of sequence"));
                }
                if rng != RNG_ALGORITHM {
                    return Err(self.malformed(format!("unsupported generator {rng:?}")));
                }
                for label in counts.keys() {
                    self.stratum_index(label)?;
                }
                let size = counts.values().sum();
                self.batches.push(Batch {
                    batch: *batch,
                    phase: *phase,
                    seed: *seed,
                    counts: counts.clone(),
                    first_draw_id: *first_draw_id,
                    size,
                });
                self.unlisted = size;
            }
            Event::Draw {
                draw_id,
                batch,
                stratum,
                doc_id,
            } => {
                let Some(open) = self.batches.last() else {
                    return Err(self.malformed("draw before any batch"));
                };
                if self.unlisted == 0 || *batch != open.batch || *draw_id != self.draws.len() as u64 {
                    return Err(self.malformed(format!("unexpected draw {draw_id}")));
                }
                let phase = open.phase;
                let members = &self.header.partition.strata[self.stratum_index(stratum)?];
                if !members.doc_ids.iter().any(|d| d == doc_id) {
                    return Err(self.malformed(format!("{doc_id} is not in stratum {stratum}")));
                }
                self.draws.push(DrawStatus {
                    draw: SampleDraw {
                        draw_id: *draw_id,
                        stratum: stratum.clone(),
                        doc_id: doc_id.clone(),
                        phase,
                    },
                    batch: *batch,
                    verdict: None,
                    reviewer: None,
                    auto_filled_from: None,
                    corrected: false,
                });
                self.unlisted -= 1;
            }
            Event::Judgment {
                draw_id,
                verdict,
                reviewer,
                auto_filled_from,
                ..
            } => {
                let d = self.draw(*draw_id)?;
                if d.verdict.is_some() {
                    return Err(CampaignError::AlreadyJudged(*draw_id));
                }
                if let Some(src) = auto_filled_from {
                    let s = self.draw(*src)?;
                    if s.draw.doc_id != d.draw.doc_id || s.verdict != Some(*verdict) {
                        return Err(self.malformed(format!("draw {draw_id} auto-filled from unrelated draw {src}")));
                    }
                }
                let d = &mut self.draws[*draw_id as usize];
                d.verdict = Some(*verdict);
                d.reviewer = Some(reviewer.clone());
                d.auto_filled_from = *auto_filled_from;
            }
            Event::Correction {
                draw_id,
                verdict,
                reviewer,
                ..
            } => {
                if self.draw(*draw_id)?.verdict.is_none() {
                    return Err(CampaignError::NotJudged(*draw_id));
                }
                let d = &mut self.draws[*draw_id as usize];
                d.verdict = Some(*verdict);
                d.reviewer = Some(reviewer.clone());
                d.corrected = true;
            }
            Event::Planned { budget, costs, plan } => {
                self.require("plan", &[CampaignState::AwaitingPlan, CampaignState::Planned])?;
                self.plan = Some(PlanRecord {
                    budget: *budget,
                    costs: costs.clone(),
                    plan: plan.clone(),
                });
            }
            Event::Finalized {
                index,
                batches,
                estimate,
                strata,
                density_file,
                density_sha256,
            } => {
                self.require("finalize", &[CampaignState::ReadyToFinalize, CampaignState::Finalized])?;
                if *index as usize != self.results.len() || *batches as usize != self.batches.len() {
                    return Err(self.malformed("result numbering out of sequence"));
                }
                self.results.push(ResultRecord {
                    index: *index,
                    batches: *batches,
                    at: record.at,
                    estimate: estimate.clone(),
                    strata: strata.clone(),
                    density_file: density_file.clone(),
                    density_sha256: density_sha256.clone(),
                    density: None,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    fn push(&mut self, at: DateTime<Utc>, event: Event) -> Result<()> {
        let seq = self.records.len() as u64;
        self.apply(EventRecord { seq, at, event })
    }

    fn check_phase_allowed(&self, phase: Phase) -> Result<()> {
        match phase {
            Phase::Presample => self.require("open the presample", &[CampaignState::AwaitingPresample]),
            Phase::Full => self.require("open the full sample", &[CampaignState::Planned]),
            Phase::Extension => self.require("open an extension", &[CampaignState::Finalized]),
        }
    }

    // ---- densities ----

    fn prior_density_for(&self, prior: &PriorChoice) -> Result<GridDensity> {
        Ok(match prior {
            PriorChoice::Uniform => GridDensity::uniform(self.grid()),
            PriorChoice::Elicited(e) => spline_prior(e, self.grid())?,
        })
    }

    pub fn prior_density(&self, stratum: &str) -> Result<GridDensity> {
        self.prior_density_for(self.prior_choice(stratum)?)
    }

    /// Judged matches and trials of `stratum` within one batch.
    pub fn batch_tally(&self, stratum: &str, batch: &Batch) -> Tally {
        let mut t = Tally::default();
        for d in &self.draws[batch.draw_ids().start as usize..(batch.draw_ids().end as usize).min(self.draws.len())] {
            if d.draw.stratum == stratum {
                if let Some(v) = d.verdict {
                    t.trials += 1;
                    t.successes += u64::from(v.is_match());
                }
            }
        }
        t
    }

    /// Cumulative judged tally of `stratum` over the first `batches` batches.
    pub fn tally(&self, stratum: &str, batches: usize) -> Tally {
        self.batches[..batches.min(self.batches.len())]
            .iter()
            .fold(Tally::default(), |acc, b| acc.merged(self.batch_tally(stratum, b)))
    }

    /// Prior updated batch by batch with the judged draws of the first
    /// `batches` batches. Unjudged draws are ignored.
    pub fn posterior(&self, stratum: &str, batches: usize) -> Result<GridDensity> {
        let mut current = self.prior_density(stratum)?;
        for b in &self.batches[..batches.min(self.batches.len())] {
            let t = self.batch_tally(stratum, b);
            if t.trials > 0 {
                let lik = GridDensity::binomial_likelihood(self.grid(), t.trials, t.successes)?;
                current = posterior(&lik, &current)?;
            }
        }
        Ok(current)
    }

    /// Number of presample batches (0 or 1).
    fn presample_batches(&self) -> usize {
        usize::from(self.batches.first().is_some_and(|b| b.phase == Phase::Presample))
    }

    pub fn presample_posterior(&self, stratum: &str) -> Result<GridDensity> {
        self.posterior(stratum, self.presample_batches())
    }

    pub fn current_posterior(&self, stratum: &str) -> Result<GridDensity> {
        self.posterior(stratum, self.batches.len())
    }

    // ---- operations ----

    /// Records a prior for `stratum`. Allowed until a plan exists.
    pub fn set_prior(&mut self, stratum: &str, prior: PriorChoice, at: DateTime<Utc>) -> Result<GridDensity> {
        self.stratum_index(stratum)?;
        if self.plan.is_some() {
            return Err(CampaignError::PriorLocked);
        }
        let density = self.prior_density_for(&prior)?;
        self.push(
            at,
            Event::PriorSet {
                stratum: stratum.to_string(),
                prior,
            },
        )?;
        Ok(density)
    }

    /// Per-stratum counts for a new batch. Full-sample counts come from the
    /// plan less what the presample already took.
    pub fn phase_counts(&self, phase: Phase, requested: Option<&BTreeMap<String, u64>>) -> Result<BTreeMap<String, u64>> {
        self.check_phase_allowed(phase)?;
        match phase {
            Phase::Full => {
                if requested.is_some() {
                    return Err(CampaignError::Invalid(
                        "full-sample counts come from the allocation plan".into(),
                    ));
                }
                let plan = &self.plan.as_ref().expect("planned state has a plan").plan;
                let mut counts = BTreeMap::new();
                for s in &plan.per_stratum {
                    let taken = self.tally(&s.label, self.presample_batches()).trials;
                    if s.count < taken {
                        return Err(CampaignError::PlanBelowPresample {
                            stratum: s.label.clone(),
                            planned: s.count,
                            taken,
                        });
                    }
                    counts.insert(s.label.clone(), s.count - taken);
                }
                Ok(counts)
            }
            Phase::Presample | Phase::Extension => {
                let requested = requested.ok_or_else(|| {
                    CampaignError::Invalid(format!("{phase} needs per-stratum counts"))
                })?;
                for label in requested.keys() {
                    self.stratum_index(label)?;
                }
                Ok(self
                    .header
                    .partition
                    .strata
                    .iter()
                    .map(|s| (s.label.clone(), requested.get(&s.label).copied().unwrap_or(0)))
                    .collect())
            }
        }
    }

    /// The draws a batch with these counts and seed produces.
    fn generate_draws(&self, phase: Phase, counts: &BTreeMap<String, u64>, seed: u64) -> Result<Vec<SampleDraw>> {
        let mut out = Vec::new();
        for (stream, s) in self.header.partition.strata.iter().enumerate() {
            let count = counts.get(&s.label).copied().unwrap_or(0);
            let mut rng = rng_for(seed, stream as u64);
            let first = self.draws.len() as u64 + out.len() as u64;
            out.extend(draw_with_replacement(&s.label, &s.doc_ids, count, phase, first, &mut rng)?);
        }
        Ok(out)
    }

    /// Opens a batch and logs its draws. Draws of documents that already
    /// carry a verdict are judged automatically from that verdict.
    pub fn run_phase(
        &mut self,
        phase: Phase,
        counts: Option<&BTreeMap<String, u64>>,
        seed: u64,
        at: DateTime<Utc>,
    ) -> Result<Vec<SampleDraw>> {
        let counts = self.phase_counts(phase, counts)?;
        let draws = self.generate_draws(phase, &counts, seed)?;
        let batch = self.batches.len() as u32;
        self.push(
            at,
            Event::PhaseOpened {
                batch,
                phase,
                seed,
                rng: RNG_ALGORITHM.to_string(),
                counts,
                first_draw_id: self.draws.len() as u64,
            },
        )?;
        for d in &draws {
            self.push(
                at,
                Event::Draw {
                    draw_id: d.draw_id,
                    batch,
                    stratum: d.stratum.clone(),
                    doc_id: d.doc_id.clone(),
                },
            )?;
        }
        for d in &draws {
            if let Some(src) = self.earlier_verdict(&d.doc_id, d.draw_id) {
                let verdict = self.draws[src as usize].verdict.expect("judged");
                tracing::info!(draw_id = d.draw_id, from = src, "duplicate document, verdict copied");
                self.push(
                    at,
                    Event::Judgment {
                        draw_id: d.draw_id,
                        verdict,
                        reviewer: self.draws[src as usize].reviewer.clone().unwrap_or_default(),
                        note: None,
                        auto_filled_from: Some(src),
                    },
                )?;
            }
        }
        Ok(draws)
    }

    /// First judged draw of `doc_id` other than `except`.
    fn earlier_verdict(&self, doc_id: &str, except: u64) -> Option<u64> {
        self.draws
            .iter()
            .find(|d| d.draw.draw_id != except && d.verdict.is_some() && d.draw.doc_id == doc_id)
            .map(|d| d.draw.draw_id)
    }

    /// Records a verdict and copies it to other unjudged draws of the same
    /// document. Returns the ids that were auto-filled.
    pub fn judge(
        &mut self,
        draw_id: u64,
        verdict: Verdict,
        reviewer: &str,
        note: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<Vec<u64>> {
        if self.draw(draw_id)?.verdict.is_some() {
            return Err(CampaignError::AlreadyJudged(draw_id));
        }
        self.push(
            at,
            Event::Judgment {
                draw_id,
                verdict,
                reviewer: reviewer.to_string(),
                note,
                auto_filled_from: None,
            },
        )?;
        let doc = self.draws[draw_id as usize].draw.doc_id.clone();
        let twins: Vec<u64> = self
            .draws
            .iter()
            .filter(|d| d.verdict.is_none() && d.draw.doc_id == doc)
            .map(|d| d.draw.draw_id)
            .collect();
        for id in &twins {
            self.push(
                at,
                Event::Judgment {
                    draw_id: *id,
                    verdict,
                    reviewer: reviewer.to_string(),
                    note: None,
                    auto_filled_from: Some(draw_id),
                },
            )?;
        }
        Ok(twins)
    }

    /// Supersedes a verdict, and those copied from it.
    pub fn correct(
        &mut self,
        draw_id: u64,
        verdict: Verdict,
        reviewer: &str,
        note: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<Vec<u64>> {
        if self.draw(draw_id)?.verdict.is_none() {
            return Err(CampaignError::NotJudged(draw_id));
        }
        self.push(
            at,
            Event::Correction {
                draw_id,
                verdict,
                reviewer: reviewer.to_string(),
                note,
            },
        )?;
        let copies: Vec<u64> = self
            .draws
            .iter()
            .filter(|d| d.auto_filled_from == Some(draw_id))
            .map(|d| d.draw.draw_id)
            .collect();
        for id in &copies {
            self.push(
                at,
                Event::Correction {
                    draw_id: *id,
                    verdict,
                    reviewer: reviewer.to_string(),
                    note: Some(format!("follows correction of draw {draw_id}")),
                },
            )?;
        }
        Ok(copies)
    }

    /// Allocation inputs from the presample posteriors.
    pub fn allocation_inputs(&self, costs: &BTreeMap<String, f64>) -> Result<Vec<StratumState>> {
        for label in costs.keys() {
            self.stratum_index(label)?;
        }
        let presample = self.presample_batches();
        self.header
            .partition
            .strata
            .iter()
            .map(|s| {
                let t = self.tally(&s.label, presample);
                let post = self.posterior(&s.label, presample)?;
                Ok(
                    StratumState::from_posterior(&s.label, s.fraction, t.trials, t.successes, &post)
                        .with_cost(costs.get(&s.label).copied().unwrap_or(1.0)),
                )
            })
            .collect()
    }

    fn compute_plan(&self, budget: u64, costs: &BTreeMap<String, f64>) -> Result<AllocationPlan> {
        Ok(newbold_allocate(&self.allocation_inputs(costs)?, budget)?)
    }

    /// Allocates `budget` total documents (presample included).
    pub fn make_plan(&mut self, budget: u64, costs: BTreeMap<String, f64>, at: DateTime<Utc>) -> Result<AllocationPlan> {
        self.require("plan", &[CampaignState::AwaitingPlan, CampaignState::Planned])?;
        let plan = self.compute_plan(budget, &costs)?;
        for s in &plan.per_stratum {
            let taken = self.tally(&s.label, self.presample_batches()).trials;
            if s.count < taken {
                return Err(CampaignError::PlanBelowPresample {
                    stratum: s.label.clone(),
                    planned: s.count,
                    taken,
                });
            }
        }
        self.push(
            at,
            Event::Planned {
                budget,
                costs,
                plan: plan.clone(),
            },
        )?;
        Ok(plan)
    }

    /// Stratum posteriors over all batches, combined, with the summary rows.
    fn compute_result(&self, mass: f64, seed: u64) -> Result<(CombinedEstimate, Vec<StratumResult>, GridDensity)> {
        let pending = self.pending();
        if !pending.is_empty() {
            return Err(CampaignError::Pending(pending));
        }
        let strata = &self.header.partition.strata;
        let mut posteriors = Vec::with_capacity(strata.len());
        let mut rows = Vec::with_capacity(strata.len());
        for s in strata {
            let post = self.current_posterior(&s.label)?;
            rows.push(StratumResult {
                label: s.label.clone(),
                fraction: s.fraction,
                prior: self.prior_choice(&s.label)?.describe().to_string(),
                tally: self.tally(&s.label, self.batches.len()),
                posterior_mean: post.mean(),
            });
            posteriors.push(post);
        }
        let weights: Vec<f64> = strata.iter().map(|s| s.fraction).collect();
        let combination = combine::combine(&posteriors, &weights, self.header.mc_draws, seed)?;
        let estimate = combine::finalize(&combination, self.header.corpus.total_count, mass)?;
        Ok((estimate, rows, combination.density))
    }

    /// Combines the current posteriors and appends a result.
    pub fn finalize(&mut self, mass: f64, seed: u64, at: DateTime<Utc>) -> Result<&ResultRecord> {
        let pending = self.pending();
        if !pending.is_empty() {
            return Err(CampaignError::Pending(pending));
        }
        self.require("finalize", &[CampaignState::ReadyToFinalize, CampaignState::Finalized])?;
        if !(mass > 0.0 && mass < 1.0) {
            return Err(CampaignError::Invalid(format!("mass {mass} must lie in (0, 1)")));
        }
        let (estimate, strata, density) = self.compute_result(mass, seed)?;
        let index = self.results.len() as u32;
        let sha = density_digest(&density);
        self.push(
            at,
            Event::Finalized {
                index,
                batches: self.batches.len() as u32,
                estimate,
                strata,
                density_file: format!("{RESULTS_DIR}/result-{index:04}.json"),
                density_sha256: sha,
            },
        )?;
        let rec = self.results.last_mut().expect("just pushed");
        rec.density = Some(density);
        Ok(rec)
    }

    /// Re-derives every batch, plan and result from the log and compares
    /// them with what is stored. Densities are compared bitwise through
    /// their digests, and directly where loaded.
    pub fn replay_check(&self) -> Result<ReplayReport> {
        let mut fresh = Campaign::new(self.header.clone());
        let mut report = ReplayReport::default();
        let mut expected_draws: Vec<SampleDraw> = Vec::new();
        for rec in &self.records {
            match &rec.event {
                Event::PhaseOpened { phase, seed, counts, .. } => {
                    expected_draws = fresh.generate_draws(*phase, counts, *seed)?;
                    expected_draws.reverse();
                    report.batches += 1;
                }
                Event::Draw {
                    draw_id,
                    stratum,
                    doc_id,
                    ..
                } => {
                    let ok = expected_draws
                        .pop()
                        .is_some_and(|e| e.draw_id == *draw_id && &e.stratum == stratum && &e.doc_id == doc_id);
                    if !ok {
                        report.mismatches.push(format!("draw {draw_id} differs from its seeded replay"));
                    }
                    report.draws += 1;
                }
                Event::Planned { budget, costs, plan } => {
                    let again = fresh.compute_plan(*budget, costs)?;
                    if !same_json(&again, plan) {
                        report.mismatches.push(format!("plan at event {} differs on replay", rec.seq));
                    }
                    report.plans += 1;
                }
                Event::Finalized {
                    index,
                    estimate,
                    strata,
                    density_sha256,
                    ..
                } => {
                    let (e, s, d) = fresh.compute_result(estimate.mass, estimate.seed)?;
                    if !same_json(&e, estimate) || !same_json(&s, strata) {
                        report.mismatches.push(format!("result {index} summary differs on replay"));
                    }
                    if &density_digest(&d) != density_sha256 {
                        report.mismatches.push(format!("result {index} density digest differs on replay"));
                    }
                    if let Some(stored) = self.results.get(*index as usize).and_then(|r| r.density.as_ref()) {
                        let bitwise = stored.masses().len() == d.masses().len()
                            && stored.masses().iter().zip(d.masses()).all(|(a, b)| a.to_bits() == b.to_bits());
                        if !bitwise {
                            report.mismatches.push(format!("result {index} stored density differs on replay"));
                        }
                        report.densities_compared += 1;
                    }
                    report.results += 1;
                }
                Event::Judgment {
                    draw_id,
                    verdict,
                    auto_filled_from: Some(src),
                    ..
                } if fresh.draw(*src)?.verdict != Some(*verdict) => {
                    report.mismatches.push(format!("auto-filled draw {draw_id} disagrees with draw {src}"));
                }
                _ => {}
            }
            fresh.apply(rec.clone())?;
        }
        Ok(report)
    }

    pub fn summary(&self) -> CampaignSummary {
        let batches = self.batches.len();
        let strata = self
            .header
            .partition
            .strata
            .iter()
            .map(|s| {
                let drawn = self.draws.iter().filter(|d| d.draw.stratum == s.label).count() as u64;
                let tally = self.tally(&s.label, batches);
                StratumSummary {
                    label: s.label.clone(),
                    documents: s.count as u64,
                    fraction: s.fraction,
                    prior: self.priors.get(&s.label).cloned().unwrap_or(PriorChoice::Uniform),
                    drawn,
                    pending: drawn - tally.trials,
                    tally,
                }
            })
            .collect();
        CampaignSummary {
            schema_version: CAMPAIGN_SCHEMA_VERSION,
            campaign_id: self.header.campaign_id.clone(),
            question: self.header.question.clone(),
            state: self.state(),
            corpus_id: self.header.corpus.corpus_id.clone(),
            corpus_size: self.header.corpus.total_count,
            grid_step: self.grid().step(),
            mc_draws: self.header.mc_draws,
            strata,
            batches: self
                .batches
                .iter()
                .map(|b| BatchSummary {
                    batch: b.batch,
                    phase: b.phase,
                    seed: b.seed,
                    counts: b.counts.clone(),
                    judged: self.draws[b.draw_ids().start as usize..]
                        .iter()
                        .take(b.size as usize)
                        .filter(|d| d.verdict.is_some())
                        .count() as u64,
                })
                .collect(),
            plan: self.plan.as_ref().map(|p| p.plan.clone()),
            results: self.results.len(),
            latest: self.results.last().map(|r| r.estimate.clone()),
            events: self.records.len() as u64,
        }
    }
}

fn same_json<T: Serialize>(a: &T, b: &T) -> bool {
    serde_json::to_string(a).ok() == serde_json::to_string(b).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub label: String,
    pub documents: u64,
    pub fraction: f64,
    pub prior: PriorChoice,
    pub drawn: u64,
    pub pending: u64,
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch: u32,
    pub phase: Phase,
    pub seed: u64,
    pub counts: BTreeMap<String, u64>,
    pub judged: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub schema_version: u32,
    pub campaign_id: String,
    pub question: String,
    pub state: CampaignState,
    pub corpus_id: String,
    pub corpus_size: u64,
    pub grid_step: f64,
    pub mc_draws: u64,
    pub strata: Vec<StratumSummary>,
    pub batches: Vec<BatchSummary>,
    pub plan: Option<AllocationPlan>,
    pub results: usize,
    pub latest: Option<CombinedEstimate>,
    pub events: u64,
}

/// Convenience for elicited priors in tests and callers.
pub fn elicited(points: &[(f64, f64)]) -> Result<PriorChoice> {
    Ok(PriorChoice::Elicited(ElicitedPrior::from_pairs(points)?))
}

#[cfg(test)]
pub(crate) mod tests;
