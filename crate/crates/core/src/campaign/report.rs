use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Campaign, CampaignError, Result};
use crate::allocation::AllocationPlan;
use crate::sampler::Tally;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON schema for [`Report`].
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStratum {
    pub label: String,
    pub documents: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTally {
    pub label: String,
    pub prior: String,
    pub tally: Tally,
    pub posterior_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub result: u32,
    /// `initial`, or `extension N`.
    pub label: String,
    /// `non-informative`, `informative` or `mixed`.
    pub priors: String,
    pub batches: u32,
    pub phase_seeds: Vec<u64>,
    pub mc_seed: u64,
    pub mc_draws: u64,
    pub mass: f64,
    pub mean: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub normal_lo: f64,
    pub normal_hi: f64,
    pub doc_lo: u64,
    pub doc_hi: u64,
    pub doc_interval_width: u64,
    pub strata: Vec<ReportTally>,
    pub density_sha256: String,
    pub finalized_at: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub campaign_id: String,
    pub question: String,
    pub corpus_id: String,
    pub corpus_size: u64,
    pub grid_step: f64,
    pub rng: String,
    pub strata: Vec<ReportStratum>,
    pub plan: Option<AllocationPlan>,
    pub results: Vec<ReportRow>,
}

pub fn build_report(c: &Campaign) -> Result<Report> {
    if c.results().is_empty() {
        return Err(CampaignError::NoResults);
    }
    let header = c.header();
    let mut extensions = 0;
    let results = c
        .results()
        .iter()
        .map(|r| {
            let label = if r.index == 0 {
                "initial".to_string()
            } else {
                let covered_before = c.results()[r.index as usize - 1].batches;
                if r.batches > covered_before {
                    extensions += 1;
                }
                if extensions == 0 {
                    format!("initial (rerun {})", r.index)
                } else {
                    format!("extension {extensions}")
                }
            };
            let priors = {
                let first = r.strata.first().map(|s| s.prior.as_str()).unwrap_or("non-informative");
                if r.strata.iter().all(|s| s.prior == first) {
                    first.to_string()
                } else {
                    "mixed".to_string()
                }
            };
            let e = &r.estimate;
            ReportRow {
                result: r.index,
                label,
                priors,
                batches: r.batches,
                phase_seeds: c.batches()[..r.batches as usize].iter().map(|b| b.seed).collect(),
                mc_seed: e.seed,
                mc_draws: e.mc_draws,
                mass: e.mass,
                mean: e.mean,
                interval_lo: e.interval.lo,
                interval_hi: e.interval.hi,
                normal_lo: e.normal_interval.lo,
                normal_hi: e.normal_interval.hi,
                doc_lo: e.doc_interval.lo,
                doc_hi: e.doc_interval.hi,
                doc_interval_width: e.doc_interval_width,
                strata: r
                    .strata
                    .iter()
                    .map(|s| ReportTally {
                        label: s.label.clone(),
                        prior: s.prior.clone(),
                        tally: s.tally,
                        posterior_mean: s.posterior_mean,
                    })
                    .collect(),
                density_sha256: r.density_sha256.clone(),
                finalized_at: r.at,
            }
        })
        .collect();
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        campaign_id: header.campaign_id.clone(),
        question: header.question.clone(),
        corpus_id: header.corpus.corpus_id.clone(),
        corpus_size: header.corpus.total_count,
        grid_step: header.grid.step(),
        rng: header.rng.clone(),
        strata: header
            .partition
            .strata
            .iter()
            .map(|s| ReportStratum {
                label: s.label.clone(),
                documents: s.count as u64,
                fraction: s.fraction,
            })
            .collect(),
        plan: c.plan().map(|p| p.plan.clone()),
        results,
    })
}

fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Campaign {}", self.campaign_id);
        let _ = writeln!(s, "Question: {}", self.question);
        let _ = writeln!(
            s,
            "Corpus {} ({} documents), grid step {:e}, generator {}",
            self.corpus_id,
            thousands(self.corpus_size),
            self.grid_step,
            self.rng
        );
        s.push('\n');
        let _ = writeln!(s, "{:<24} {:>10} {:>9} {:>8}", "Stratum", "Documents", "Fraction", "Planned");
        for st in &self.strata {
            let planned = self
                .plan
                .as_ref()
                .and_then(|p| p.count(&st.label))
                .map_or_else(|| "-".to_string(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>9.5} {:>8}",
                st.label,
                thousands(st.documents),
                st.fraction,
                planned
            );
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "{:<8} {:<16} {:<16} {:<26} {:<20} {:>9}",
            "Result",
            "Run",
            "Prior",
            "Interval (fraction)",
            "Interval (documents)",
            "Size of document interval"
        );
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<8} {:<16} {:<16} {:<26} {:<20} {:>9}",
                r.result + 1,
                r.label,
                r.priors,
                format!("{:.5} < p < {:.5}", r.interval_lo, r.interval_hi),
                format!("{}-{}", thousands(r.doc_lo), thousands(r.doc_hi)),
                thousands(r.doc_interval_width)
            );
        }
        s.push('\n');
        for r in &self.results {
            let tallies: Vec<String> = r
                .strata
                .iter()
                .map(|t| format!("{} {} ({})", t.label, t.tally, t.prior))
                .collect();
            let _ = writeln!(
                s,
                "Result {}: mass {}, mean {:.5}, normal interval {:.5}-{:.5}, mc draws {} seed {}, phase seeds {:?}",
                r.result + 1,
                r.mass,
                r.mean,
                r.normal_lo,
                r.normal_hi,
                r.mc_draws,
                r.mc_seed,
                r.phase_seeds
            );
            let _ = writeln!(s, "  tallies: {}", tallies.join(", "));
            let _ = writeln!(s, "  density sha256 {}", r.density_sha256);
        }
        s
    }
}
