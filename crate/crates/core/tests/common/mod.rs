//! A synthetic corpus with the shape of a year of a government register:
//! 45,820 documents in 348 files, 3,444 of them dividers carrying a
//! `>Part` marker.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use strata::campaign::Campaign;
use strata::sampler::Verdict;

pub const FILES: usize = 348;
pub const DOCUMENTS: usize = 45_820;
pub const PSEUDO: usize = 3_444;
pub const REAL: usize = DOCUMENTS - PSEUDO;

pub const PSEUDO_LABEL: &str = "apparent_pseudo";
pub const REAL_LABEL: &str = "apparent_real";

pub const RULES: &str = r#"{
  "default_stratum": "apparent_real",
  "rules": [
    {"rule_id": "part-divider", "pattern": ">Part [IVXLC]+", "target_stratum": "apparent_pseudo", "priority": 10}
  ]
}"#;

/// Whether global document `k` is a divider. Spreads exactly `PSEUDO`
/// dividers evenly over the corpus.
pub fn is_pseudo(k: usize) -> bool {
    (k + 1) * PSEUDO / DOCUMENTS > k * PSEUDO / DOCUMENTS
}

pub fn write_replica(dir: &Path) -> Vec<PathBuf> {
    let mut k = 0;
    let mut files = Vec::with_capacity(FILES);
    for f in 0..FILES {
        let n = DOCUMENTS / FILES + usize::from(f < DOCUMENTS % FILES);
        let mut text = String::with_capacity(n * 160);
        for _ in 0..n {
            text.push_str("<DOC>\n");
            let _ = writeln!(text, "<DOCNO> FR{f:03}-{k:05} </DOCNO>");
            if is_pseudo(k) {
                let _ = writeln!(text, ">Part IV\nDepartment of Commerce\nReader aids");
            } else {
                let _ = writeln!(text, "<TEXT>\nNotice {k} of proposed rulemaking.\nComments due within 30 days.\n</TEXT>");
            }
            text.push_str("</DOC>\n");
            k += 1;
        }
        let path = dir.join(format!("fr88{f:03}.sgml"));
        std::fs::write(&path, text).unwrap();
        files.push(path);
    }
    assert_eq!(k, DOCUMENTS);
    files
}

/// The judgments of a perfect reviewer: dividers never match, everything
/// else does.
pub fn perfect_verdict(stratum: &str) -> Verdict {
    if stratum == PSEUDO_LABEL {
        Verdict::NoMatch
    } else {
        Verdict::Match
    }
}

pub fn judge_pending(c: &mut Campaign, at: chrono::DateTime<chrono::Utc>) -> Result<(), strata::campaign::CampaignError> {
    for id in c.pending() {
        let d = c.draw(id)?;
        if d.verdict.is_some() {
            continue;
        }
        let v = perfect_verdict(&d.draw.stratum.clone());
        c.judge(id, v, "oracle", None, at)?;
    }
    Ok(())
}
