//! Terminal judging loop and scripted verdicts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use strata::campaign::{preview, CampaignStore};
use strata::sampler::Verdict;

use crate::CampaignArg;

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[command(flatten)]
    campaign: CampaignArg,
    #[arg(long, env = "STRATA_REVIEWER", default_value = "cli")]
    reviewer: String,
    /// File of `draw_id verdict` lines (verdict y/n).
    #[arg(long, conflicts_with = "by_stratum")]
    script: Option<PathBuf>,
    /// Give every pending draw of a stratum the same verdict, as `stratum=y|n`.
    #[arg(long = "by-stratum", value_delimiter = ',')]
    by_stratum: Vec<String>,
    /// Replace an earlier verdict, as `draw_id=y|n`.
    #[arg(long = "correct", value_delimiter = ',', conflicts_with_all = ["script", "by_stratum"])]
    corrections: Vec<String>,
    #[arg(long)]
    note: Option<String>,
}

fn parse_verdict(s: &str) -> Result<Verdict> {
    match s.trim().to_ascii_lowercase().as_str() {
        "y" | "yes" | "match" => Ok(Verdict::Match),
        "n" | "no" | "no_match" => Ok(Verdict::NoMatch),
        other => bail!("unknown verdict {other:?} (use y or n)"),
    }
}

pub fn run(args: JudgeArgs, out: &mut impl Write) -> Result<()> {
    let store = CampaignStore::open(&args.campaign.campaign_dir)?;
    let reviewer = args.reviewer.clone();
    let note = args.note.clone();

    if !args.corrections.is_empty() {
        for item in &args.corrections {
            let (id, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--correct must look like draw_id=y|n"))?;
            let id: u64 = id.trim().parse().context("draw id")?;
            let verdict = parse_verdict(v)?;
            let at = crate::now()?;
            let copies = store.update(|c| c.correct(id, verdict, &reviewer, note.clone(), at))?;
            writeln!(out, "corrected {id}{}", followers(&copies))?;
        }
        return Ok(());
    }

    if let Some(path) = &args.script {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut verdicts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                bail!("{}:{}: expected `draw_id verdict`", path.display(), n + 1);
            };
            verdicts.push((id.parse::<u64>().context("draw id")?, parse_verdict(v)?));
        }
        let at = crate::now()?;
        let count = store.update(|c| {
            let mut judged = 0;
            for (id, v) in &verdicts {
                // ids already filled from a duplicate are skipped
                if c.draw(*id)?.verdict.is_none() {
                    c.judge(*id, *v, &reviewer, note.clone(), at)?;
                    judged += 1;
                }
            }
            Ok(judged)
        })?;
        writeln!(out, "judged {count} draws")?;
        return Ok(());
    }

    if !args.by_stratum.is_empty() {
        let mut rule = BTreeMap::new();
        for item in &args.by_stratum {
            let (s, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--by-stratum must look like stratum=y|n"))?;
            rule.insert(s.trim().to_string(), parse_verdict(v)?);
        }
        let at = crate::now()?;
        let count = store.update(|c| {
            for s in rule.keys() {
                c.prior_choice(s)?;
            }
            let mut judged = 0;
            for id in c.pending() {
                let d = c.draw(id)?;
                if d.verdict.is_some() {
                    continue;
                }
                if let Some(v) = rule.get(&d.draw.stratum).copied() {
                    c.judge(id, v, &reviewer, note.clone(), at)?;
                    judged += 1;
                }
            }
            Ok(judged)
        })?;
        writeln!(out, "judged {count} draws")?;
        return Ok(());
    }

    interactive(&store, &reviewer, out)
}

fn followers(ids: &[u64]) -> String {
    if ids.is_empty() {
        String::new()
    } else {
        format!(" (also {})", ids.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
    }
}

/// Shows each pending draw's first lines and reads y/n/s/m/q from stdin.
fn interactive(store: &CampaignStore, reviewer: &str, out: &mut impl Write) -> Result<()> {
    let corpus = store.corpus()?;
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut skipped = BTreeSet::new();
    let mut judged = 0;
    loop {
        let c = store.load()?;
        let pending = c.pending();
        let Some(&id) = pending.iter().find(|id| !skipped.contains(*id)) else {
            break;
        };
        let d = c.draw(id)?;
        let text = corpus.text_by_id(&d.draw.doc_id)?;
        let (head, more) = preview(&text);
        writeln!(
            out,
            "\n== draw {id} [{}] stratum {} document {} ({} pending)",
            d.draw.phase,
            d.draw.stratum,
            d.draw.doc_id,
            pending.len()
        )?;
        writeln!(out, "Q: {}", c.header().question)?;
        write!(out, "{head}")?;
        if more {
            writeln!(out, "... ({} more lines, m to show)", text.lines().count() - head.lines().count())?;
        }
        let verdict = loop {
            write!(out, "[y]es / [n]o / [s]kip / [m]ore / [q]uit > ")?;
            out.flush()?;
            let Some(line) = lines.next() else {
                writeln!(out)?;
                writeln!(out, "judged {judged} draws")?;
                return Ok(());
            };
            match line?.trim() {
                "y" | "Y" => break Some(Verdict::Match),
                "n" | "N" => break Some(Verdict::NoMatch),
                "s" | "S" => break None,
                "m" | "M" => write!(out, "{text}")?,
                "q" | "Q" => {
                    writeln!(out, "judged {judged} draws")?;
                    return Ok(());
                }
                other => writeln!(out, "unrecognized {other:?}")?,
            }
        };
        match verdict {
            None => {
                skipped.insert(id);
            }
            Some(v) => {
                let at = crate::now()?;
                let copies = store.update(|c| c.judge(id, v, reviewer, None, at))?;
                judged += 1;
                if !copies.is_empty() {
                    writeln!(out, "same document as draws {}; verdict copied", followers(&copies).trim())?;
                }
            }
        }
    }
    writeln!(out, "judged {judged} draws")?;
    Ok(())
}
