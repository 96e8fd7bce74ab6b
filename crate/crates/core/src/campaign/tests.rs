use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use super::*;
use crate::corpus::SplitConfig;
use crate::stratify::StratumMembers;

pub(crate) fn t0() -> DateTime<Utc> {
    DateTime::UNIX_EPOCH
}

fn members(label: &str, n: usize, total: usize) -> StratumMembers {
    StratumMembers {
        label: label.into(),
        count: n,
        fraction: n as f64 / total as f64,
        doc_ids: (0..n).map(|i| format!("{label}.txt#{i}")).collect(),
    }
}

/// A two-stratum campaign with the given stratum sizes and no corpus files.
pub(crate) fn two_strata(pseudo: usize, real: usize, mc_draws: u64) -> Campaign {
    let total = pseudo + real;
    let partition = StratumPartition {
        default_stratum: "real".into(),
        total_count: total,
        strata: vec![members("pseudo", pseudo, total), members("real", real, total)],
    };
    let corpus = Corpus {
        schema_version: 1,
        corpus_id: "corpus-test".into(),
        split: SplitConfig::default(),
        files: vec![],
        documents: vec![],
        total_count: total,
    };
    let rules = RuleSet {
        default_stratum: "real".into(),
        rules: vec![],
        match_prefix_bytes: None,
    };
    let cfg = CampaignConfig {
        mc_draws,
        ..CampaignConfig::default()
    };
    Campaign::new(header_for_partition(&corpus, &rules, partition, &cfg, t0()).unwrap())
}

fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Judges every pending draw: `pseudo` never matches, `real` always does.
fn judge_all(c: &mut Campaign) {
    for id in c.pending() {
        if c.draw(id).unwrap().verdict.is_some() {
            continue;
        }
        let v = if c.draw(id).unwrap().draw.stratum == "real" {
            Verdict::Match
        } else {
            Verdict::NoMatch
        };
        c.judge(id, v, "kt", None, t0()).unwrap();
    }
}

#[test]
fn full_lifecycle_follows_the_presample_and_plan() {
    let mut c = two_strata(3444, 42376, 20_000);
    assert_eq!(c.state(), CampaignState::AwaitingPresample);
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 10), ("real", 10)])), 7, t0())
        .unwrap();
    assert_eq!(c.state(), CampaignState::Presampling);
    judge_all(&mut c);
    assert_eq!(c.state(), CampaignState::AwaitingPlan);

    let plan = c.make_plan(200, BTreeMap::new(), t0()).unwrap();
    assert_eq!(plan.count("pseudo"), Some(15));
    assert_eq!(plan.count("real"), Some(185));
    assert_eq!(c.state(), CampaignState::Planned);

    let full = c.run_phase(Phase::Full, None, 8, t0()).unwrap();
    assert_eq!(full.iter().filter(|d| d.stratum == "pseudo").count(), 5);
    assert_eq!(full.iter().filter(|d| d.stratum == "real").count(), 175);
    judge_all(&mut c);
    assert_eq!(c.state(), CampaignState::ReadyToFinalize);
    assert_eq!(c.tally("pseudo", 2), Tally::new(0, 15));
    assert_eq!(c.tally("real", 2), Tally::new(185, 185));

    let first = c.finalize(0.95, 9, t0()).unwrap().estimate.clone();
    assert_eq!(c.state(), CampaignState::Finalized);

    c.run_phase(Phase::Extension, Some(&counts(&[("pseudo", 15), ("real", 185)])), 10, t0())
        .unwrap();
    assert_eq!(c.state(), CampaignState::Extending);
    judge_all(&mut c);
    let second = c.finalize(0.95, 11, t0()).unwrap().estimate.clone();
    assert!(second.doc_interval_width < first.doc_interval_width);
    assert_eq!(c.results().len(), 2);

    let report = c.replay_check().unwrap();
    assert!(report.is_clean(), "{:?}", report.mismatches);
    assert_eq!(report.results, 2);
    assert_eq!(report.densities_compared, 2);
}

#[test]
fn phases_out_of_order_are_rejected() {
    let mut c = two_strata(5, 5, 1000);
    let err = c.run_phase(Phase::Full, None, 1, t0()).unwrap_err();
    assert!(matches!(err, CampaignError::InvalidState { .. }), "{err}");
    assert!(matches!(
        c.finalize(0.95, 1, t0()).unwrap_err(),
        CampaignError::InvalidState { .. }
    ));
    assert!(matches!(
        c.make_plan(10, BTreeMap::new(), t0()).unwrap_err(),
        CampaignError::InvalidState { .. }
    ));
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 2)])), 1, t0()).unwrap();
    assert!(matches!(
        c.make_plan(10, BTreeMap::new(), t0()).unwrap_err(),
        CampaignError::InvalidState { .. }
    ));
    let err = c
        .run_phase(Phase::Extension, Some(&counts(&[("pseudo", 2)])), 1, t0())
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Conflict);
}

#[test]
fn prior_changes_are_locked_after_planning() {
    let mut c = two_strata(50, 50, 1000);
    let flat = elicited(&[(0.0, 1.0), (0.3, 1.0), (0.6, 1.0), (1.0, 1.0)]).unwrap();
    c.set_prior("pseudo", flat.clone(), t0()).unwrap();
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 3), ("real", 3)])), 2, t0())
        .unwrap();
    judge_all(&mut c);
    // still allowed: the presample posterior is not computed until the plan
    c.set_prior("pseudo", PriorChoice::Uniform, t0()).unwrap();
    c.make_plan(20, BTreeMap::new(), t0()).unwrap();
    let err = c.set_prior("pseudo", flat, t0()).unwrap_err();
    assert!(matches!(err, CampaignError::PriorLocked));
    assert_eq!(err.kind(), ErrorKind::Conflict);
    assert!(matches!(
        c.set_prior("nope", PriorChoice::Uniform, t0()).unwrap_err(),
        CampaignError::UnknownStratum(_)
    ));
}

#[test]
fn invalid_prior_points_are_rejected() {
    let mut c = two_strata(5, 5, 1000);
    let bad = PriorChoice::Elicited(ElicitedPrior {
        points: vec![
            crate::density::PriorPoint { x: 0.0, likelihood: 1.0 },
            crate::density::PriorPoint { x: 0.5, likelihood: 1.0 },
            crate::density::PriorPoint { x: 0.4, likelihood: 1.0 },
            crate::density::PriorPoint { x: 1.0, likelihood: 1.0 },
        ],
        provenance: None,
    });
    let err = c.set_prior("real", bad, t0()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Invalid);
    assert!(c.records().is_empty());
}

#[test]
fn plan_smaller_than_presample_is_an_error() {
    let mut c = two_strata(100, 100, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 30), ("real", 4)])), 3, t0())
        .unwrap();
    for id in c.pending() {
        if c.draw(id).unwrap().verdict.is_some() {
            continue;
        }
        // pseudo all no-match, real half and half
        let v = if c.draw(id).unwrap().draw.stratum == "real" && id % 2 == 0 {
            Verdict::Match
        } else {
            Verdict::NoMatch
        };
        c.judge(id, v, "kt", None, t0()).unwrap();
    }
    let err = c.make_plan(34, BTreeMap::new(), t0()).unwrap_err();
    assert!(matches!(err, CampaignError::PlanBelowPresample { ref stratum, .. } if stratum == "pseudo"), "{err}");
}

#[test]
fn finalize_lists_pending_draws() {
    let mut c = two_strata(5, 5, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 1), ("real", 1)])), 4, t0())
        .unwrap();
    judge_all(&mut c);
    c.make_plan(4, BTreeMap::new(), t0()).unwrap();
    c.run_phase(Phase::Full, None, 5, t0()).unwrap();
    let pending = c.pending();
    assert!(!pending.is_empty());
    match c.finalize(0.95, 1, t0()).unwrap_err() {
        CampaignError::Pending(ids) => assert_eq!(ids, pending),
        e => panic!("{e}"),
    }
}

#[test]
fn duplicate_documents_are_auto_filled() {
    // one document per stratum: every draw repeats it
    let mut c = two_strata(1, 1, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 3), ("real", 2)])), 6, t0())
        .unwrap();
    let filled = c.judge(0, Verdict::NoMatch, "kt", None, t0()).unwrap();
    assert_eq!(filled, vec![1, 2]);
    assert_eq!(c.draw(2).unwrap().auto_filled_from, Some(0));
    assert!(matches!(
        c.judge(1, Verdict::Match, "kt", None, t0()).unwrap_err(),
        CampaignError::AlreadyJudged(1)
    ));
    c.judge(3, Verdict::Match, "kt", None, t0()).unwrap();
    assert!(c.pending().is_empty());

    // a later batch drawing the same document is filled on opening
    c.make_plan(10, BTreeMap::new(), t0()).unwrap();
    c.run_phase(Phase::Full, None, 7, t0()).unwrap();
    assert!(c.pending().is_empty());
    assert_eq!(c.state(), CampaignState::ReadyToFinalize);

    // a correction follows through to the copies
    let copies = c.correct(0, Verdict::Match, "kt", Some("misread".into()), t0()).unwrap();
    let expected: Vec<u64> = c
        .draws()
        .iter()
        .filter(|d| d.draw.stratum == "pseudo" && d.draw.draw_id != 0)
        .map(|d| d.draw.draw_id)
        .collect();
    assert_eq!(copies, expected);
    assert!(c
        .draws()
        .iter()
        .filter(|d| d.draw.stratum == "pseudo" && d.auto_filled_from.is_none_or(|s| s == 0))
        .all(|d| d.verdict == Some(Verdict::Match)));
    assert!(c.replay_check().unwrap().is_clean());
}

#[test]
fn corrections_change_tallies_but_keep_history() {
    let mut c = two_strata(50, 50, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("real", 3)])), 12, t0()).unwrap();
    judge_all(&mut c);
    let before = c.tally("real", 1);
    assert!(matches!(
        c.correct(99, Verdict::Match, "kt", None, t0()).unwrap_err(),
        CampaignError::UnknownDraw(99)
    ));
    c.correct(0, Verdict::NoMatch, "kt", None, t0()).unwrap();
    let after = c.tally("real", 1);
    assert_eq!(after.trials, before.trials);
    assert_eq!(after.successes + 1, before.successes);
    assert!(c.records().iter().any(|r| matches!(r.event, Event::Judgment { draw_id: 0, .. })));
}

#[test]
fn zero_weight_stratum_leaves_the_other_posterior() {
    let mut c = two_strata(0, 40, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("real", 5)])), 1, t0()).unwrap();
    judge_all(&mut c);
    c.make_plan(20, BTreeMap::new(), t0()).unwrap();
    c.run_phase(Phase::Full, None, 2, t0()).unwrap();
    judge_all(&mut c);
    let posterior = c.current_posterior("real").unwrap();
    let r = c.finalize(0.95, 3, t0()).unwrap();
    assert_eq!(r.estimate.mc_draws, 0);
    assert_eq!(r.density.as_ref().unwrap(), &posterior);
}

#[test]
fn replay_detects_a_tampered_draw() {
    let mut c = two_strata(50, 50, 1000);
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 2), ("real", 2)])), 13, t0())
        .unwrap();
    let mut records = c.records().to_vec();
    let Event::Draw { doc_id, .. } = &mut records[1].event else {
        panic!("expected a draw");
    };
    *doc_id = if doc_id == "pseudo.txt#0" { "pseudo.txt#1" } else { "pseudo.txt#0" }.into();
    let tampered = Campaign::from_records(c.header().clone(), records).unwrap();
    let report = tampered.replay_check().unwrap();
    assert_eq!(report.mismatches.len(), 1, "{:?}", report.mismatches);
}

#[test]
fn out_of_sequence_events_are_malformed() {
    let c = two_strata(5, 5, 1000);
    let rec = EventRecord {
        seq: 3,
        at: t0(),
        event: Event::PriorSet {
            stratum: "real".into(),
            prior: PriorChoice::Uniform,
        },
    };
    let err = Campaign::from_records(c.header().clone(), vec![rec]).unwrap_err();
    assert!(matches!(err, CampaignError::Malformed { .. }));
}

#[test]
fn campaign_id_is_deterministic() {
    let a = two_strata(5, 5, 1000);
    let b = two_strata(5, 5, 1000);
    assert_eq!(a.id(), b.id());
    assert!(a.id().starts_with("campaign-"));
}

#[test]
fn preview_cuts_after_fifty_lines() {
    let text: String = (0..60).map(|i| format!("line {i}\n")).collect();
    let (head, more) = preview(&text);
    assert!(more);
    assert_eq!(head.lines().count(), PREVIEW_LINES);
    assert!(head.ends_with("line 49\n"));
    let short = "a\nb";
    assert_eq!(preview(short), (short, false));
    let exact: String = (0..50).map(|i| format!("{i}\n")).collect();
    assert_eq!(preview(&exact), (exact.as_str(), false));
}

#[test]
fn report_requires_results_and_renders_rows() {
    let mut c = two_strata(3444, 42376, 20_000);
    assert!(matches!(build_report(&c).unwrap_err(), CampaignError::NoResults));
    c.run_phase(Phase::Presample, Some(&counts(&[("pseudo", 10), ("real", 10)])), 7, t0())
        .unwrap();
    judge_all(&mut c);
    c.make_plan(200, BTreeMap::new(), t0()).unwrap();
    c.run_phase(Phase::Full, None, 8, t0()).unwrap();
    judge_all(&mut c);
    c.finalize(0.95, 9, t0()).unwrap();
    let report = build_report(&c).unwrap();
    let text = report.to_text();
    assert!(text.contains("Size of document interval"), "{text}");
    assert!(text.contains("Interval (documents)"));
    assert!(text.contains("non-informative"));
    assert!(text.contains("pseudo 0/15"));
    assert_eq!(report.results[0].label, "initial");
    assert_eq!(report.results[0].phase_seeds, vec![7, 8]);
}
