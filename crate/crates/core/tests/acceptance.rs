//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strata::allocation::{newbold_allocate, StratumState};
use strata::campaign::{create_campaign, CampaignConfig, CampaignStore, ResultRecord, EVENTS_FILE};
use strata::combine::{combine_point, CombinedEstimate, DocInterval};
use strata::corpus::{ingest_corpus, SplitConfig};
use strata::density::{posterior, spline_prior, ElicitedPrior, Grid, GridDensity};
use strata::sampler::Phase;
use strata::stratify::RuleSet;

use common::{judge_pending, DOCUMENTS, PSEUDO, PSEUDO_LABEL, REAL, REAL_LABEL};

const MASS: f64 = 0.95;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn at() -> DateTime<Utc> {
    DateTime::from_timestamp(567_993_600, 0).unwrap()
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn uniform_posterior(n: u64, b: u64) -> GridDensity {
    let g = Grid::default();
    posterior(&GridDensity::binomial_likelihood(g, n, b).unwrap(), &GridDensity::uniform(g)).unwrap()
}

fn overall_replica() -> (Outcome, u64) {
    let start = Instant::now();
    let d = uniform_posterior(200, 187);
    let iv = d.credible_interval_exact(MASS).unwrap();
    let docs = DocInterval::from_fractions(&iv, DOCUMENTS as u64);
    let elapsed = start.elapsed();
    let pass = within(iv.lo, 0.89519, 0.002)
        && within(iv.hi, 0.96374, 0.002)
        && within(docs.lo as f64, 41_017.0, 100.0)
        && within(docs.hi as f64, 44_158.0, 100.0)
        && within(docs.width() as f64, 3141.0, 150.0)
        && elapsed < Duration::from_secs(5);
    let detail = format!(
        "interval [{:.5}, {:.5}], documents {}-{}, width {}, {:.2?}",
        iv.lo,
        iv.hi,
        docs.lo,
        docs.hi,
        docs.width(),
        elapsed
    );
    (outcome(1, "overall non-informative replica", pass, detail), docs.width())
}

fn allocation_replica() -> Outcome {
    let start = Instant::now();
    let total = DOCUMENTS as f64;
    let strata = [
        StratumState::from_posterior(PSEUDO_LABEL, PSEUDO as f64 / total, 10, 0, &uniform_posterior(10, 0)),
        StratumState::from_posterior(REAL_LABEL, REAL as f64 / total, 10, 10, &uniform_posterior(10, 10)),
    ];
    let plan = newbold_allocate(&strata, 200).unwrap();
    let elapsed = start.elapsed();
    let counts = (plan.count(PSEUDO_LABEL).unwrap(), plan.count(REAL_LABEL).unwrap());
    let pass = counts == (15, 185) && elapsed < Duration::from_secs(1);
    outcome(
        2,
        "allocation replica",
        pass,
        format!("counts ({}, {}), {:.2?}", counts.0, counts.1, elapsed),
    )
}

/// The replica campaign driven end to end on disk.
struct ReplicaRun {
    initial: ResultRecord,
    initial_elapsed: Duration,
    extended: ResultRecord,
    store: CampaignStore,
    plan_counts: (u64, u64),
    full_draws: (usize, usize),
    tallies: String,
}

fn run_replica(corpus_dir: &Path, campaign_dir: &Path) -> ReplicaRun {
    let files = common::write_replica(corpus_dir);
    let corpus = ingest_corpus(&files, &SplitConfig::default()).unwrap();
    let rules = RuleSet::from_json(common::RULES).unwrap();
    let header = create_campaign(&corpus, &rules, &CampaignConfig::default(), at()).unwrap();
    let store = CampaignStore::create(campaign_dir, &header, &corpus).unwrap();

    let presample: BTreeMap<String, u64> = [(PSEUDO_LABEL.to_string(), 10), (REAL_LABEL.to_string(), 10)].into();
    store
        .update(|c| {
            c.run_phase(Phase::Presample, Some(&presample), 1988, at())?;
            judge_pending(c, at())
        })
        .unwrap();
    let plan = store.update(|c| c.make_plan(200, BTreeMap::new(), at())).unwrap();
    let full = store
        .update(|c| {
            let d = c.run_phase(Phase::Full, None, 1989, at())?;
            judge_pending(c, at())?;
            Ok(d)
        })
        .unwrap();
    let count = |label: &str| full.iter().filter(|d| d.stratum == label).count();

    let start = Instant::now();
    let initial = store.update(|c| c.finalize(MASS, 42, at()).cloned()).unwrap();
    let initial_elapsed = start.elapsed();
    let c = store.load().unwrap();
    let tallies = format!("{}, {}", c.tally(PSEUDO_LABEL, 2), c.tally(REAL_LABEL, 2));

    let extension: BTreeMap<String, u64> = [(PSEUDO_LABEL.to_string(), 15), (REAL_LABEL.to_string(), 185)].into();
    let extended = store
        .update(|c| {
            c.run_phase(Phase::Extension, Some(&extension), 1990, at())?;
            judge_pending(c, at())?;
            c.finalize(MASS, 43, at()).cloned()
        })
        .unwrap();

    ReplicaRun {
        initial,
        initial_elapsed,
        extended,
        store,
        plan_counts: (plan.count(PSEUDO_LABEL).unwrap(), plan.count(REAL_LABEL).unwrap()),
        full_draws: (count(PSEUDO_LABEL), count(REAL_LABEL)),
        tallies,
    }
}

fn describe(e: &CombinedEstimate) -> String {
    format!(
        "interval [{:.5}, {:.5}], documents {}-{}, width {}",
        e.interval.lo, e.interval.hi, e.doc_interval.lo, e.doc_interval.hi, e.doc_interval_width
    )
}

fn stratified_replica(run: &ReplicaRun) -> Outcome {
    let e = &run.initial.estimate;
    let pass = run.plan_counts == (15, 185)
        && run.full_draws == (5, 175)
        && run.tallies == "0/15, 185/185"
        && e.mc_draws == 1_000_000
        && within(e.interval.lo, 0.91074, 0.004)
        && within(e.interval.hi, 0.93789, 0.004)
        && within(e.doc_interval_width as f64, 1244.0, 200.0)
        && run.initial_elapsed < Duration::from_secs(60);
    outcome(
        3,
        "stratified non-informative replica",
        pass,
        format!(
            "{}, tallies {}, plan {:?}, full draws {:?}, {:.2?}",
            describe(e),
            run.tallies,
            run.plan_counts,
            run.full_draws,
            run.initial_elapsed
        ),
    )
}

fn benefit_ratio(stratified: u64, overall: u64) -> Outcome {
    let ratio = stratified as f64 / overall as f64;
    outcome(
        4,
        "stratification benefit",
        ratio <= 0.45,
        format!("{stratified} / {overall} = {ratio:.4}"),
    )
}

fn conjugacy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..50 {
        let n: u64 = rng.random_range(1..=500);
        let b: u64 = rng.random_range(0..=n);
        let d = uniform_posterior(n, b);
        let (a, bb) = ((b + 1) as f64, (n - b + 1) as f64);
        let mean = a / (a + bb);
        let var = a * bb / ((a + bb).powi(2) * (a + bb + 1.0));
        worst_mean = worst_mean.max((d.mean() - mean).abs());
        worst_var = worst_var.max((d.variance() - var).abs() / var);
    }
    outcome(
        5,
        "conjugacy oracle",
        worst_mean <= 2e-4 && worst_var <= 0.02,
        format!("50 pairs, worst mean error {worst_mean:.2e}, worst relative variance error {worst_var:.2e}"),
    )
}

fn random_prior(rng: &mut ChaCha8Rng) -> GridDensity {
    let mut knots = [0.0; 11];
    for k in &mut knots {
        *k = rng.random_range(0.2..5.0);
    }
    spline_prior(&ElicitedPrior::at_tenths(knots).unwrap(), Grid::default()).unwrap()
}

fn chained_identity() -> Outcome {
    let g = Grid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for splined in [false, true] {
        for _ in 0..20 {
            let prior = if splined { random_prior(&mut rng) } else { GridDensity::uniform(g) };
            let n1: u64 = rng.random_range(1..=100);
            let b1: u64 = rng.random_range(0..=n1);
            let n2: u64 = rng.random_range(1..=300);
            let b2: u64 = rng.random_range(0..=n2);
            let lik = |n, b| GridDensity::binomial_likelihood(g, n, b).unwrap();
            let staged = posterior(&lik(n2, b2), &posterior(&lik(n1, b1), &prior).unwrap()).unwrap();
            let once = posterior(&lik(n1 + n2, b1 + b2), &prior).unwrap();
            for (a, b) in staged.masses().iter().zip(once.masses()) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    outcome(
        6,
        "chained-update identity",
        worst <= 1e-9,
        format!("{cases} splits (uniform and splined priors), worst pointwise difference {worst:.2e}"),
    )
}

/// Narrowest window of cells holding at least `mass`, in cells.
fn brute_force_width(masses: &[f64], mass: f64) -> usize {
    let mut prefix = Vec::with_capacity(masses.len() + 1);
    prefix.push(0.0);
    let mut acc = strata::numeric::NeumaierAccumulator::default();
    for &m in masses {
        acc.add(m);
        prefix.push(acc.total());
    }
    let mut best = usize::MAX;
    let mut lo = 0;
    for hi in 0..masses.len() {
        while lo < hi && prefix[hi + 1] - prefix[lo + 1] >= mass {
            lo += 1;
        }
        if prefix[hi + 1] - prefix[lo] >= mass {
            best = best.min(hi - lo);
        }
    }
    best
}

fn exact_interval_properties() -> Outcome {
    let g = Grid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hump = ElicitedPrior::at_tenths([0.1, 0.5, 1.0, 2.0, 3.0, 3.5, 3.0, 2.0, 1.0, 0.5, 0.1]).unwrap();
    let hump = spline_prior(&hump, g).unwrap();
    let mut failures = Vec::new();
    let mut worst_gap = 0usize;
    for i in 0..20 {
        let n: u64 = rng.random_range(20..=500);
        let b: u64 = rng.random_range(1..n);
        let lik = GridDensity::binomial_likelihood(g, n, b).unwrap();
        let d = if i % 4 == 3 { posterior(&lik, &hump).unwrap() } else { posterior(&lik, &GridDensity::uniform(g)).unwrap() };
        let (lo, hi, captured) = d.exact_interval_cells(MASS).unwrap();
        let exact = d.credible_interval_exact(MASS).unwrap();
        let normal = d.credible_interval_normal(MASS).unwrap();
        let inside: f64 = d.masses()[lo..=hi].iter().sum();
        let brute = brute_force_width(d.masses(), MASS);
        let gap = (hi - lo).abs_diff(brute);
        worst_gap = worst_gap.max(gap);
        let ok = lo <= hi
            && captured >= MASS
            && inside >= MASS - 1e-12
            && exact.width() <= normal.width() + 1e-12
            && gap <= 1;
        if !ok {
            failures.push(format!(
                "({n},{b}) exact [{:.5},{:.5}] normal [{:.5},{:.5}] captured {captured:.6} brute {brute} cells",
                exact.lo, exact.hi, normal.lo, normal.hi
            ));
        }
    }
    outcome(
        7,
        "exact interval properties",
        failures.is_empty(),
        if failures.is_empty() {
            format!("20 unimodal densities, worst gap to brute force {worst_gap} cells")
        } else {
            failures.join("; ")
        },
    )
}

fn extension(run: &ReplicaRun) -> Outcome {
    let before = run.initial.estimate.doc_interval_width;
    let after = run.extended.estimate.doc_interval_width;
    outcome(
        8,
        "extension narrows the interval",
        after < before && after < 900,
        format!("width {before} -> {after}; {}", describe(&run.extended.estimate)),
    )
}

fn determinism(run: &ReplicaRun, rerun: &ReplicaRun) -> Outcome {
    let report = run.store.verify_replay().unwrap();
    let events = |s: &CampaignStore| std::fs::read(s.dir().join(EVENTS_FILE)).unwrap();
    let identical_logs = events(&run.store) == events(&rerun.store);
    let density = |s: &CampaignStore, r: &ResultRecord| std::fs::read(s.dir().join(&r.density_file)).unwrap();
    let identical_densities = density(&run.store, &run.extended) == density(&rerun.store, &rerun.extended)
        && density(&run.store, &run.initial) == density(&rerun.store, &rerun.initial);
    let pass = report.is_clean()
        && report.results == 2
        && report.densities_compared == 2
        && report.plans == 1
        && identical_logs
        && identical_densities;
    outcome(
        9,
        "event-log replay determinism",
        pass,
        format!(
            "replayed {} batches, {} draws, {} plans, {} results; mismatches {:?}; rerun log identical {identical_logs}, densities identical {identical_densities}",
            report.batches, report.draws, report.plans, report.results, report.mismatches
        ),
    )
}

fn monte_carlo_point() -> Outcome {
    let g = Grid::default();
    let k = combine_point(g, &[g.nearest_index(0.2), g.nearest_index(0.9)], &[0.075, 0.925]);
    let target = g.nearest_index(0.8475);
    outcome(
        10,
        "Monte Carlo point placement",
        k == target,
        format!("cell {k} (x = {}), nearest to 0.8475 is cell {target}", g.x(k)),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mk = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    };

    let mut outcomes = Vec::new();
    let (first, overall_width) = overall_replica();
    outcomes.push(first);
    outcomes.push(allocation_replica());

    let run = run_replica(&mk("corpus-a"), &tmp.path().join("campaign-a"));
    outcomes.push(stratified_replica(&run));
    outcomes.push(benefit_ratio(run.initial.estimate.doc_interval_width, overall_width));
    outcomes.push(conjugacy());
    outcomes.push(chained_identity());
    outcomes.push(exact_interval_properties());
    outcomes.push(extension(&run));
    let rerun = run_replica(&mk("corpus-b"), &tmp.path().join("campaign-b"));
    outcomes.push(determinism(&run, &rerun));
    outcomes.push(monte_carlo_point());

    outcomes.sort_by_key(|o| o.id);
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "criterion {:>2} {} {}: {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {} failed", outcomes.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
