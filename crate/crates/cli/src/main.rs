//! `strata`: ingest, stratify, sample, judge and estimate from the shell.
//!
//! Flags can also be set through `STRATA_*` environment variables
//! (`STRATA_CAMPAIGN_DIR`, `STRATA_SEED`, ...). When `SOURCE_DATE_EPOCH` is
//! set, every recorded timestamp uses it, so repeating a command sequence
//! with the same seeds reproduces the campaign files byte for byte.

mod judge;

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use strata::campaign::{
    build_report, create_campaign, CampaignConfig, CampaignError, CampaignStore, ErrorKind, PriorChoice,
    DEFAULT_QUESTION,
};
use strata::combine::DEFAULT_MC_DRAWS;
use strata::corpus::{ingest_corpus, Corpus, SplitConfig};
use strata::density::{DensityError, ElicitedPrior, Grid, DEFAULT_STEP};
use strata::sampler::Phase;
use strata::stratify::{RuleError, RuleSet};

#[derive(Debug, Parser)]
#[command(name = "strata", version, about = "Bayesian stratified sampling over text corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CampaignArg {
    /// Campaign directory (holds campaign.json and events.jsonl).
    #[arg(long, env = "STRATA_CAMPAIGN_DIR")]
    campaign_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for all randomness in this command; generated and printed when omitted.
    #[arg(long, env = "STRATA_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split corpus files into documents and write the corpus index.
    Ingest {
        /// Corpus files or directories.
        #[arg(long, env = "STRATA_CORPUS", value_delimiter = ',', required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Where to write the index.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Classify documents into strata and create a campaign.
    Stratify {
        /// Corpus files or directories, or one index written by `ingest`.
        #[arg(long, env = "STRATA_CORPUS", value_delimiter = ',', required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, env = "STRATA_RULES")]
        rules: PathBuf,
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, env = "STRATA_GRID_STEP", default_value_t = DEFAULT_STEP)]
        grid_step: f64,
        #[arg(long, env = "STRATA_MC_DRAWS", default_value_t = DEFAULT_MC_DRAWS)]
        mc_draws: u64,
        #[arg(long, default_value = DEFAULT_QUESTION)]
        question: String,
        /// Defaults to a digest of corpus, rules and question.
        #[arg(long)]
        campaign_id: Option<String>,
    },
    /// Set a stratum prior (before planning).
    Prior {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long)]
        stratum: String,
        /// Flat prior.
        #[arg(long, conflicts_with_all = ["points", "tenths"])]
        uniform: bool,
        /// Knots as `x:likelihood`, comma separated.
        #[arg(long, value_delimiter = ',')]
        points: Vec<String>,
        /// Eleven likelihoods at x = 0, 0.1, ..., 1.
        #[arg(long, value_delimiter = ',', conflicts_with = "points")]
        tenths: Vec<f64>,
        #[arg(long, env = "STRATA_REVIEWER", default_value = "cli")]
        reviewer: String,
    },
    /// Open a sampling phase and print its draws.
    Draw {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Per-stratum counts as `stratum=n` (presample and extension).
        #[arg(long = "count", value_delimiter = ',')]
        counts: Vec<String>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Judge pending draws, interactively or from a script.
    Judge(judge::JudgeArgs),
    /// Allocate the sampling budget across strata.
    Plan {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, env = "STRATA_BUDGET")]
        budget: u64,
        /// Per-document cost as `stratum=c` (default 1).
        #[arg(long = "cost", value_delimiter = ',')]
        costs: Vec<String>,
    },
    /// Combine stratum posteriors and record a result.
    Estimate {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, env = "STRATA_MASS", default_value_t = 0.95)]
        mass: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Render all results.
    Report {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print the campaign summary as JSON.
    Status {
        #[command(flatten)]
        campaign: CampaignArg,
    },
    /// Recompute everything from the event log and compare bitwise.
    Verify {
        #[command(flatten)]
        campaign: CampaignArg,
    },
    /// Serve the review API for one campaign.
    Serve {
        #[command(flatten)]
        campaign: CampaignArg,
        #[arg(long, env = "STRATA_ADDR", default_value = strata_server::DEFAULT_ADDR)]
        addr: SocketAddr,
        /// Seed used by API calls that carry none.
        #[command(flatten)]
        seed: SeedArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhaseArg {
    Presample,
    Full,
    Extension,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Presample => Phase::Presample,
            PhaseArg::Full => Phase::Full,
            PhaseArg::Extension => Phase::Extension,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

/// `SOURCE_DATE_EPOCH` if set, else the wall clock.
pub(crate) fn now() -> Result<DateTime<Utc>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s.trim().parse().context("SOURCE_DATE_EPOCH must be integer seconds")?;
            DateTime::from_timestamp(secs, 0).ok_or_else(|| anyhow!("SOURCE_DATE_EPOCH out of range"))
        }
        Err(_) => Ok(Utc::now()),
    }
}

fn seed_or_fresh(seed: &SeedArg) -> u64 {
    let s = seed.seed.unwrap_or_else(rand::random::<u64>);
    println!("seed {s}");
    s
}

/// Files as given; directories contribute their regular files in name order.
fn expand_corpus(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && !f.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            bail!("corpus path {} does not exist", p.display());
        }
    }
    if out.is_empty() {
        bail!("no corpus files given");
    }
    Ok(out)
}

fn load_or_ingest(paths: &[PathBuf]) -> Result<Corpus> {
    if let [one] = paths {
        if one.extension().is_some_and(|e| e == "json") && one.is_file() {
            return Corpus::load_index(one).with_context(|| format!("loading index {}", one.display()));
        }
    }
    Ok(ingest_corpus(&expand_corpus(paths)?, &SplitConfig::default())?)
}

fn parse_pairs<T: std::str::FromStr>(items: &[String], what: &str) -> Result<BTreeMap<String, T>>
where
    T::Err: std::fmt::Display,
{
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("{what} must look like stratum=value, got {item:?}"))?;
            let v = v.trim().parse::<T>().map_err(|e| anyhow!("{what} {item:?}: {e}"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Ingest { corpus, out: index } => {
            let files = expand_corpus(&corpus)?;
            let c = ingest_corpus(&files, &SplitConfig::default())?;
            std::fs::write(&index, c.to_index_json()?).with_context(|| format!("writing {}", index.display()))?;
            let warnings: usize = c.files.iter().map(|f| f.warnings.len()).sum();
            writeln!(out, "corpus {}", c.corpus_id)?;
            writeln!(out, "files {} documents {} warnings {}", c.files.len(), c.total_count, warnings)?;
        }
        Command::Stratify {
            corpus,
            rules,
            campaign,
            grid_step,
            mc_draws,
            question,
            campaign_id,
        } => {
            let rules = RuleSet::load(&rules)?;
            rules.compile()?;
            let grid = Grid::from_step(grid_step)?;
            let corpus = load_or_ingest(&corpus)?;
            let cfg = CampaignConfig {
                question,
                campaign_id,
                grid,
                mc_draws,
            };
            let header = create_campaign(&corpus, &rules, &cfg, now()?)?;
            CampaignStore::create(&campaign.campaign_dir, &header, &corpus)?;
            writeln!(out, "campaign {}", header.campaign_id)?;
            writeln!(out, "{:<24} {:>10} {:>10}", "stratum", "documents", "fraction")?;
            for s in &header.partition.strata {
                writeln!(out, "{:<24} {:>10} {:>10.5}", s.label, s.count, s.fraction)?;
            }
            writeln!(out, "{:<24} {:>10}", "total", header.partition.total_count)?;
        }
        Command::Prior {
            campaign,
            stratum,
            uniform,
            points,
            tenths,
            reviewer,
        } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let at = now()?;
            let choice = if uniform {
                PriorChoice::Uniform
            } else if !tenths.is_empty() {
                let arr: [f64; 11] = tenths
                    .try_into()
                    .map_err(|v: Vec<f64>| anyhow!("--tenths needs 11 values, got {}", v.len()))?;
                PriorChoice::Elicited(ElicitedPrior::at_tenths(arr)?.with_provenance(&reviewer, at))
            } else if !points.is_empty() {
                let pairs = points
                    .iter()
                    .map(|p| {
                        let (x, y) = p.split_once(':').ok_or_else(|| anyhow!("point {p:?} must be x:likelihood"))?;
                        Ok((x.trim().parse::<f64>()?, y.trim().parse::<f64>()?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                PriorChoice::Elicited(ElicitedPrior::from_pairs(&pairs)?.with_provenance(&reviewer, at))
            } else {
                bail!("give --uniform, --points or --tenths");
            };
            let density = store.update(|c| c.set_prior(&stratum, choice, at))?;
            writeln!(out, "prior {stratum} set, mean {:.5}", density.mean())?;
        }
        Command::Draw {
            campaign,
            phase,
            counts,
            seed,
        } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let counts: BTreeMap<String, u64> = parse_pairs(&counts, "--count")?;
            let phase = Phase::from(phase);
            let requested = (!counts.is_empty()).then_some(&counts);
            let seed = seed_or_fresh(&seed);
            let at = now()?;
            let (draws, pending) = store.update(|c| {
                let d = c.run_phase(phase, requested, seed, at)?;
                Ok((d, c.pending()))
            })?;
            for d in &draws {
                writeln!(out, "{}\t{}\t{}", d.draw_id, d.stratum, d.doc_id)?;
            }
            writeln!(out, "{phase}: {} draws, {} pending judgment", draws.len(), pending.len())?;
        }
        Command::Judge(args) => judge::run(args, &mut out)?,
        Command::Plan {
            campaign,
            budget,
            costs,
        } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let costs: BTreeMap<String, f64> = parse_pairs(&costs, "--cost")?;
            let at = now()?;
            let (plan, inputs) = store.update(|c| {
                let inputs = c.allocation_inputs(&costs)?;
                Ok((c.make_plan(budget, costs.clone(), at)?, inputs))
            })?;
            writeln!(
                out,
                "{:<24} {:>9} {:>10} {:>10} {:>12} {:>9} {:>6} {:>6}",
                "stratum", "fraction", "presample", "mean", "A", "q", "count", "more"
            )?;
            for (a, s) in plan.per_stratum.iter().zip(&inputs) {
                writeln!(
                    out,
                    "{:<24} {:>9.5} {:>10} {:>10.5} {:>12.5e} {:>9.5} {:>6} {:>6}",
                    a.label,
                    s.fraction,
                    format!("{}/{}", s.presample_b, s.presample_n),
                    s.posterior_mean,
                    a.a_factor,
                    a.q,
                    a.count,
                    a.count.saturating_sub(s.presample_n)
                )?;
            }
            writeln!(out, "budget {} ({})", plan.total_budget, plan.residual_note)?;
        }
        Command::Estimate { campaign, mass, seed } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let pending = store.load()?.pending();
            if !pending.is_empty() {
                return Err(CampaignError::Pending(pending).into());
            }
            let seed = seed_or_fresh(&seed);
            let at = now()?;
            let rec = store.update(|c| c.finalize(mass, seed, at).cloned())?;
            let e = &rec.estimate;
            writeln!(out, "result {}", rec.index + 1)?;
            writeln!(out, "mean {:.6}", e.mean)?;
            writeln!(
                out,
                "interval {:.5} {:.5} (mass {:.6}, {})",
                e.interval.lo, e.interval.hi, e.interval.mass_captured, "exact"
            )?;
            writeln!(out, "normal {:.5} {:.5}", e.normal_interval.lo, e.normal_interval.hi)?;
            writeln!(
                out,
                "documents {} {} width {}",
                e.doc_interval.lo, e.doc_interval.hi, e.doc_interval_width
            )?;
            writeln!(out, "mc draws {} standard error {:.2e}", e.mc_draws, e.mc_standard_error)?;
        }
        Command::Report { campaign, format } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let report = build_report(&store.load()?)?;
            match format {
                Format::Text => write!(out, "{}", report.to_text())?,
                Format::Json => writeln!(out, "{}", report.to_json())?,
            }
        }
        Command::Status { campaign } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&store.load()?.summary())?)?;
        }
        Command::Verify { campaign } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let r = store.verify_replay()?;
            writeln!(
                out,
                "replayed {} batches, {} draws, {} plans, {} results ({} densities)",
                r.batches, r.draws, r.plans, r.results, r.densities_compared
            )?;
            if !r.is_clean() {
                for m in &r.mismatches {
                    writeln!(out, "mismatch: {m}")?;
                }
                bail!(ReplayMismatch(r.mismatches.len()));
            }
            writeln!(out, "ok")?;
        }
        Command::Serve { campaign, addr, seed } => {
            let store = CampaignStore::open(&campaign.campaign_dir)?;
            let mut state = strata_server::AppState::new(store).with_default_seed(seed.seed);
            if std::env::var_os("SOURCE_DATE_EPOCH").is_some() {
                let fixed = now()?;
                state = state.with_clock(Arc::new(move || fixed));
            }
            drop(out);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(strata_server::serve(Arc::new(state), addr))?;
        }
    }
    Ok(())
}

#[derive(Debug)]
struct ReplayMismatch(usize);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} replay mismatches", self.0)
    }
}

impl std::error::Error for ReplayMismatch {}

/// One JSON line on stderr, and an exit code by error class.
fn report_error(err: &anyhow::Error) -> ExitCode {
    let campaign = err.chain().find_map(|e| e.downcast_ref::<CampaignError>());
    let (code, exit, pending) = match campaign {
        Some(e) => {
            let exit = match e.kind() {
                ErrorKind::NotFound => 3,
                ErrorKind::Conflict => 4,
                ErrorKind::Invalid => 5,
                ErrorKind::Internal => 1,
            };
            let pending = match e {
                CampaignError::Pending(ids) => Some(ids.clone()),
                _ => None,
            };
            (e.code(), exit, pending)
        }
        None if err.chain().any(|e| e.is::<ReplayMismatch>()) => ("replay_mismatch", 6, None),
        None if err.chain().any(|e| e.is::<DensityError>() || e.is::<RuleError>()) => ("invalid", 5, None),
        None => ("error", 1, None),
    };
    let mut line = serde_json::json!({
        "error": code,
        "message": format!("{err:#}"),
    });
    if let Some(ids) = pending {
        line["pending"] = serde_json::json!(ids);
    }
    eprintln!("{line}");
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("STRATA_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
