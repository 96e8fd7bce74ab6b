use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{density_digest, Campaign, CampaignError, CampaignHeader, EventRecord, Result};
use crate::corpus::Corpus;
use crate::density::GridDensity;

pub const HEADER_FILE: &str = "campaign.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";
pub const LOCK_FILE: &str = ".lock";
pub const RESULTS_DIR: &str = "results";

/// Outcome of a replay check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub batches: u64,
    pub draws: u64,
    pub plans: u64,
    pub results: u64,
    pub densities_compared: u64,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// A campaign directory. Writers serialize on an exclusive lock file;
/// readers never lock and ignore a trailing partial line.
#[derive(Debug, Clone)]
pub struct CampaignStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl ToString) -> CampaignError {
    CampaignError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes via a temporary file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl CampaignStore {
    /// Creates the directory layout. Fails if a campaign already lives there.
    pub fn create(dir: impl Into<PathBuf>, header: &CampaignHeader, corpus: &Corpus) -> Result<Self> {
        let dir = dir.into();
        let header_path = dir.join(HEADER_FILE);
        if header_path.exists() {
            return Err(CampaignError::Exists(dir));
        }
        fs::create_dir_all(dir.join(RESULTS_DIR)).map_err(io_err(&dir))?;
        let corpus_path = dir.join(&header.corpus.index_file);
        write_atomic(&corpus_path, corpus.to_index_json()?.as_bytes())?;
        let events = dir.join(EVENTS_FILE);
        File::create(&events).map_err(io_err(&events))?;
        let mut json = serde_json::to_string_pretty(header).map_err(|e| malformed(&header_path, e))?;
        json.push('\n');
        write_atomic(&header_path, json.as_bytes())?;
        Ok(Self { dir })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.join(HEADER_FILE).is_file() {
            return Err(CampaignError::NotFound(dir));
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn header(&self) -> Result<CampaignHeader> {
        let path = self.dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let header: CampaignHeader = serde_json::from_str(&text).map_err(|e| malformed(&path, e))?;
        if header.schema_version != super::CAMPAIGN_SCHEMA_VERSION {
            return Err(malformed(&path, format!("unsupported schema_version {}", header.schema_version)));
        }
        Ok(header)
    }

    pub fn records(&self) -> Result<Vec<EventRecord>> {
        let path = self.dir.join(EVENTS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        // a line without its newline is still being written
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        complete
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(&path, format!("line {}: {e}", i + 1))))
            .collect()
    }

    /// Folds the log. Result densities are not read.
    pub fn load(&self) -> Result<Campaign> {
        let header = self.header()?;
        Campaign::from_records(header, self.records()?).map_err(|e| match e {
            CampaignError::Malformed { reason, .. } => malformed(&self.dir.join(EVENTS_FILE), reason),
            other => other,
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let header = self.header()?;
        Ok(Corpus::load_index(&self.dir.join(&header.corpus.index_file))?)
    }

    /// Reads a stored result density and checks its digest.
    pub fn result_density(&self, campaign: &Campaign, index: usize) -> Result<GridDensity> {
        let rec = campaign.results().get(index).ok_or(CampaignError::NoResults)?;
        let path = self.dir.join(&rec.density_file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let d: GridDensity = serde_json::from_str(&text).map_err(|e| malformed(&path, e))?;
        if density_digest(&d) != rec.density_sha256 {
            return Err(malformed(&path, "density digest does not match the log"));
        }
        Ok(d)
    }

    /// Loads the campaign with every result density attached.
    pub fn load_with_densities(&self) -> Result<Campaign> {
        let mut c = self.load()?;
        let densities = (0..c.results().len())
            .map(|i| self.result_density(&c, i))
            .collect::<Result<Vec<_>>>()?;
        for (r, d) in c.results_mut().iter_mut().zip(densities) {
            r.density = Some(d);
        }
        Ok(c)
    }

    /// Runs `f` under the writer lock against freshly loaded state, then
    /// persists the events it added. Nothing is written if `f` fails.
    pub fn update<T>(&self, f: impl FnOnce(&mut Campaign) -> Result<T>) -> Result<T> {
        let lock_path = self.dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        lock.lock().map_err(io_err(&lock_path))?;

        let mut campaign = self.load()?;
        let before = campaign.records().len();
        let results_before = campaign.results().len();
        let out = f(&mut campaign)?;

        for r in &campaign.results()[results_before..] {
            let d = r.density.as_ref().expect("new results carry their density");
            let path = self.dir.join(&r.density_file);
            let json = serde_json::to_string(d).map_err(|e| malformed(&path, e))?;
            write_atomic(&path, json.as_bytes())?;
        }
        let mut buf = String::new();
        for rec in &campaign.records()[before..] {
            buf.push_str(&serde_json::to_string(rec).map_err(|e| malformed(&self.dir, e))?);
            buf.push('\n');
        }
        if !buf.is_empty() {
            let path = self.dir.join(EVENTS_FILE);
            let mut file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
            file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
            file.sync_data().map_err(io_err(&path))?;
        }
        drop(lock);
        Ok(out)
    }

    /// Replays the log against the stored densities.
    pub fn verify_replay(&self) -> Result<ReplayReport> {
        self.load_with_densities()?.replay_check()
    }
}
