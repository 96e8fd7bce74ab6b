//! HTTP/JSON service over one campaign directory.
//!
//! Every mutation goes through [`CampaignStore::update`], the same locked
//! append path the command line uses. Reads fold the event log afresh
//! (cached by log length). Draw checkouts are per-process memory and never
//! reach the log.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use strata::allocation::AllocationPlan;
use strata::campaign::{
    preview, Campaign, CampaignError, CampaignStore, CampaignSummary, ErrorKind, PriorChoice, ResultRecord,
};
use strata::combine::CombinedEstimate;
use strata::corpus::Corpus;
use strata::density::{ChartPoint, ElicitedPrior, GridDensity, PriorPoint, MAX_CHART_POINTS};
use strata::sampler::{Phase, SampleDraw, Verdict};

pub const API_SCHEMA_VERSION: u32 = 1;

/// Header carrying the reviewer id.
pub const REVIEWER_HEADER: &str = "x-reviewer-id";

pub const DEFAULT_ADDR: &str = "127.0.0.1:8750";

const ANONYMOUS: &str = "anonymous";

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::Campaign(e) => (
                match e.kind() {
                    ErrorKind::NotFound => StatusCode::NOT_FOUND,
                    ErrorKind::Conflict => StatusCode::CONFLICT,
                    ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
                    ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
                },
                e.code(),
            ),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Unprocessable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            schema_version: API_SCHEMA_VERSION,
            error: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub struct AppState {
    store: CampaignStore,
    clock: Clock,
    /// Seed for finalize when the request carries none.
    default_seed: Option<u64>,
    cache: Mutex<Option<(u64, Arc<Campaign>)>>,
    corpus: OnceLock<Arc<Corpus>>,
    /// reviewer -> checked-out draw
    checkouts: Mutex<HashMap<String, u64>>,
}

impl AppState {
    pub fn new(store: CampaignStore) -> Self {
        Self {
            store,
            clock: Arc::new(Utc::now),
            default_seed: None,
            cache: Mutex::new(None),
            corpus: OnceLock::new(),
            checkouts: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_default_seed(mut self, seed: Option<u64>) -> Self {
        self.default_seed = seed;
        self
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    /// Current folded state. Reuses the last fold while the log is unchanged.
    fn snapshot(&self) -> Result<Arc<Campaign>, ApiError> {
        let events = self.store.dir().join(strata::campaign::EVENTS_FILE);
        let len = std::fs::metadata(&events)
            .map_err(|source| CampaignError::Io { path: events, source })?
            .len();
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some((cached_len, c)) = cache.as_ref() {
            if *cached_len == len {
                return Ok(c.clone());
            }
        }
        let c = Arc::new(self.store.load()?);
        *cache = Some((len, c.clone()));
        Ok(c)
    }

    fn corpus(&self) -> Result<Arc<Corpus>, ApiError> {
        if let Some(c) = self.corpus.get() {
            return Ok(c.clone());
        }
        let loaded = Arc::new(self.store.corpus()?);
        Ok(self.corpus.get_or_init(|| loaded).clone())
    }
}

/// Runs a locked update off the async runtime.
async fn mutate<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Campaign, DateTime<Utc>) -> Result<T, CampaignError> + Send + 'static,
{
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let at = st.now();
        st.store.update(|c| f(c, at))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(ApiError::from)
}

fn reviewer(headers: &HeaderMap) -> String {
    headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(ANONYMOUS)
        .to_string()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/campaign", get(get_campaign))
        .route("/next-draw", get(next_draw))
        .route("/next-draw/release", post(release_draw))
        .route("/judgment", post(post_judgment))
        .route("/prior/{stratum}", get(get_prior).put(put_prior))
        .route("/phase", post(post_phase))
        .route("/plan", post(post_plan))
        .route("/finalize", post(post_finalize))
        .route("/density/{which}", get(get_density))
        .route("/density/{which}/{stratum}", get(get_density_in))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving campaign");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn get_campaign(State(st): State<Arc<AppState>>) -> ApiResult<CampaignSummary> {
    Ok(Json(st.snapshot()?.summary()))
}

#[derive(Debug, Deserialize)]
pub struct NextDrawQuery {
    #[serde(default)]
    pub full: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DrawView {
    pub draw_id: u64,
    pub batch: u32,
    pub phase: Phase,
    pub stratum: String,
    pub doc_id: String,
    /// First lines of the document.
    pub preview: String,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextDrawResponse {
    pub schema_version: u32,
    pub reviewer: String,
    pub draw: Option<DrawView>,
    pub pending: u64,
}

async fn next_draw(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<NextDrawQuery>,
) -> ApiResult<NextDrawResponse> {
    let who = reviewer(&headers);
    let c = st.snapshot()?;
    let pending = c.pending();
    let chosen = {
        let mut checkouts = st.checkouts.lock().expect("checkout lock");
        let mine = checkouts.get(&who).copied().filter(|id| pending.contains(id));
        let chosen = mine.or_else(|| {
            pending
                .iter()
                .copied()
                .find(|id| !checkouts.iter().any(|(r, d)| r != &who && d == id))
        });
        match chosen {
            Some(id) => checkouts.insert(who.clone(), id),
            None => checkouts.remove(&who),
        };
        chosen
    };
    let draw = match chosen {
        None => None,
        Some(id) => {
            let d = c.draw(id)?;
            let corpus = st.corpus()?;
            let doc_id = d.draw.doc_id.clone();
            let text = tokio::task::spawn_blocking(move || corpus.text_by_id(&doc_id))
                .await
                .map_err(|e| ApiError::Internal(e.to_string()))?
                .map_err(CampaignError::from)?;
            let (head, truncated) = preview(&text);
            Some(DrawView {
                draw_id: id,
                batch: d.batch,
                phase: d.draw.phase,
                stratum: d.draw.stratum.clone(),
                doc_id: d.draw.doc_id.clone(),
                preview: head.to_string(),
                truncated,
                text: q.full.then(|| text.clone()),
            })
        }
    };
    Ok(Json(NextDrawResponse {
        schema_version: API_SCHEMA_VERSION,
        reviewer: who,
        draw,
        pending: pending.len() as u64,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReleaseResponse {
    pub schema_version: u32,
    pub released: Option<u64>,
}

async fn release_draw(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<ReleaseResponse> {
    let released = st.checkouts.lock().expect("checkout lock").remove(&reviewer(&headers));
    Ok(Json(ReleaseResponse {
        schema_version: API_SCHEMA_VERSION,
        released,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub draw_id: u64,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgmentResponse {
    pub schema_version: u32,
    pub draw_id: u64,
    pub verdict: Verdict,
    pub reviewer: String,
    pub at: DateTime<Utc>,
    pub auto_filled: Vec<u64>,
    pub pending: u64,
}

async fn post_judgment(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<JudgmentRequest>,
) -> ApiResult<JudgmentResponse> {
    let who = reviewer(&headers);
    let r = who.clone();
    let (auto_filled, at, pending) = mutate(&st, move |c, at| {
        let filled = c.judge(req.draw_id, req.verdict, &r, req.note, at)?;
        Ok((filled, at, c.pending().len() as u64))
    })
    .await?;
    st.checkouts
        .lock()
        .expect("checkout lock")
        .retain(|_, d| *d != req.draw_id && !auto_filled.contains(d));
    Ok(Json(JudgmentResponse {
        schema_version: API_SCHEMA_VERSION,
        draw_id: req.draw_id,
        verdict: req.verdict,
        reviewer: who,
        at,
        auto_filled,
        pending,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PriorResponse {
    pub schema_version: u32,
    pub stratum: String,
    pub prior: PriorChoice,
    /// Prior changes are refused once a plan exists.
    pub locked: bool,
    pub step: f64,
    pub density: Vec<ChartPoint>,
}

fn prior_response(c: &Campaign, stratum: &str) -> Result<PriorResponse, ApiError> {
    let prior = c.prior_choice(stratum)?.clone();
    let density = c.prior_density(stratum)?;
    Ok(PriorResponse {
        schema_version: API_SCHEMA_VERSION,
        stratum: stratum.to_string(),
        prior,
        locked: c.plan().is_some(),
        step: c.grid().step(),
        density: density.downsample(MAX_CHART_POINTS),
    })
}

async fn get_prior(State(st): State<Arc<AppState>>, Path(stratum): Path<String>) -> ApiResult<PriorResponse> {
    let c = st.snapshot()?;
    Ok(Json(prior_response(&c, &stratum)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PriorRequest {
    #[serde(default)]
    pub points: Option<Vec<PriorPoint>>,
    #[serde(default)]
    pub uniform: bool,
}

async fn put_prior(
    State(st): State<Arc<AppState>>,
    Path(stratum): Path<String>,
    headers: HeaderMap,
    Json(req): Json<PriorRequest>,
) -> ApiResult<PriorResponse> {
    let who = reviewer(&headers);
    let choice = match (req.uniform, req.points) {
        (true, None) => PriorChoice::Uniform,
        (false, Some(points)) => PriorChoice::Elicited(
            ElicitedPrior::new(points).map_err(|e| ApiError::Unprocessable(e.to_string()))?,
        ),
        _ => return Err(ApiError::Unprocessable("send either points or uniform: true".into())),
    };
    let s = stratum.clone();
    mutate(&st, move |c, at| {
        let choice = match choice {
            PriorChoice::Elicited(e) => PriorChoice::Elicited(e.with_provenance(who, at)),
            u => u,
        };
        c.set_prior(&s, choice, at).map(|_| ())
    })
    .await?;
    let c = st.snapshot()?;
    Ok(Json(prior_response(&c, &stratum)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhaseRequest {
    pub phase: Phase,
    /// Per-stratum counts; omitted for the full sample.
    #[serde(default)]
    pub counts: Option<BTreeMap<String, u64>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhaseResponse {
    pub schema_version: u32,
    pub phase: Phase,
    pub seed: u64,
    pub draws: Vec<SampleDraw>,
    pub pending: u64,
}

async fn post_phase(State(st): State<Arc<AppState>>, Json(req): Json<PhaseRequest>) -> ApiResult<PhaseResponse> {
    let seed = req.seed.or(st.default_seed).unwrap_or_else(rand::random::<u64>);
    let phase = req.phase;
    let (draws, pending) = mutate(&st, move |c, at| {
        let draws = c.run_phase(phase, req.counts.as_ref(), seed, at)?;
        Ok((draws, c.pending().len() as u64))
    })
    .await?;
    Ok(Json(PhaseResponse {
        schema_version: API_SCHEMA_VERSION,
        phase,
        seed,
        draws,
        pending,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanRequest {
    pub budget: u64,
    #[serde(default)]
    pub costs: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanResponse {
    pub schema_version: u32,
    pub plan: AllocationPlan,
}

async fn post_plan(State(st): State<Arc<AppState>>, Json(req): Json<PlanRequest>) -> ApiResult<PlanResponse> {
    let plan = mutate(&st, move |c, at| c.make_plan(req.budget, req.costs, at)).await?;
    Ok(Json(PlanResponse {
        schema_version: API_SCHEMA_VERSION,
        plan,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalizeRequest {
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_mass() -> f64 {
    0.95
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub schema_version: u32,
    pub result: u32,
    pub estimate: CombinedEstimate,
    pub density_sha256: String,
}

async fn post_finalize(
    State(st): State<Arc<AppState>>,
    Json(req): Json<FinalizeRequest>,
) -> ApiResult<FinalizeResponse> {
    let seed = req
        .seed
        .or(st.default_seed)
        .unwrap_or_else(rand::random::<u64>);
    let rec: ResultRecord = mutate(&st, move |c, at| c.finalize(req.mass, seed, at).cloned()).await?;
    Ok(Json(FinalizeResponse {
        schema_version: API_SCHEMA_VERSION,
        result: rec.index,
        estimate: rec.estimate,
        density_sha256: rec.density_sha256,
    }))
}

#[derive(Debug, Deserialize)]
pub struct DensityQuery {
    pub stratum: Option<String>,
    pub result: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DensityResponse {
    pub schema_version: u32,
    pub which: String,
    pub stratum: Option<String>,
    pub step: f64,
    pub mean: f64,
    pub points: Vec<ChartPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<CombinedEstimate>,
}

async fn get_density(
    State(st): State<Arc<AppState>>,
    Path(which): Path<String>,
    Query(q): Query<DensityQuery>,
) -> ApiResult<DensityResponse> {
    density(st, which, q.stratum, q.result).await
}

async fn get_density_in(
    State(st): State<Arc<AppState>>,
    Path((which, stratum)): Path<(String, String)>,
    Query(q): Query<DensityQuery>,
) -> ApiResult<DensityResponse> {
    density(st, which, Some(stratum), q.result).await
}

async fn density(
    st: Arc<AppState>,
    which: String,
    stratum: Option<String>,
    result: Option<usize>,
) -> ApiResult<DensityResponse> {
    let c = st.snapshot()?;
    let need_stratum = || {
        stratum
            .clone()
            .ok_or_else(|| ApiError::Unprocessable(format!("{which} density needs a stratum")))
    };
    let mut result_index = None;
    let mut estimate = None;
    let d: GridDensity = match which.as_str() {
        "prior" => c.prior_density(&need_stratum()?)?,
        "presample-posterior" => c.presample_posterior(&need_stratum()?)?,
        "posterior" => c.current_posterior(&need_stratum()?)?,
        "combined" => {
            let n = c.results().len();
            if n == 0 {
                return Err(CampaignError::NoResults.into());
            }
            let idx = result.unwrap_or(n - 1);
            let rec = c
                .results()
                .get(idx)
                .ok_or_else(|| ApiError::NotFound(format!("no result {idx}")))?;
            result_index = Some(rec.index);
            estimate = Some(rec.estimate.clone());
            let (st2, c2) = (st.clone(), c.clone());
            tokio::task::spawn_blocking(move || st2.store.result_density(&c2, idx))
                .await
                .map_err(|e| ApiError::Internal(e.to_string()))??
        }
        other => return Err(ApiError::NotFound(format!("unknown density {other:?}"))),
    };
    Ok(Json(DensityResponse {
        schema_version: API_SCHEMA_VERSION,
        which,
        stratum: if result_index.is_some() { None } else { stratum },
        step: d.grid().step(),
        mean: d.mean(),
        points: d.downsample(MAX_CHART_POINTS),
        result: result_index,
        estimate,
    }))
}
