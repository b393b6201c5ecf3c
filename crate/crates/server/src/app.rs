use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use arena_core::persistence::LogError;
use arena_core::{
    Arena, ArenaBackend, ArenaConfig, BattleStatus, BattleView, Choice, Clock, EventLog, FileLog, LeaderboardSnapshot,
    MemoryLog, NewEvent, Outcome, PipelineConfig, PipelineError, PipelineService, ProviderDescriptor,
    ProviderGateway, SyncPolicy, SystemClock, TrackId,
};

use crate::config::{ApiConfig, ConfigError};
use crate::error::ApiError;

/// Longest a leaderboard read will wait for `min_seq`.
const MAX_READ_WAIT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("opening event log: {0}")]
    Log(#[from] LogError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

pub struct AppState {
    pub arena: Arena<Arc<PipelineService>>,
    pub service: Arc<PipelineService>,
    pub gateway: ProviderGateway,
    pub config: ApiConfig,
    pub clock: Arc<dyn Clock>,
}

pub type Shared = Arc<AppState>;

impl AppState {
    /// Opens (and replays) the event log and starts the track workers.
    pub fn open(config: ApiConfig, clock: Arc<dyn Clock>) -> Result<Self, StartError> {
        config.validate()?;
        let window = config.batched_flush_ms.map(Duration::from_millis);
        let log: Box<dyn EventLog> = match &config.log_path {
            Some(path) => {
                let policy = window.map_or(SyncPolicy::EveryAppend, |window| SyncPolicy::Batched { window });
                Box::new(FileLog::open(path, policy)?)
            }
            None => Box::new(MemoryLog::new()),
        };
        let pipeline = PipelineConfig {
            params: config.params.clone(),
            queue_capacity: config.queue_capacity,
            checkpoint_every: config.checkpoint_every,
            checkpoint_dir: config.snapshot_dir.clone(),
            sync_interval: window,
            ..Default::default()
        };
        let service = Arc::new(PipelineService::start(log, pipeline, clock.clone())?);
        let arena = Arena::new(
            service.clone(),
            ArenaConfig {
                tie_enabled: config.tie_enabled,
                battle_ttl: config.battle_ttl(),
            },
            clock.clone(),
        );
        Ok(Self {
            arena,
            service,
            gateway: ProviderGateway::new(config.response_cap_bytes),
            config,
            clock,
        })
    }

    fn healthy(&self) -> bool {
        self.service.is_healthy() && self.service.sync_log().is_ok()
    }

    /// Injects a regression tick. Ticks carry a fresh id, never deduplicated.
    pub fn regression_tick(&self) -> Result<arena_core::Ack, PipelineError> {
        let id = format!("tick:{}", uuid::Uuid::new_v4());
        self.arena.backend().submit(NewEvent::regression_tick(id))
    }
}

/// A bound, not yet serving, API server.
pub struct Server {
    state: Shared,
    listener: TcpListener,
}

impl Server {
    pub async fn bind(config: ApiConfig) -> Result<Self, StartError> {
        Self::bind_with_clock(config, Arc::new(SystemClock)).await
    }

    pub async fn bind_with_clock(config: ApiConfig, clock: Arc<dyn Clock>) -> Result<Self, StartError> {
        let addr = config.listen;
        let state = Arc::new(AppState::open(config, clock)?);
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| StartError::Bind { addr, source })?;
        Ok(Self { state, listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn state(&self) -> Shared {
        self.state.clone()
    }

    /// Serves until `shutdown` resolves, then flushes the log.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), StartError> {
        let maintenance = tokio::spawn(maintenance(self.state.clone()));
        let served = axum::serve(self.listener, router(self.state.clone()))
            .with_graceful_shutdown(shutdown)
            .await;
        maintenance.abort();
        if let Err(e) = self.state.service.sync_log() {
            tracing::error!("final log sync failed: {e}");
        }
        served.map_err(StartError::Serve)
    }
}

/// Periodic regression ticks and battle expiry.
async fn maintenance(state: Shared) {
    let tick_every = state.config.regression_tick_interval_secs;
    let sweep_every = Duration::from_secs(state.config.battle_ttl_secs.clamp(1, 60));
    let mut sweep = tokio::time::interval(sweep_every);
    let mut tick = tokio::time::interval(Duration::from_secs(tick_every.max(1)));
    // interval fires immediately; skip that so startup is not a tick
    sweep.tick().await;
    tick.tick().await;
    loop {
        tokio::select! {
            _ = sweep.tick() => {
                let n = state.arena.expire_stale();
                if n > 0 {
                    tracing::info!(expired = n, "expired stale battles");
                }
            }
            _ = tick.tick(), if tick_every > 0 => {
                let st = state.clone();
                match tokio::task::spawn_blocking(move || st.regression_tick()).await {
                    Ok(Ok(ack)) => tracing::info!(seq = ack.seq, "regression tick"),
                    Ok(Err(e)) => tracing::warn!("regression tick rejected: {e}"),
                    Err(e) => tracing::error!("regression tick task failed: {e}"),
                }
            }
        }
    }
}

pub fn router(state: Shared) -> Router {
    let guarded = Router::new()
        .route("/models", post(register_model))
        .route("/admin/regression-tick", post(regression_tick))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/battles", post(create_battle))
        .route("/battles/{id}", get(get_battle))
        .route("/battles/{id}/vote", post(vote))
        .route("/leaderboard/{track}", get(leaderboard))
        .route("/tracks", get(tracks))
        .route("/healthz", get(healthz))
        .merge(guarded)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn require_token(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.admin_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

/// `Json` whose rejections use the API error shape.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = axum::extract::rejection::JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Ok(Self(Json::<T>::from_request(req, state).await?.0))
    }
}

fn parse_track(name: &str) -> Result<TrackId, ApiError> {
    name.parse().map_err(|_| ApiError::unknown_track(name))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBattle {
    pub track: String,
    pub prompt: String,
    /// Pairing seed; random when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BattleCreated {
    pub battle_id: String,
    pub track: TrackId,
    pub status: BattleStatus,
}

async fn create_battle(
    State(state): State<Shared>,
    ApiJson(body): ApiJson<CreateBattle>,
) -> Result<(StatusCode, Json<BattleCreated>), ApiError> {
    let track = parse_track(&body.track).map_err(|e| ApiError::validation(e.message))?;
    let seed = body.seed.unwrap_or_else(rand::random);
    let battle = state.arena.create_battle(track, &body.prompt, seed)?;
    let id = battle.battle_id.clone();
    let st = state.clone();
    tokio::spawn(async move {
        // failures expire the battle; nothing else to do here
        let _ = st
            .arena
            .fill_responses(&id, &st.gateway, st.config.response_deadline())
            .await;
    });
    Ok((
        StatusCode::CREATED,
        Json(BattleCreated {
            battle_id: battle.battle_id,
            track,
            status: battle.status,
        }),
    ))
}

async fn get_battle(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<BattleView>, ApiError> {
    Ok(Json(state.arena.battle(&id)?.view()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteBody {
    pub choice: Choice,
    pub voter_id: String,
    /// Client-chosen idempotency key; resubmitting it returns the original ack.
    pub event_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteAccepted {
    pub event_id: String,
    pub seq: u64,
    pub track: TrackId,
    pub battle_id: String,
    pub outcome: Outcome,
    pub model_left: String,
    pub model_right: String,
}

async fn vote(
    State(state): State<Shared>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<VoteBody>,
) -> Result<(StatusCode, Json<VoteAccepted>), ApiError> {
    if body.voter_id.trim().is_empty() {
        return Err(ApiError::validation("voter_id must be nonempty"));
    }
    let receipt = blocking(move || {
        Ok(state
            .arena
            .cast_vote(&id, body.choice, &body.voter_id, body.event_id.as_deref())?)
    })
    .await?;
    let e = receipt.event;
    Ok((
        StatusCode::ACCEPTED,
        Json(VoteAccepted {
            event_id: e.event_id,
            seq: e.seq,
            track: e.track,
            battle_id: e.battle_id,
            outcome: e.outcome,
            model_left: receipt.model_left,
            model_right: receipt.model_right,
        }),
    ))
}

#[derive(Debug, Deserialize)]
pub struct LeaderboardQuery {
    /// Wait (briefly) until the snapshot reflects at least this seq.
    pub min_seq: Option<u64>,
}

async fn leaderboard(
    State(state): State<Shared>,
    Path(track): Path<String>,
    Query(q): Query<LeaderboardQuery>,
) -> Result<Json<LeaderboardSnapshot>, ApiError> {
    let track = parse_track(&track)?;
    let current = state.service.current(track);
    let snapshot = match q.min_seq {
        Some(seq) if current.produced_by_seq < seq => blocking(move || {
            Ok(state
                .service
                .wait_for_seq(track, seq, MAX_READ_WAIT)
                .unwrap_or_else(|| state.service.current(track)))
        })
        .await?,
        _ => current,
    };
    Ok(Json((*snapshot).clone()))
}

#[derive(Debug, Serialize)]
struct TrackInfo {
    id: TrackId,
    name: &'static str,
}

async fn tracks() -> Json<Vec<TrackInfo>> {
    Json(
        TrackId::ALL
            .into_iter()
            .map(|id| TrackInfo {
                id,
                name: id.display_name(),
            })
            .collect(),
    )
}

async fn healthz(State(state): State<Shared>) -> Response {
    if blocking(move || Ok(state.healthy())).await.unwrap_or(false) {
        Json(serde_json::json!({ "status": "ok" })).into_response()
    } else {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unhealthy", "pipeline or log unavailable").into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterModel {
    pub model_id: String,
    pub tracks: Vec<String>,
    pub provider: ProviderDescriptor,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelRegistered {
    pub model_id: String,
    pub tracks: Vec<TrackId>,
    /// Per-track sequence numbers of the registration events.
    pub seqs: Vec<u64>,
}

async fn register_model(
    State(state): State<Shared>,
    ApiJson(body): ApiJson<RegisterModel>,
) -> Result<(StatusCode, Json<ModelRegistered>), ApiError> {
    let tracks = body
        .tracks
        .iter()
        .map(|t| t.parse::<TrackId>().map_err(|e| ApiError::validation(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let reg = blocking(move || Ok(state.arena.register_model(&body.model_id, &tracks, body.provider)?)).await?;
    Ok((
        StatusCode::CREATED,
        Json(ModelRegistered {
            model_id: reg.model_id,
            tracks: reg.tracks,
            seqs: reg.acks.iter().map(|a| a.seq).collect(),
        }),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TickAccepted {
    pub event_id: String,
    pub seq: u64,
}

async fn regression_tick(State(state): State<Shared>) -> Result<(StatusCode, Json<TickAccepted>), ApiError> {
    let ack = blocking(move || Ok(state.regression_tick()?)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(TickAccepted {
            event_id: ack.event_id,
            seq: ack.seq,
        }),
    ))
}
