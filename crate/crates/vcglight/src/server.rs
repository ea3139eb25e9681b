//! HTTP service.
//!
//! | method | path                    | body                                   |
//! |--------|-------------------------|----------------------------------------|
//! | POST   | `/zones/{z}/login`      | `{user_id, token, latitude, longitude, ballot?}` |
//! | POST   | `/zones/{z}/logout`     | `{session}`                            |
//! | POST   | `/zones/{z}/ballot`     | `{session, ballot}`                    |
//! | POST   | `/zones/{z}/survey`     | `{session}`                            |
//! | POST   | `/zones/{z}/sensors`    | one sensor reading                     |
//! | GET    | `/zones/{z}/state`      | optional `x-session` header            |
//! | GET    | `/zones/{z}/events`     | server-sent `snapshot` events          |
//! | GET    | `/healthz`              |                                        |
//!
//! Errors are `{"code": "...", "message": "..."}`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use vcglight_core::analytics::SensorSample;
use vcglight_core::engine::ActuatorCommand;

use crate::actuator::{self, Actuator, ActuatorDriver, ActuatorHealth};
use crate::clock::Clock;
use crate::config::ServiceConfig;
use crate::zone::{
    ApiError, BallotRequest, ErrorCode, LoginRequest, OpenError, SessionRequest, Snapshot,
    ZoneRuntime,
};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("zone `{zone}`: unsupported actuator endpoint `{endpoint}`")]
    Endpoint { zone: String, endpoint: String },
    #[error(transparent)]
    Open(#[from] OpenError),
}

pub struct ZoneHandle {
    runtime: Mutex<ZoneRuntime>,
    snapshots: watch::Sender<Arc<Snapshot>>,
    actuator: Arc<Actuator>,
    commands: mpsc::Sender<ActuatorCommand>,
}

impl ZoneHandle {
    /// Runs `f` under the zone's writer lock, then dispatches actuator
    /// commands and publishes a fresh snapshot.
    fn write<T>(&self, now: u64, f: impl FnOnce(&mut ZoneRuntime) -> T) -> T {
        let mut rt = self.runtime.lock().expect("zone lock poisoned");
        let out = f(&mut rt);
        for cmd in rt.take_commands() {
            let _ = self.commands.send(cmd);
        }
        self.snapshots.send_replace(Arc::new(rt.snapshot(now)));
        out
    }

    fn read<T>(&self, f: impl FnOnce(&ZoneRuntime) -> T) -> T {
        f(&self.runtime.lock().expect("zone lock poisoned"))
    }

    pub fn actuator_health(&self) -> ActuatorHealth {
        self.actuator.health()
    }
}

pub struct AppState {
    zones: BTreeMap<String, Arc<ZoneHandle>>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    /// Opens every configured zone and starts its actuator worker. Zones
    /// whose endpoint is `mock` or `mock:<name>` use `mock`.
    pub fn new(
        cfg: &ServiceConfig,
        clock: Arc<dyn Clock>,
        mock: Arc<dyn ActuatorDriver>,
    ) -> Result<Arc<Self>, ServerError> {
        let roster = Arc::new(cfg.roster.clone());
        let mut zones = BTreeMap::new();
        for z in &cfg.zones {
            let ep = z.actuator_endpoint.as_str();
            if ep != "mock" && !ep.starts_with("mock:") {
                return Err(ServerError::Endpoint {
                    zone: z.id.clone(),
                    endpoint: ep.to_owned(),
                });
            }
            let rt = ZoneRuntime::open(z.clone(), Arc::clone(&roster), &cfg.data_dir, cfg.fsync)?;
            zones.insert(z.id.clone(), Arc::new(Self::handle(rt, z, mock.clone(), clock.now_ms())));
        }
        Ok(Arc::new(Self { zones, clock }))
    }

    fn handle(
        rt: ZoneRuntime,
        z: &crate::config::ZoneConfig,
        driver: Arc<dyn ActuatorDriver>,
        now: u64,
    ) -> ZoneHandle {
        let actuator = Arc::new(Actuator::new(z.id.clone(), z.levels(), driver, z.retry.clone()));
        let commands = actuator::spawn_worker(Arc::clone(&actuator));
        let (snapshots, _) = watch::channel(Arc::new(rt.snapshot(now)));
        let handle = ZoneHandle {
            runtime: Mutex::new(rt),
            snapshots,
            actuator,
            commands,
        };
        handle.write(now, |_| ());
        handle
    }

    pub fn zone(&self, id: &str) -> Result<Arc<ZoneHandle>, ApiError> {
        self.zones
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownZone, format!("no zone `{id}`")))
    }

    pub fn zone_ids(&self) -> impl Iterator<Item = &str> {
        self.zones.keys().map(String::as_str)
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Runs the work-hours scheduler of every zone once.
    pub fn tick(&self) {
        let now = self.now_ms();
        for (id, z) in &self.zones {
            if let Err(e) = z.write(now, |rt| rt.tick(now)) {
                tracing::error!(zone = %id, error = %e, "scheduler tick failed");
            }
        }
    }
}

fn status(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::PresenceRequired | ErrorCode::OutsideWorkHours => StatusCode::FORBIDDEN,
        ErrorCode::UnknownZone => StatusCode::NOT_FOUND,
        ErrorCode::Unauthorized | ErrorCode::StaleSession => StatusCode::UNAUTHORIZED,
        ErrorCode::InvalidBallot => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::InvalidRequest => StatusCode::BAD_REQUEST,
        ErrorCode::Conflict => StatusCode::CONFLICT,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct HttpError(StatusCode, ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        Self(status(e.code), e)
    }
}

impl From<JsonRejection> for HttpError {
    fn from(r: JsonRejection) -> Self {
        Self(r.status(), ApiError::new(ErrorCode::InvalidRequest, r.body_text()))
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<Json<T>, HttpError>;
type Shared = State<Arc<AppState>>;

/// Runs a mutation on the blocking pool; the event log may fsync.
async fn mutate<T: Send + 'static>(
    state: &AppState,
    zone: &str,
    f: impl FnOnce(&mut ZoneRuntime, u64) -> Result<T, ApiError> + Send + 'static,
) -> Reply<T> {
    let handle = state.zone(zone)?;
    let now = state.now_ms();
    let out = tokio::task::spawn_blocking(move || handle.write(now, |rt| f(rt, now)))
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))??;
    Ok(Json(out))
}

async fn login(
    State(s): Shared,
    Path(zone): Path<String>,
    body: Result<Json<LoginRequest>, JsonRejection>,
) -> Reply<impl Serialize> {
    let Json(req) = body?;
    mutate(&s, &zone, move |rt, now| rt.login(&req, now)).await
}

async fn logout(
    State(s): Shared,
    Path(zone): Path<String>,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> Reply<impl Serialize> {
    let Json(req) = body?;
    mutate(&s, &zone, move |rt, now| rt.logout(&req.session, now)).await
}

async fn ballot(
    State(s): Shared,
    Path(zone): Path<String>,
    body: Result<Json<BallotRequest>, JsonRejection>,
) -> Reply<impl Serialize> {
    let Json(req) = body?;
    mutate(&s, &zone, move |rt, now| rt.ballot(&req.session, &req.ballot, now)).await
}

async fn survey(
    State(s): Shared,
    Path(zone): Path<String>,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> Reply<impl Serialize> {
    let Json(req) = body?;
    mutate(&s, &zone, move |rt, now| rt.survey(&req.session, now)).await
}

#[derive(Debug, Deserialize)]
struct SensorInput {
    timestamp_ms: Option<u64>,
    humidity_percent: f64,
    temperature_deg_f: f64,
    pressure_in_hg: f64,
    solar_radiation_w_per_m2: f64,
}

async fn sensors(
    State(s): Shared,
    Path(zone): Path<String>,
    body: Result<Json<SensorInput>, JsonRejection>,
) -> Reply<impl Serialize> {
    let Json(r) = body?;
    mutate(&s, &zone, move |rt, now| {
        rt.record_sensor(SensorSample {
            timestamp_ms: r.timestamp_ms.unwrap_or(now),
            humidity_percent: r.humidity_percent,
            temperature_deg_f: r.temperature_deg_f,
            pressure_in_hg: r.pressure_in_hg,
            solar_radiation_w_per_m2: r.solar_radiation_w_per_m2,
        })?;
        Ok(rt.snapshot(now).latest_sensor)
    })
    .await
}

async fn get_state(
    State(s): Shared,
    Path(zone): Path<String>,
    headers: HeaderMap,
) -> Reply<Snapshot> {
    let handle = s.zone(&zone)?;
    let now = s.now_ms();
    let session = headers
        .get("x-session")
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let snap = handle.read(|rt| {
        let caller = session.as_deref().and_then(|t| rt.caller(t));
        rt.snapshot_for(now, caller.as_ref())
    });
    Ok(Json(snap))
}

async fn events(
    State(s): Shared,
    Path(zone): Path<String>,
) -> Result<Sse<impl futures::Stream<Item = Result<Event, Infallible>>>, HttpError> {
    let rx = s.zone(&zone)?.snapshots.subscribe();
    let stream = futures::stream::unfold((rx, true), |(mut rx, first)| async move {
        if !first && rx.changed().await.is_err() {
            return None;
        }
        let snap = Arc::clone(&rx.borrow_and_update());
        let event = Event::default()
            .event("snapshot")
            .json_data(&*snap)
            .expect("snapshots serialize");
        Some((Ok(event), (rx, false)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Serialize)]
struct ZoneHealth {
    last_event_ms: Option<u64>,
    work_hours: bool,
    actuator: ActuatorHealth,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    zones: BTreeMap<String, ZoneHealth>,
}

async fn healthz(State(s): Shared) -> Json<Health> {
    let zones: BTreeMap<String, ZoneHealth> = s
        .zones
        .iter()
        .map(|(id, z)| {
            let (last_event_ms, work_hours) = z.read(|rt| {
                let st = rt.engine().state();
                (st.last_timestamp_ms(), st.in_work_hours())
            });
            (
                id.clone(),
                ZoneHealth {
                    last_event_ms,
                    work_hours,
                    actuator: z.actuator_health(),
                },
            )
        })
        .collect();
    let healthy = zones.values().all(|z| z.actuator.healthy);
    Json(Health {
        status: if healthy { "ok" } else { "degraded" },
        zones,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/zones/{zone}/login", post(login))
        .route("/zones/{zone}/logout", post(logout))
        .route("/zones/{zone}/ballot", post(ballot))
        .route("/zones/{zone}/survey", post(survey))
        .route("/zones/{zone}/sensors", post(sensors))
        .route("/zones/{zone}/state", get(get_state))
        .route("/zones/{zone}/events", get(events))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Ticks every zone's scheduler every `period`.
pub fn spawn_scheduler(state: Arc<AppState>, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let s = Arc::clone(&state);
            if tokio::task::spawn_blocking(move || s.tick()).await.is_err() {
                tracing::error!("scheduler tick panicked");
            }
        }
    })
}

/// Binds `cfg.listen` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig, clock: Arc<dyn Clock>) -> anyhow::Result<()> {
    let mock: Arc<dyn ActuatorDriver> = Arc::new(actuator::MockDriver::new());
    let state = AppState::new(&cfg, clock, mock)?;
    spawn_scheduler(Arc::clone(&state), Duration::from_millis(cfg.tick_ms));
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    tracing::info!(%addr, zones = ?state.zone_ids().collect::<Vec<_>>(), "listening");
    println!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
