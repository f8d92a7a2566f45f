//! HTTP routes over [`CommTool`].
//!
//! `/api/...` needs a communicator bearer token, `/t/{token}/...` only the
//! tracking token and `/s/{share_token}...` only the share token.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use chrono::Utc;
use commtool_core::delivery::Transport;
use commtool_core::domain::{CampaignId, ChannelId, SectionId, DEFAULT_HOURLY_RATE_USD};
use commtool_core::reports::DashboardKind;
use commtool_core::service::{CommTool, NewChannel, ServiceConfig};
use commtool_core::splitter::EditOp;
use commtool_core::store::Store;
use commtool_core::token::{constant_time_eq, SigningKey};
use commtool_core::Error;
use serde::Deserialize;
use serde_json::json;

pub const DEFAULT_PORT: u16 = 8080;
/// Owner name given to a bearer configured without one.
pub const DEFAULT_OWNER: &str = "default";
const API_BODY_LIMIT: usize = 3 * 1024 * 1024;
const EVENTS_BODY_LIMIT: usize = 1024 * 1024;
const REMINDER_TICK: Duration = Duration::from_secs(60);

/// Who may call a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Public,
    Communicator,
    Tracking,
    Share,
}

/// Every route the server mounts.
pub const ROUTES: &[(&str, &str, Access)] = &[
    ("GET", "/healthz", Access::Public),
    ("POST", "/api/channels", Access::Communicator),
    ("POST", "/api/channels/{id}/recipients", Access::Communicator),
    ("POST", "/api/channels/{id}/campaigns", Access::Communicator),
    ("PATCH", "/api/campaigns/{id}/sections", Access::Communicator),
    ("POST", "/api/campaigns/{id}/send", Access::Communicator),
    ("GET", "/api/campaigns/{id}/dashboard", Access::Communicator),
    ("POST", "/api/campaigns/{id}/share", Access::Communicator),
    ("GET", "/api/campaigns/{id}/export.csv", Access::Communicator),
    ("GET", "/s/{share_token}", Access::Share),
    ("GET", "/s/{share_token}.json", Access::Share),
    ("POST", "/s/{share_token}/comments", Access::Share),
    ("GET", "/t/{token}", Access::Tracking),
    ("POST", "/t/{token}/events", Access::Tracking),
    ("POST", "/t/{token}/relevance", Access::Tracking),
    ("POST", "/t/{token}/comments", Access::Tracking),
];

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Auth(_) => StatusCode::UNAUTHORIZED,
        Error::Forbidden(_) => StatusCode::FORBIDDEN,
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::State(_) => StatusCode::CONFLICT,
        Error::Validation(_) | Error::Edit(_) | Error::Csv(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub tool: Arc<CommTool>,
    /// `(owner, token)` pairs.
    pub bearers: Arc<Vec<(String, String)>>,
    pub transport: Arc<dyn Transport>,
}

/// The authenticated communicator.
pub struct Communicator(pub String);

impl FromRequestParts<AppState> for Communicator {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> ApiResult<Self> {
        let presented = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| Error::Auth("missing bearer token".into()))?;
        // compare against every entry so timing does not reveal which matched
        let mut owner = None;
        for (name, token) in state.bearers.iter() {
            if constant_time_eq(token.as_bytes(), presented.as_bytes()) {
                owner = Some(name.clone());
            }
        }
        owner.map(Communicator).ok_or_else(|| Error::Auth("bad bearer token".into()).into())
    }
}

/// Parses `token` or `owner:token[,owner:token...]`.
pub fn parse_bearers(spec: &str) -> commtool_core::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (owner, token) = part.split_once(':').unwrap_or((DEFAULT_OWNER, part));
        if token.is_empty() || owner.is_empty() {
            return Err(Error::Config(format!("bad bearer entry {part:?}")));
        }
        out.push((owner.to_string(), token.to_string()));
    }
    if out.is_empty() {
        return Err(Error::Config("no bearer token configured".into()));
    }
    Ok(out)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> commtool_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError(Error::Config(format!("worker failed: {e}"))))?.map_err(ApiError)
}

/// Decodes a JSON body once the caller has been authenticated, so a bad
/// token is reported as such whatever the body holds.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> commtool_core::Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::Validation(format!("bad request body: {e}")))
}

fn now_ms() -> i64 {
    Utc::now().timestamp_millis()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response()
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_channel(State(s): State<AppState>, Communicator(owner): Communicator, Json(body): Json<NewChannel>) -> ApiResult<Response> {
    let channel = blocking(move || s.tool.create_channel(&owner, body)).await?;
    Ok((StatusCode::CREATED, Json(channel)).into_response())
}

#[derive(Deserialize)]
struct SeedQuery {
    #[serde(default)]
    seed: u64,
}

async fn import_recipients(
    State(s): State<AppState>,
    Communicator(owner): Communicator,
    Path(id): Path<String>,
    Query(q): Query<SeedQuery>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let report = blocking(move || s.tool.import_recipients(&owner, &ChannelId(id), &body, q.seed)).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct NewCampaign {
    #[serde(default)]
    campaign_id: Option<String>,
    subject: String,
    html: String,
}

async fn create_campaign(
    State(s): State<AppState>,
    Communicator(owner): Communicator,
    Path(id): Path<String>,
    Json(body): Json<NewCampaign>,
) -> ApiResult<Response> {
    let c =
        blocking(move || s.tool.create_campaign(&owner, &ChannelId(id), body.campaign_id.as_deref(), &body.subject, &body.html)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "campaign_id": c.campaign_id, "sections": c.sections }))).into_response())
}

async fn edit_sections(
    State(s): State<AppState>,
    Communicator(owner): Communicator,
    Path(id): Path<String>,
    Json(ops): Json<Vec<EditOp>>,
) -> ApiResult<Response> {
    let c = blocking(move || s.tool.edit_sections(&owner, &CampaignId(id), &ops)).await?;
    Ok(Json(json!({ "campaign_id": c.campaign_id, "sections": c.sections })).into_response())
}

async fn send(State(s): State<AppState>, Communicator(owner): Communicator, Path(id): Path<String>) -> ApiResult<Response> {
    let report = blocking(move || s.tool.send(&owner, &CampaignId(id), s.transport.as_ref(), Utc::now())).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct KindQuery {
    kind: String,
}

async fn dashboard(
    State(s): State<AppState>,
    Communicator(owner): Communicator,
    Path(id): Path<String>,
    Query(q): Query<KindQuery>,
) -> ApiResult<Response> {
    let kind = DashboardKind::parse(&q.kind)?;
    let d = blocking(move || s.tool.dashboard(&owner, &CampaignId(id), kind)).await?;
    Ok(json_bytes(d.canonical_json()))
}

#[derive(Deserialize)]
struct ShareBody {
    kind: String,
    #[serde(default)]
    notes: String,
}

async fn share(
    State(s): State<AppState>,
    Communicator(owner): Communicator,
    Path(id): Path<String>,
    Json(body): Json<ShareBody>,
) -> ApiResult<Response> {
    let kind = DashboardKind::parse(&body.kind)?;
    let share = blocking(move || s.tool.share(&owner, &CampaignId(id), kind, &body.notes, Utc::now())).await?;
    Ok((StatusCode::CREATED, Json(json!({ "share": share, "path": format!("/s/{}", share.share_token) }))).into_response())
}

async fn export_csv(State(s): State<AppState>, Communicator(owner): Communicator, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let mut out = Vec::new();
        s.tool.export_csv(&owner, &CampaignId(id), &mut out)?;
        Ok(out)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("text/csv"))], bytes).into_response())
}

async fn shared(State(s): State<AppState>, Path(token): Path<String>) -> ApiResult<Response> {
    let (token, as_json) = match token.strip_suffix(".json") {
        Some(t) => (t.to_string(), true),
        None => (token, false),
    };
    let (share, dashboard) = blocking(move || s.tool.resolve_share(&token)).await?;
    if as_json {
        let body = json!({ "notes": share.notes, "kind": share.kind, "dashboard": dashboard });
        return Ok(Json(body).into_response());
    }
    let pretty = serde_json::to_string_pretty(&dashboard).map_err(Error::from)?;
    let page = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{kind} dashboard</title></head><body>\
         <h1>{kind} dashboard</h1><p class=\"notes\">{notes}</p><pre id=\"dashboard\">{data}</pre>\
         <form method=\"post\" action=\"/s/{token}/comments\"><input name=\"section_id\"><textarea name=\"text\"></textarea>\
         <button type=\"submit\">Comment as sender</button></form></body></html>\n",
        kind = share.kind.as_str(),
        notes = html_escape::encode_text(&share.notes),
        data = html_escape::encode_text(&pretty),
        token = html_escape::encode_double_quoted_attribute(&share.share_token),
    );
    Ok(Html(page).into_response())
}

#[derive(Deserialize)]
struct CommentBody {
    section_id: SectionId,
    text: String,
    #[serde(default)]
    pinned: bool,
    #[serde(default)]
    ts: Option<i64>,
}

async fn share_comment(State(s): State<AppState>, Path(token): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    blocking(move || {
        s.tool.find_share(&token)?;
        let b: CommentBody = parse_body(&body)?;
        s.tool.share_comment(&token, &b.section_id, &b.text, b.pinned, b.ts.unwrap_or_else(now_ms))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "ok": true }))).into_response())
}

async fn tracked_page(State(s): State<AppState>, Path(token): Path<String>) -> ApiResult<Response> {
    let page = blocking(move || s.tool.recipient_page(&token)).await?;
    Ok(Html(page).into_response())
}

async fn events(State(s): State<AppState>, Path(token): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let n = blocking(move || s.tool.record_events(&token, &body)).await?;
    Ok(Json(json!({ "ok": true, "n": n })).into_response())
}

#[derive(Deserialize)]
struct RelevanceBody {
    section_id: SectionId,
    on: bool,
    #[serde(default)]
    ts: Option<i64>,
}

async fn relevance(State(s): State<AppState>, Path(token): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    blocking(move || {
        s.tool.verify_tracking(&token)?;
        let b: RelevanceBody = parse_body(&body)?;
        s.tool.set_relevance(&token, &b.section_id, b.on, b.ts.unwrap_or_else(now_ms))
    })
    .await?;
    Ok(Json(json!({ "ok": true })).into_response())
}

async fn recipient_comment(State(s): State<AppState>, Path(token): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    blocking(move || {
        s.tool.verify_tracking(&token)?;
        let b: CommentBody = parse_body(&body)?;
        if b.pinned {
            return Err(Error::Forbidden("only senders pin comments".into()));
        }
        s.tool.recipient_comment(&token, &b.section_id, &b.text, b.ts.unwrap_or_else(now_ms))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "ok": true }))).into_response())
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/channels", post(create_channel))
        .route("/api/channels/{id}/recipients", post(import_recipients))
        .route("/api/channels/{id}/campaigns", post(create_campaign))
        .route("/api/campaigns/{id}/sections", patch(edit_sections))
        .route("/api/campaigns/{id}/send", post(send))
        .route("/api/campaigns/{id}/dashboard", get(dashboard))
        .route("/api/campaigns/{id}/share", post(share))
        .route("/api/campaigns/{id}/export.csv", get(export_csv))
        .layer(DefaultBodyLimit::max(API_BODY_LIMIT));
    let recipient = Router::new()
        .route("/t/{token}", get(tracked_page))
        .route("/t/{token}/events", post(events))
        .route("/t/{token}/relevance", post(relevance))
        .route("/t/{token}/comments", post(recipient_comment))
        // `/s/{share_token}.json` shares the first route; the handler strips the suffix
        .route("/s/{share_token}", get(shared))
        .route("/s/{share_token}/comments", post(share_comment))
        .layer(DefaultBodyLimit::max(EVENTS_BODY_LIMIT));
    Router::new().route("/healthz", get(healthz)).merge(api).merge(recipient).with_state(state)
}

/// Method and path of [`ROUTES`] in a form tests can iterate.
pub fn route_methods() -> Vec<(Method, &'static str, Access)> {
    ROUTES.iter().map(|(m, p, a)| (m.parse().expect("valid method"), *p, *a)).collect()
}

#[derive(Debug, Clone)]
pub struct Config {
    pub port: u16,
    pub data_dir: PathBuf,
    pub secret: Vec<u8>,
    pub bearers: Vec<(String, String)>,
    pub timezone: String,
    pub hourly_rate_usd: f64,
    pub base_url: String,
}

impl Config {
    pub fn from_env() -> commtool_core::Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let port = match var("COMMTOOL_PORT") {
            Some(p) => p.parse().map_err(|_| Error::Config(format!("bad COMMTOOL_PORT {p:?}")))?,
            None => DEFAULT_PORT,
        };
        let secret = var("COMMTOOL_SECRET").ok_or_else(|| Error::Config("COMMTOOL_SECRET is not set".into()))?;
        let bearer = var("COMMTOOL_BEARER").ok_or_else(|| Error::Config("COMMTOOL_BEARER is not set".into()))?;
        let timezone = var("COMMTOOL_TZ").unwrap_or_else(|| "UTC".into());
        timezone.parse::<chrono_tz::Tz>().map_err(|_| Error::Config(format!("unknown COMMTOOL_TZ {timezone:?}")))?;
        let hourly_rate_usd = match var("COMMTOOL_HOURLY_RATE") {
            Some(r) => r.parse().map_err(|_| Error::Config(format!("bad COMMTOOL_HOURLY_RATE {r:?}")))?,
            None => DEFAULT_HOURLY_RATE_USD,
        };
        Ok(Config {
            port,
            data_dir: var("COMMTOOL_DATA_DIR").unwrap_or_else(|| "./data".into()).into(),
            secret: secret.into_bytes(),
            bearers: parse_bearers(&bearer)?,
            timezone,
            hourly_rate_usd,
            base_url: format!("http://localhost:{port}"),
        })
    }

    pub fn tool(&self) -> commtool_core::Result<CommTool> {
        let service = ServiceConfig {
            base_url: self.base_url.clone(),
            default_timezone: self.timezone.clone(),
            default_hourly_rate_usd: self.hourly_rate_usd,
            ..ServiceConfig::default()
        };
        Ok(CommTool::new(Store::open(&self.data_dir)?, SigningKey::new(self.secret.clone())?, service))
    }
}

/// Runs the server until Ctrl-C, with the reminder scheduler ticking in
/// the background. In-flight requests finish before it returns.
pub async fn serve(config: Config, tool: CommTool, transport: Arc<dyn Transport>) -> commtool_core::Result<()> {
    let state = AppState { tool: Arc::new(tool), bearers: Arc::new(config.bearers.clone()), transport };
    let scheduler = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(REMINDER_TICK);
            loop {
                tick.tick().await;
                let s = state.clone();
                let sent = tokio::task::spawn_blocking(move || s.tool.run_reminders(Utc::now(), s.transport.as_ref())).await;
                match sent {
                    Ok(Ok(m)) if !m.is_empty() => log::info!("sent {} reminder(s)", m.len()),
                    Ok(Err(e)) => log::warn!("reminder pass failed: {e}"),
                    _ => {}
                }
            }
        })
    };
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::Config(format!("cannot listen on {addr}: {e}")))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    scheduler.abort();
    Ok(())
}
