//! Local HTTP service behind the web front end: encryption and the two-phase,
//! human-in-the-loop decryption.
//!
//! Sessions live in memory only. Passwords and strong keys never reach the
//! log; requests are logged by route and status.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use pcv_core::glyphs::GrayImage;
use pcv_core::vault::{decrypt_phase1_with_ttl, encrypt_flow, DecryptSession, EncryptConfig, VaultContainer};
use pcv_core::Error;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use zeroize::Zeroizing;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Required to bind anything but a loopback address.
    pub allow_remote: bool,
    pub session_ttl: Duration,
    pub max_sessions: usize,
    /// Wrong strong-key entries tolerated per session before it is dropped.
    pub max_sk_attempts: u32,
    pub max_body_bytes: usize,
    /// Concurrent physics jobs (encryptions and back-integrations).
    pub workers: usize,
    pub encrypt: EncryptConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8787)),
            allow_remote: false,
            session_ttl: pcv_core::vault::DEFAULT_SESSION_TTL,
            max_sessions: 16,
            max_sk_attempts: 5,
            max_body_bytes: 64 << 20,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            encrypt: EncryptConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.bind.ip().is_loopback() && !self.allow_remote {
            return Err(format!(
                "refusing to bind {} without --allow-remote: secrets travel over this socket",
                self.bind
            ));
        }
        if self.max_sessions == 0 || self.max_sk_attempts == 0 || self.workers == 0 {
            return Err("session, attempt and worker limits must be positive".into());
        }
        Ok(())
    }
}

struct Entry {
    session: DecryptSession,
    attempts_left: u32,
}

pub struct AppState {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Entry>>,
    workers: Semaphore,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            workers: Semaphore::new(config.workers.max(1)),
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Runs a physics job on the blocking pool, at most `workers` at a time.
    async fn run<T: Send + 'static>(&self, job: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
        let _permit = self
            .workers
            .acquire()
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        tokio::task::spawn_blocking(job)
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
    }

    pub fn live_sessions(&self) -> usize {
        let mut sessions = self.sessions.lock().unwrap();
        purge_expired(&mut sessions, Instant::now());
        sessions.len()
    }
}

fn purge_expired(sessions: &mut HashMap<String, Entry>, now: Instant) {
    sessions.retain(|_, e| !e.session.is_expired(now));
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    attempts_left: Option<u32>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error,
                message: message.into(),
                attempts_left: None,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn gone() -> Self {
        Self::new(StatusCode::GONE, "session_expired", "session expired or unknown; start again")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::MalformedContainer(_) => Self::new(StatusCode::BAD_REQUEST, "malformed_container", e.to_string()),
            Error::EmptyPassword | Error::InvalidParams(_) | Error::InvalidKey(_) => Self::bad_request(e.to_string()),
            Error::AuthFailure => Self::new(StatusCode::UNAUTHORIZED, "auth_failure", "wrong strong key or password"),
            Error::SessionExpired => Self::gone(),
            Error::SelfCheckExhausted { .. } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "self_check_exhausted", e.to_string())
            }
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        tracing::info!(status = self.status.as_u16(), error = self.body.error, "request failed");
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/encrypt", post(encrypt))
        .route("/v1/decrypt/phase1", post(phase1))
        .route("/v1/decrypt/phase2", post(phase2))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

/// Multipart form of a file part plus a password part.
struct Upload {
    file: Option<Bytes>,
    sp: Zeroizing<String>,
}

async fn read_upload(mut form: Multipart, file_field: &str) -> Result<Upload, ApiError> {
    let mut upload = Upload {
        file: None,
        sp: Zeroizing::new(String::new()),
    };
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("multipart field {name}: {e}")))?;
        if name == file_field {
            upload.file = Some(bytes);
        } else if name == "sp" {
            let text = String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request("sp is not UTF-8"))?;
            upload.sp = Zeroizing::new(text);
        }
    }
    if upload.sp.is_empty() {
        return Err(ApiError::bad_request("missing password field 'sp'"));
    }
    Ok(upload)
}

async fn encrypt(State(state): State<Arc<AppState>>, form: Multipart) -> Result<Response, ApiError> {
    let upload = read_upload(form, "file").await?;
    let data = upload
        .file
        .ok_or_else(|| ApiError::bad_request("missing file field 'file'"))?;
    let config = state.config.encrypt.clone();
    let sp = upload.sp;
    let (container, report) = state.run(move || encrypt_flow(&data, &sp, &config, &mut OsRng)).await??;
    tracing::info!(attempts = report.attempts, "container sealed");
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"vault.pcv\""),
        ],
        container.to_bytes(),
    )
        .into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Phase1Response {
    pub session_id: String,
    /// Binary PGM (P5), `IMAGE_SCALE` pixels per site, base64.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub sk_len: usize,
    /// Unix seconds.
    pub expires_at: u64,
}

/// Pixels per lattice site in phase-1 images.
pub const IMAGE_SCALE: usize = 8;

async fn phase1(State(state): State<Arc<AppState>>, form: Multipart) -> Result<Json<Phase1Response>, ApiError> {
    let upload = read_upload(form, "container").await?;
    let bytes = upload
        .file
        .ok_or_else(|| ApiError::bad_request("missing file field 'container'"))?;
    let container = VaultContainer::from_bytes(&bytes)?;
    {
        let mut sessions = state.sessions.lock().unwrap();
        purge_expired(&mut sessions, Instant::now());
        if sessions.len() >= state.config.max_sessions {
            return Err(ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "too_many_sessions",
                "session limit reached; retry later",
            ));
        }
    }
    let ttl = state.config.session_ttl;
    let sp = upload.sp;
    let session = state.run(move || decrypt_phase1_with_ttl(container, &sp, ttl)).await??;
    let image = GrayImage::from_sign_field(&session.field, IMAGE_SCALE);
    let mut token = [0u8; 24];
    OsRng.fill_bytes(&mut token);
    let token = hex::encode(token);
    let expires_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .saturating_add(ttl)
        .as_secs();
    let response = Phase1Response {
        session_id: token.clone(),
        image: base64::engine::general_purpose::STANDARD.encode(image.to_pgm()),
        width: image.width,
        height: image.height,
        sk_len: session.sk_len(),
        expires_at,
    };
    let mut sessions = state.sessions.lock().unwrap();
    if sessions.len() >= state.config.max_sessions {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "too_many_sessions",
            "session limit reached; retry later",
        ));
    }
    sessions.insert(
        token,
        Entry {
            session,
            attempts_left: state.config.max_sk_attempts,
        },
    );
    tracing::info!("decrypt session opened");
    Ok(Json(response))
}

#[derive(Deserialize)]
pub struct Phase2Request {
    pub session_id: String,
    pub sk: Zeroizing<String>,
}

async fn phase2(State(state): State<Arc<AppState>>, Json(req): Json<Phase2Request>) -> Result<Response, ApiError> {
    let now = Instant::now();
    // Take the entry out while the KDF runs so a session cannot be raced.
    let entry = {
        let mut sessions = state.sessions.lock().unwrap();
        purge_expired(&mut sessions, now);
        sessions.remove(&req.session_id).ok_or_else(ApiError::gone)?
    };
    let sk = req.sk;
    let (entry, outcome) = state
        .run(move || {
            let outcome = entry.session.try_sk_at(&sk, now);
            (entry, outcome)
        })
        .await?;
    match outcome {
        Ok(payload) => {
            let mut entry = entry;
            entry.session.wipe();
            tracing::info!("decrypt session completed");
            Ok((
                [
                    (header::CONTENT_TYPE, "application/octet-stream"),
                    (header::CONTENT_DISPOSITION, "attachment; filename=\"payload.bin\""),
                ],
                payload,
            )
                .into_response())
        }
        Err(Error::AuthFailure) => {
            let mut entry = entry;
            entry.attempts_left -= 1;
            let left = entry.attempts_left;
            if left > 0 {
                state.sessions.lock().unwrap().insert(req.session_id, entry);
            } else {
                entry.session.wipe();
            }
            let mut err = ApiError::from(Error::AuthFailure);
            err.body.attempts_left = Some(left);
            Err(err)
        }
        Err(other) => Err(other.into()),
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    config
        .validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::PermissionDenied, e))?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let app = router(AppState::new(config));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
