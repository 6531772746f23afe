mod common;

use std::net::SocketAddr;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use common::{quick_config, read_key_from_pgm, sealed, SK, SP};
use http_body_util::BodyExt;
use pcv_cli::service::{router, AppState, Phase1Response, ServiceConfig, IMAGE_SCALE};
use pcv_core::vault::VaultContainer;
use tower::ServiceExt;

const BOUNDARY: &str = "pcv-test-boundary";

fn config() -> ServiceConfig {
    ServiceConfig {
        encrypt: quick_config(),
        ..ServiceConfig::default()
    }
}

fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\
                 Content-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn form_request(uri: &str, parts: &[(&str, &[u8])]) -> Request<Body> {
    Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(parts)))
        .unwrap()
}

fn json_request(uri: &str, value: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(value.to_string()))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let response = app.clone().oneshot(req).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn phase1(app: &Router, container: &[u8], sp: &str) -> (StatusCode, Option<Phase1Response>) {
    let (status, body) = send(
        app,
        form_request("/v1/decrypt/phase1", &[("container", container), ("sp", sp.as_bytes())]),
    )
    .await;
    (status, serde_json::from_slice(&body).ok())
}

async fn phase2(app: &Router, session_id: &str, sk: &str) -> (StatusCode, Vec<u8>) {
    send(
        app,
        json_request("/v1/decrypt/phase2", serde_json::json!({ "session_id": session_id, "sk": sk })),
    )
    .await
}

fn decode_image(r: &Phase1Response, n: usize) -> String {
    let pgm = base64::engine::general_purpose::STANDARD.decode(&r.image).unwrap();
    read_key_from_pgm(&pgm, n, r.sk_len)
}

#[tokio::test]
async fn health_reports_ok() {
    let app = router(AppState::new(config()));
    let (status, body) = send(&app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn encrypt_then_two_phase_decrypt() {
    let app = router(AppState::new(config()));
    let payload = b"launch codes: none, this is a test\n";
    let (status, container) = send(
        &app,
        form_request("/v1/encrypt", &[("file", payload), ("sp", SP.as_bytes())]),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let parsed = VaultContainer::from_bytes(&container).unwrap();

    let (status, session) = phase1(&app, &container, SP).await;
    assert_eq!(status, StatusCode::OK);
    let session = session.unwrap();
    assert_eq!(session.width, parsed.n as usize * IMAGE_SCALE);
    let typed = decode_image(&session, parsed.n as usize);
    assert_eq!(typed.len(), session.sk_len);

    let (status, body) = phase2(&app, &session.session_id, &typed).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(body, payload);

    // Single use.
    let (status, _) = phase2(&app, &session.session_id, &typed).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn wrong_key_is_401_with_bounded_retries() {
    let state = AppState::new(ServiceConfig {
        max_sk_attempts: 2,
        ..config()
    });
    let app = router(state.clone());
    let container = sealed(b"retry me", 11).to_bytes();
    let (_, session) = phase1(&app, &container, SP).await;
    let id = session.unwrap().session_id;

    let (status, body) = phase2(&app, &id, "AAAAA").await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["attempts_left"], 1);

    // The session survives one mistake.
    let (status, body) = phase2(&app, &id, SK).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"retry me");
    assert_eq!(state.live_sessions(), 0);

    let (_, session) = phase1(&app, &container, SP).await;
    let id = session.unwrap().session_id;
    assert_eq!(phase2(&app, &id, "AAAAA").await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(phase2(&app, &id, "BBBBB").await.0, StatusCode::UNAUTHORIZED);
    // Out of attempts: the session is gone even for the right key.
    assert_eq!(phase2(&app, &id, SK).await.0, StatusCode::GONE);
}

#[tokio::test]
async fn wrong_password_still_yields_an_image() {
    let app = router(AppState::new(config()));
    let container = sealed(b"x", 12);
    let (status, session) = phase1(&app, &container.to_bytes(), "not the password").await;
    assert_eq!(status, StatusCode::OK);
    let session = session.unwrap();
    assert_eq!(session.sk_len, SK.len());
    assert!(!session.image.is_empty());
    // The short test protection time leaves the wrong image close to the
    // right one, so only the key check is asserted here.
    assert_eq!(phase2(&app, &session.session_id, SK).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let app = router(AppState::new(config()));
    let (status, _) = phase1(&app, b"PCV1 but not really", SP).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let container = sealed(b"x", 13).to_bytes();
    let (status, _) = send(&app, form_request("/v1/decrypt/phase1", &[("container", &container)])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "missing password");

    let (status, _) = send(&app, form_request("/v1/encrypt", &[("sp", SP.as_bytes())])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "missing file");

    let (status, _) = send(
        &app,
        Request::post("/v1/decrypt/phase2")
            .header("content-type", "application/json")
            .body(Body::from("{\"session_id\": 3}"))
            .unwrap(),
    )
    .await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn expired_session_is_410() {
    let app = router(AppState::new(ServiceConfig {
        session_ttl: Duration::ZERO,
        ..config()
    }));
    let container = sealed(b"x", 14).to_bytes();
    let (status, session) = phase1(&app, &container, SP).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = phase2(&app, &session.unwrap().session_id, SK).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(phase2(&app, "no-such-session", SK).await.0, StatusCode::GONE);
}

#[tokio::test]
async fn session_cap_is_429() {
    let app = router(AppState::new(ServiceConfig {
        max_sessions: 1,
        ..config()
    }));
    let container = sealed(b"x", 15).to_bytes();
    assert_eq!(phase1(&app, &container, SP).await.0, StatusCode::OK);
    assert_eq!(phase1(&app, &container, SP).await.0, StatusCode::TOO_MANY_REQUESTS);
}

#[test]
fn remote_bind_needs_explicit_opt_in() {
    let remote = ServiceConfig {
        bind: SocketAddr::from(([0, 0, 0, 0], 8787)),
        ..ServiceConfig::default()
    };
    assert!(remote.validate().is_err());
    assert!(ServiceConfig {
        allow_remote: true,
        ..remote
    }
    .validate()
    .is_ok());
    assert!(ServiceConfig::default().validate().is_ok());
    assert!(ServiceConfig {
        bind: SocketAddr::from(([0, 0, 0, 0, 0, 0, 0, 1], 8787)),
        ..ServiceConfig::default()
    }
    .validate()
    .is_ok());
}
