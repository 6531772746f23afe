//! Runs a full session with every log level captured and checks that no
//! secret reaches the log.

mod common;

use std::io::Write;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::{quick_config, sealed, SK, SP};
use http_body_util::BodyExt;
use pcv_cli::service::{router, AppState, Phase1Response, ServiceConfig};
use tower::ServiceExt;

#[derive(Clone, Default)]
struct Capture(Arc<Mutex<Vec<u8>>>);

impl Write for Capture {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test]
async fn credentials_never_logged() {
    let capture = Capture::default();
    let writer = capture.clone();
    tracing_subscriber::fmt()
        .with_max_level(tracing::Level::TRACE)
        .with_writer(move || writer.clone())
        .init();

    let app = router(AppState::new(ServiceConfig {
        encrypt: quick_config(),
        ..ServiceConfig::default()
    }));
    let container = sealed(b"logged?", 21).to_bytes();
    let boundary = "b0undary";
    let mut body = Vec::new();
    for (name, bytes) in [("container", &container[..]), ("sp", SP.as_bytes())] {
        body.extend_from_slice(
            format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    let response = app
        .clone()
        .oneshot(
            Request::post("/v1/decrypt/phase1")
                .header("content-type", format!("multipart/form-data; boundary={boundary}"))
                .body(Body::from(body))
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let session: Phase1Response = serde_json::from_slice(&bytes).unwrap();

    for sk in ["WRONG", SK] {
        let _ = app
            .clone()
            .oneshot(
                Request::post("/v1/decrypt/phase2")
                    .header("content-type", "application/json")
                    .body(Body::from(
                        serde_json::json!({ "session_id": session.session_id, "sk": sk }).to_string(),
                    ))
                    .unwrap(),
            )
            .await
            .unwrap();
    }

    let log = String::from_utf8_lossy(&capture.0.lock().unwrap()).into_owned();
    assert!(log.contains("decrypt session"), "log capture is live: {log}");
    for secret in [SP, SK, "WRONG", session.session_id.as_str()] {
        assert!(!log.contains(secret), "log leaked {secret:?}");
    }
}
