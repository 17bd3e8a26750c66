use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use mid_core::mitigation::{DisputeOracle, ExternalVqaClient, Verdict, VqaClientConfig};
use mid_core::synthgen::{LabeledSample, LatentPoint, Shape};
use serde_json::{json, Value};

/// Answers "yes" when asked about squares; the first `fail_first` calls get a 500.
async fn answer(State((calls, fail_first)): State<(Arc<AtomicUsize>, usize)>, Json(req): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = calls.fetch_add(1, Ordering::SeqCst);
    if n < fail_first {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({})));
    }
    let png = base64::engine::general_purpose::STANDARD.decode(req["image"].as_str().unwrap()).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let q = req["question"].as_str().unwrap();
    (StatusCode::OK, Json(json!({ "answer": if q.contains("square") { "Yes" } else { "no" } })))
}

fn mock(fail_first: usize) -> (String, Arc<AtomicUsize>, tokio::runtime::Runtime) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new().route("/vqa", post(answer)).with_state((calls.clone(), fail_first));
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/vqa"), calls, rt)
}

fn sample(shape: Shape) -> LabeledSample {
    LabeledSample::new(1, LatentPoint::new(shape, 2, 0, 16, 16).unwrap())
}

#[test]
fn answers_map_to_verdicts() {
    let (url, calls, _rt) = mock(0);
    let client = ExternalVqaClient::new(VqaClientConfig::new(url));
    assert_eq!(client.judge(&sample(Shape::Square)).unwrap(), Verdict::Agree);
    assert_eq!(client.judge(&sample(Shape::Heart)).unwrap(), Verdict::Dispute);
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn transient_errors_are_retried() {
    let (url, calls, _rt) = mock(2);
    let client = ExternalVqaClient::new(VqaClientConfig { retries: 2, ..VqaClientConfig::new(url) });
    assert_eq!(client.judge(&sample(Shape::Square)).unwrap(), Verdict::Agree);
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_name_the_sample() {
    let (url, calls, _rt) = mock(usize::MAX);
    let client = ExternalVqaClient::new(VqaClientConfig { retries: 1, ..VqaClientConfig::new(url) });
    let err = client.judge(&sample(Shape::Oval)).unwrap_err().to_string();
    assert!(err.contains('1'), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_endpoint_fails() {
    let client = ExternalVqaClient::new(VqaClientConfig { retries: 0, timeout_ms: 500, ..VqaClientConfig::new("http://127.0.0.1:9/vqa") });
    assert!(client.judge(&sample(Shape::Square)).is_err());
}
