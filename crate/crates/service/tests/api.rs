use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use chartfuse::datasetio::{generate_synthetic, load_dataset, SyntheticSceneSpec};
use chartfuse_service::{router, AppState, FrameLabels, FrameMarkers, FrameSummary, AUDIT_LOG};

fn dataset(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        seed: 3,
        buoys_per_frame: (2, 3),
        ..Default::default()
    };
    generate_synthetic(&spec, n, dir.path()).unwrap();
    dir
}

fn app(root: &Path) -> axum::Router {
    router(Arc::new(AppState::load(root).unwrap()), None)
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

fn edit(index: usize, marker: Option<&str>, version: u64) -> Value {
    json!({
        "label_index": index,
        "marker_id": marker,
        "editor": "tester",
        "timestamp": 1.5,
        "version": version,
    })
}

#[tokio::test]
async fn lists_frames() {
    let dir = dataset(3);
    let app = app(dir.path());
    let (status, body) = get(&app, "/api/v1/frames").await;
    assert_eq!(status, StatusCode::OK);
    let frames: Vec<FrameSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!(frames[0].frame_id, "f00000");
}

#[tokio::test]
async fn serves_png_images() {
    let dir = dataset(1);
    let (status, body) = get(&app(dir.path()), "/api/v1/frames/f00000/image").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&body[1..4], b"PNG");
}

#[tokio::test]
async fn unknown_frame_is_404() {
    let dir = dataset(1);
    let app = app(dir.path());
    assert_eq!(get(&app, "/api/v1/frames/nope/labels").await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        post(&app, "/api/v1/frames/nope/associations", edit(0, None, 0)).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn markers_follow_selection_params() {
    let dir = dataset(1);
    let app = app(dir.path());
    let (status, body) = get(&app, "/api/v1/frames/f00000/markers").await;
    assert_eq!(status, StatusCode::OK);
    let all: FrameMarkers = serde_json::from_slice(&body).unwrap();
    assert!(!all.markers.is_empty());
    let (_, body) = get(&app, "/api/v1/frames/f00000/markers?fov=40&dmax=1000&dmin=1").await;
    let wide: FrameMarkers = serde_json::from_slice(&body).unwrap();
    let (_, body) = get(&app, "/api/v1/frames/f00000/markers?fov=40&dmax=2&dmin=1").await;
    let near: FrameMarkers = serde_json::from_slice(&body).unwrap();
    assert!(near.markers.is_empty());
    assert!(wide.markers.len() >= all.markers.len());
    assert_eq!(
        get(&app, "/api/v1/frames/f00000/markers?dmax=10&dmin=20").await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn edit_round_trip_and_durability() {
    let dir = dataset(2);
    let app = app(dir.path());
    let (_, body) = get(&app, "/api/v1/frames/f00000/labels").await;
    let before: FrameLabels = serde_json::from_slice(&body).unwrap();
    let marker = before.labels[0].marker_id.clone().unwrap();

    let (status, body) = post(&app, "/api/v1/frames/f00000/associations", edit(0, None, 0)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let (_, body) = get(&app, "/api/v1/frames/f00000/labels").await;
    let after: FrameLabels = serde_json::from_slice(&body).unwrap();
    assert_eq!(after.version, 1);
    assert_eq!(after.labels[0].marker_id, None);

    let (status, _) = post(&app, "/api/v1/frames/f00000/associations", edit(0, Some(&marker), 1)).await;
    assert_eq!(status, StatusCode::OK);

    // a restart sees the same state
    let ds = load_dataset(dir.path()).unwrap();
    let r = ds.record("f00000").unwrap();
    assert_eq!(r.version, 2);
    assert_eq!(r.labels[0].marker_id.as_deref(), Some(marker.as_str()));
    let (_, body) = get(&self::app(dir.path()), "/api/v1/frames/f00000/labels").await;
    let reloaded: FrameLabels = serde_json::from_slice(&body).unwrap();
    assert_eq!(reloaded.version, 2);

    let audit = std::fs::read_to_string(dir.path().join(AUDIT_LOG)).unwrap();
    let lines: Vec<Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["previous"], json!(marker));
    assert_eq!(lines[1]["marker_id"], json!(marker));
}

#[tokio::test]
async fn invalid_edits_are_rejected() {
    let dir = dataset(1);
    let app = app(dir.path());
    let uri = "/api/v1/frames/f00000/associations";
    assert_eq!(post(&app, uri, edit(99, None, 0)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, uri, edit(0, Some("missing"), 0)).await.0, StatusCode::BAD_REQUEST);
    let (_, body) = get(&app, "/api/v1/frames/f00000/labels").await;
    let labels: FrameLabels = serde_json::from_slice(&body).unwrap();
    let other = labels.labels[1].marker_id.clone().unwrap();
    assert_eq!(post(&app, uri, edit(0, Some(&other), 0)).await.0, StatusCode::BAD_REQUEST);
    let mut wrong_frame = edit(0, None, 0);
    wrong_frame["frame_id"] = json!("f00001");
    assert_eq!(post(&app, uri, wrong_frame).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, uri, json!({"label_index": 0})).await.0, StatusCode::BAD_REQUEST);
    // nothing was written
    assert!(!dir.path().join(AUDIT_LOG).exists());
}

#[tokio::test]
async fn stale_version_is_409() {
    let dir = dataset(1);
    let app = app(dir.path());
    let uri = "/api/v1/frames/f00000/associations";
    assert_eq!(post(&app, uri, edit(0, None, 0)).await.0, StatusCode::OK);
    assert_eq!(post(&app, uri, edit(1, None, 0)).await.0, StatusCode::CONFLICT);
    assert_eq!(post(&app, uri, edit(1, None, 1)).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_edits_to_different_frames() {
    let dir = dataset(4);
    let app = app(dir.path());
    let mut tasks = Vec::new();
    for f in 0..4 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let uri = format!("/api/v1/frames/f{f:05}/associations");
            for v in 0..5 {
                let (s, _) = post(&app, &uri, edit(0, None, v)).await;
                assert_eq!(s, StatusCode::OK);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.records.iter().all(|r| r.version == 5 && r.labels[0].marker_id.is_none()));
    let audit = std::fs::read_to_string(dir.path().join(AUDIT_LOG)).unwrap();
    assert_eq!(audit.lines().count(), 20);
    assert!(audit.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[tokio::test]
async fn real_socket_round_trip() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let dir = dataset(3);
    let state = Arc::new(AppState::load(dir.path()).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(chartfuse_service::serve_on(listener, state, None));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /api/v1/frames HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body = &resp[resp.find("\r\n\r\n").unwrap() + 4..];
    let frames: Vec<FrameSummary> = serde_json::from_str(body).unwrap();
    assert_eq!(frames.len(), 3);
    server.abort();
}
