use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use usqm_core::image::{GrayImage, Psnr};
use usqm_core::store::{read_jsonl, write_json, DegradationRecord};
use usqm_core::study::{pairgen, PairClass, PairRecord, PairgenConfig, ResponseRecord};
use usqm_study_server::{router, NextPair, StudyState};

const KINDS: [&str; 2] = ["speckle", "elastic"];

fn fixture(dir: &Path) -> Vec<PairRecord> {
    let mut records = Vec::new();
    for s in 0..4 {
        for (k, kind) in KINDS.iter().enumerate() {
            for (l, db) in [20.0, 25.0].iter().enumerate() {
                let name = format!("img/src{s}_{kind}_theta0.{k}{l}_psnr{db}.png");
                let img = GrayImage::from_fn(8, 8, |r, c| ((r + c + s + k + l) % 7) as f64 / 7.0).unwrap();
                img.save_png(dir.join(&name)).unwrap();
                records.push(DegradationRecord {
                    source: format!("src{s}.png"),
                    kind: kind.to_string(),
                    theta: 0.1 * (k + 1) as f64,
                    seed: 3,
                    achieved_psnr: Psnr::Finite(db + 0.02 * k as f64),
                    output_path: name,
                });
            }
        }
    }
    let cfg = PairgenConfig {
        n_pairs: 6,
        sanity_fraction: 0.25,
        seed: 11,
        ..Default::default()
    };
    let (pairs, _) = pairgen(&records, &cfg).unwrap();
    write_json(&pairs, dir.join("pairs.json")).unwrap();
    pairs
}

fn app(dir: &Path) -> Router {
    let state = StudyState::open(&dir.join("pairs.json"), &dir.join("responses.jsonl"), 99).unwrap();
    router(Arc::new(state), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn next(app: &Router, reader: &str) -> (NextPair, String) {
    let (status, body) = call(
        app,
        Request::get(format!("/api/next?reader={reader}")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    (serde_json::from_str(&text).unwrap(), text)
}

async fn post_choice(app: &Router, body: Value) -> StatusCode {
    call(
        app,
        Request::post("/api/choice")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
    .0
}

fn assert_blind(text: &str, pairs: &[PairRecord]) {
    let lower = text.to_lowercase();
    for word in KINDS.iter().copied().chain(["theta", "psnr", "kind", "src", ".png"]) {
        assert!(!lower.contains(word), "payload leaks `{word}`: {text}");
    }
    for p in pairs {
        for img in [&p.a, &p.b] {
            assert!(!text.contains(&img.path));
            assert!(!text.contains(&format!("{:?}", img.theta)));
            assert!(!text.contains(&format!("{:?}", img.achieved_psnr)));
        }
    }
}

#[tokio::test]
async fn full_session_with_restart() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path());
    let total = pairs.len();
    let app = app(dir.path());

    let mut answered = Vec::new();
    for i in 0..total {
        let (np, text) = next(&app, "dr1").await;
        assert!(!np.done);
        assert_eq!(np.progress.answered, i);
        assert_eq!(np.progress.total, total);
        assert_blind(&text, &pairs);
        let left = np.left.unwrap();
        for slot in [&left, np.right.as_ref().unwrap()] {
            let (status, bytes) = call(&app, Request::get(format!("/img/{}", slot.token)).body(Body::empty()).unwrap()).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(&bytes[1..4], b"PNG");
        }
        let id = np.pair_id.unwrap();
        let body = json!({"pair_id": id, "reader": "dr1", "choice": left.choice});
        assert_eq!(post_choice(&app, body.clone()).await, StatusCode::OK);
        // double submission is rejected and not logged
        assert_eq!(post_choice(&app, body).await, StatusCode::CONFLICT);
        answered.push(id);

        if i == total / 2 {
            // restart: a fresh service over the same files resumes
            let restarted = self::app(dir.path());
            let (np2, _) = next(&restarted, "dr1").await;
            assert_eq!(np2.progress.answered, i + 1);
            let replay_body = json!({"pair_id": answered[0], "reader": "dr1", "choice": "A"});
            assert_eq!(post_choice(&restarted, replay_body).await, StatusCode::CONFLICT);
        }
    }
    let (np, _) = next(&app, "dr1").await;
    assert!(np.done);
    assert_eq!(np.progress.answered, total);

    let log: Vec<ResponseRecord> = read_jsonl(dir.path().join("responses.jsonl")).unwrap();
    assert_eq!(log.len(), total);
    let ids: std::collections::HashSet<_> = log.iter().map(|r| r.pair_id.clone()).collect();
    assert_eq!(ids.len(), total);

    // another reader starts from the beginning
    let (np, _) = next(&app, "dr2").await;
    assert_eq!(np.progress.answered, 0);
}

#[tokio::test]
async fn presentation_follows_swap_flag() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path());
    let app = app(dir.path());
    let (np, _) = next(&app, "r").await;
    let first = &pairs[0];
    assert_eq!(np.pair_id.as_deref(), Some(first.pair_id.as_str()));
    let expected_left = if first.swap { "B" } else { "A" };
    assert_eq!(serde_json::to_value(np.left.unwrap().choice).unwrap(), json!(expected_left));
    assert!(pairs.iter().any(|p| p.class == PairClass::Duplicate));
}

#[tokio::test]
async fn malformed_requests() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path());
    let app = app(dir.path());
    let id = pairs[0].pair_id.clone();
    assert_eq!(post_choice(&app, json!({"pair_id": id, "reader": "r", "choice": "C"})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post_choice(&app, json!({"pair_id": id, "choice": "A"})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post_choice(&app, json!({"pair_id": "nope", "reader": "r", "choice": "A"})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post_choice(&app, json!({"pair_id": id, "reader": " ", "choice": "A"})).await, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        Request::post("/api/choice").body(Body::from("not json")).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Request::get("/api/next").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Request::get("/img/deadbeef").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(!dir.path().join("responses.jsonl").exists() || std::fs::read(dir.path().join("responses.jsonl")).unwrap().is_empty());
}

#[tokio::test]
async fn torn_log_line_is_dropped_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path());
    let log = dir.path().join("responses.jsonl");
    let good = format!(
        "{}\n",
        json!({"pair_id": pairs[0].pair_id, "reader": "r", "choice": "A", "unix_ms": 5})
    );
    std::fs::write(&log, format!("{good}{{\"pair_id\": \"{}\", \"rea", pairs[1].pair_id)).unwrap();
    let app = app(dir.path());
    let (np, _) = next(&app, "r").await;
    assert_eq!(np.progress.answered, 1);
    assert_eq!(np.pair_id.as_deref(), Some(pairs[1].pair_id.as_str()));
    let body = json!({"pair_id": pairs[1].pair_id, "reader": "r", "choice": "B"});
    assert_eq!(post_choice(&app, body).await, StatusCode::OK);
    let rows: Vec<ResponseRecord> = read_jsonl(&log).unwrap();
    assert_eq!(rows.len(), 2);
}

#[tokio::test]
async fn static_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let assets = dir.path().join("ui");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>study</html>").unwrap();
    let state = StudyState::open(&dir.path().join("pairs.json"), &dir.path().join("responses.jsonl"), 1).unwrap();
    let app = router(Arc::new(state), Some(&assets));
    let (status, body) = call(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>study</html>");
    let (status, _) = call(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn missing_image_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = fixture(dir.path());
    std::fs::remove_file(dir.path().join(&pairs[0].a.path)).unwrap();
    let err = StudyState::open(&dir.path().join("pairs.json"), &dir.path().join("r.jsonl"), 1).err().unwrap();
    assert!(err.to_string().contains(&pairs[0].a.path), "{err}");
}
