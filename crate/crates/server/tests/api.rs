use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use gymsmith_core::diff_engine::{default_mask, VolatileMask};
use gymsmith_core::session_store::{
    InjectionAction, ManualClock, SessionId, SessionStore, StoreConfig, Timestamp, DEFAULT_TTL,
};
use gymsmith_core::state_document::StateValue;
use gymsmith_server::{router, AppState};
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::with_system_clock(StoreConfig::default(), default_mask()))
}

async fn send(
    app: &Router,
    method: Method,
    uri: &str,
    body: Body,
    content_type: Option<&str>,
) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut builder = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        builder = builder.header(header::CONTENT_TYPE, ct);
    }
    let response = app.clone().oneshot(builder.body(body).unwrap()).await.unwrap();
    let status = response.status();
    let media = response.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_owned());
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, media)
}

async fn post(app: &Router, sid: &str, body: Value) -> (StatusCode, Value) {
    let uri = format!("/post?sid={sid}");
    let (status, bytes, _) =
        send(app, Method::POST, &uri, Body::from(body.to_string()), Some("application/json")).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, bytes, _) = send(app, Method::GET, uri, Body::empty(), None).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn workspace() -> Value {
    json!({
        "channels": [{"name": "general", "lastViewedAt": 1}, {"name": "random", "lastViewedAt": 2}],
        "messages": {"general": [{"content": "hi"}]}
    })
}

#[tokio::test]
async fn channel_rename_shows_up_in_the_diff() {
    let app = app();
    let (status, body) = post(&app, "s1", json!({"action": "set", "state": workspace()})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["success"], true);
    assert_eq!(body["sid"], "s1");
    assert_eq!(body["state_id"].as_str().unwrap().len(), 64);

    let mut renamed = workspace();
    renamed["channels"][0]["name"] = json!("engineering");
    let (status, _) = post(&app, "s1", json!({"action": "set_current", "state": renamed})).await;
    assert_eq!(status, StatusCode::OK);

    let (status, go) = get(&app, "/go?sid=s1").await;
    assert_eq!(status, StatusCode::OK);
    let diff = &go["state_diff"];
    assert_eq!(diff["channels[0].name"], json!({"old": "general", "new": "engineering"}));
    assert!(diff.get("channels").is_some());
    assert_eq!(go["initial_state"], workspace());
}

#[tokio::test]
async fn volatile_fields_stay_out_of_the_diff() {
    let mask = VolatileMask::parse(["*.lastViewedAt", "channels[*].lastViewedAt"]).unwrap();
    let app = router(AppState::with_system_clock(StoreConfig::default(), mask));
    let mut state = workspace();
    state["ui"] = json!({"lastViewedAt": 5});
    post(&app, "v", json!({"action": "set", "state": state.clone()})).await;
    state["ui"]["lastViewedAt"] = json!(6);
    state["channels"][1]["lastViewedAt"] = json!(99);
    post(&app, "v", json!({"action": "set_current", "state": state})).await;
    let (_, go) = get(&app, "/go?sid=v").await;
    assert_eq!(go["state_diff"], json!({}));
    // Masking applies to the diff only, never to the snapshots.
    assert_eq!(go["current_state"]["channels"][1]["lastViewedAt"], 99);
}

#[tokio::test]
async fn fresh_session_reads() {
    let app = app();
    let (status, go) = get(&app, "/go?sid=fresh").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(go, json!({"initial_state": null, "current_state": {}, "state_diff": {}}));
    let (_, state) = get(&app, "/state?sid=fresh").await;
    assert_eq!(state, json!({"stored_state": {}, "has_custom_state": false, "sid": "fresh"}));
}

#[tokio::test]
async fn merge_without_set_diffs_against_the_seed() {
    let seed = StateValue::from_json_str(r#"{"inbox": [], "user": {"name": "ada"}}"#).unwrap();
    let state = AppState::with_system_clock(StoreConfig { seed, ..StoreConfig::default() }, VolatileMask::empty());
    let app = router(state);
    let (status, _) =
        post(&app, "m", json!({"action": "set_current", "merge": true, "state": {"user": {"role": "admin"}}})).await;
    assert_eq!(status, StatusCode::OK);
    let (_, go) = get(&app, "/go?sid=m").await;
    assert_eq!(go["initial_state"], Value::Null);
    assert_eq!(go["current_state"], json!({"inbox": [], "user": {"name": "ada", "role": "admin"}}));
    assert_eq!(go["state_diff"], json!({"user.role": {"old": null, "new": "admin", "absent": "old"}}));
}

#[tokio::test]
async fn state_lifecycle() {
    let app = app();
    let (_, before) = get(&app, "/state?sid=life").await;
    assert_eq!(before["has_custom_state"], false);
    post(&app, "life", json!({"action": "merge", "state": {"a": 1}})).await;
    let (_, during) = get(&app, "/state?sid=life").await;
    assert_eq!(during["has_custom_state"], true);
    assert_eq!(during["stored_state"], json!({"a": 1}));
    let (status, _) = post(&app, "life", json!({"action": "reset"})).await;
    assert_eq!(status, StatusCode::OK);
    let (_, after) = get(&app, "/state?sid=life").await;
    assert_eq!(after["has_custom_state"], false);
    assert_eq!(after["stored_state"], json!({}));
}

#[tokio::test]
async fn reads_are_pure() {
    let app = app();
    post(&app, "p", json!({"action": "set", "state": workspace()})).await;
    post(&app, "p", json!({"action": "merge", "state": {"messages": {"general": []}}})).await;
    let (_, first, _) = send(&app, Method::GET, "/go?sid=p", Body::empty(), None).await;
    get(&app, "/state?sid=p").await;
    let (_, second, _) = send(&app, Method::GET, "/go?sid=p", Body::empty(), None).await;
    assert_eq!(first, second);
}

#[tokio::test]
async fn bad_requests() {
    let app = app();
    let (status, body, _) = send(&app, Method::POST, "/post", Body::from(r#"{"action":"reset"}"#), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["success"], false);
    assert!(body["error"].as_str().unwrap().contains("sid"));

    for (sid, payload) in [
        ("s1", json!({"action": "reset", "state": {}})),
        ("s1", json!({"action": "set"})),
        ("s1", json!({"action": "drop", "state": {}})),
        ("s1", json!({"action": "set", "state": {}, "merge": true})),
        ("s1", json!({"state": {}})),
        ("bad%20sid", json!({"action": "reset"})),
    ] {
        let (status, body) = post(&app, sid, payload.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{payload}");
        assert_eq!(body["success"], false);
        assert!(body["error"].is_string());
    }
    let (status, bytes, _) = send(&app, Method::POST, "/post?sid=s1", Body::from("{not json"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&bytes).unwrap()["success"], false);

    for uri in ["/go", "/state", "/go?sid=", "/state?sid=a/b"] {
        let (status, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert!(body["error"].is_string());
    }
    // Rejected writes leave no trace.
    let (_, state) = get(&app, "/state?sid=s1").await;
    assert_eq!(state["has_custom_state"], false);
}

#[tokio::test]
async fn reset_without_state_but_null_payload_is_accepted() {
    let app = app();
    let (status, _) = post(&app, "n", json!({"action": "reset", "state": null})).await;
    assert_eq!(status, StatusCode::OK);
}

const BOUNDARY: &str = "gymsmith-test-boundary";

/// Field name, file name, media type, content.
type Part<'a> = (&'a str, Option<&'a str>, Option<&'a str>, &'a [u8]);

fn multipart(parts: &[Part]) -> Body {
    let mut body = Vec::new();
    for (field, file, media, content) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match file {
            Some(file) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{field}\"; filename=\"{file}\"\r\n").as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{field}\"\r\n").as_bytes()),
        }
        if let Some(media) = media {
            body.extend_from_slice(format!("Content-Type: {media}\r\n").as_bytes());
        }
        body.extend_from_slice(b"\r\n");
        body.extend_from_slice(content);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

async fn upload(app: &Router, sid: &str, body: Body) -> (StatusCode, Value) {
    let ct = format!("multipart/form-data; boundary={BOUNDARY}");
    let (status, bytes, _) = send(app, Method::POST, &format!("/upload?sid={sid}"), body, Some(&ct)).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn upload_round_trip_and_isolation() {
    let app = app();
    let (status, body) = upload(&app, "s1", multipart(&[("file", Some("a.txt"), Some("text/plain"), b"hello")])).await;
    assert_eq!(status, StatusCode::OK);
    let files = body["files"].as_array().unwrap();
    assert_eq!(files.len(), 1);
    assert_eq!(files[0]["name"], "a.txt");
    assert_eq!(files[0]["size"], 5);
    let url = files[0]["url"].as_str().unwrap();
    assert!(url.contains("sid=s1"));

    let (status, bytes, media) = send(&app, Method::GET, url, Body::empty(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"hello");
    assert_eq!(media.as_deref(), Some("text/plain"));

    let other = url.replace("sid=s1", "sid=s2");
    let (status, _, _) = send(&app, Method::GET, &other, Body::empty(), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    post(&app, "s1", json!({"action": "reset"})).await;
    let (status, _, _) = send(&app, Method::GET, url, Body::empty(), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn upload_media_types_and_names() {
    let app = app();
    let (status, body) = upload(
        &app,
        "m",
        multipart(&[
            ("note", None, None, b"ignored form field"),
            ("f", Some("report final.pdf"), None, b"%PDF-1.4"),
            ("g", Some("pixel.png"), Some("application/octet-stream"), &[0x89, b'P', b'N', b'G']),
        ]),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let files = body["files"].as_array().unwrap();
    assert_eq!(files.len(), 2);
    let url = files[0]["url"].as_str().unwrap();
    assert!(url.starts_with("/files/report%20final.pdf?"), "{url}");
    let (_, bytes, media) = send(&app, Method::GET, url, Body::empty(), None).await;
    assert_eq!(bytes, b"%PDF-1.4");
    assert_eq!(media.as_deref(), Some("application/pdf"));
    let (_, _, media) = send(&app, Method::GET, files[1]["url"].as_str().unwrap(), Body::empty(), None).await;
    assert_eq!(media.as_deref(), Some("image/png"));

    let (status, body) = upload(&app, "m", multipart(&[("f", Some(".."), None, b"x")])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["success"], false);
}

#[tokio::test]
async fn upload_without_files_is_rejected() {
    let app = app();
    let (status, body) = upload(&app, "e", multipart(&[("note", None, None, b"text only")])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("no file"));
    let (status, _, _) = send(&app, Method::POST, "/upload?sid=e", Body::from("plain"), Some("text/plain")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn upload_quota_is_enforced() {
    let state = AppState::with_system_clock(StoreConfig { upload_quota: 10, ..StoreConfig::default() }, default_mask());
    let app = router(state);
    let (status, _) = upload(&app, "q", multipart(&[("f", Some("a.bin"), None, b"123456")])).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = upload(&app, "q", multipart(&[("f", Some("b.bin"), None, b"123456")])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(body["error"].as_str().unwrap().contains("quota"));
    // Replacing a file only counts the new size.
    let (status, _) = upload(&app, "q", multipart(&[("f", Some("a.bin"), None, b"1234567890")])).await;
    assert_eq!(status, StatusCode::OK);
    // A body far beyond the quota is refused by the transport limit as well.
    let big = vec![b'x'; 2 * 1024 * 1024];
    let (status, _) = upload(&app, "q", multipart(&[("f", Some("c.bin"), None, &big)])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn ttl_boundary_on_a_synthetic_clock() {
    let clock = Arc::new(ManualClock::at(0));
    let state = AppState::new(StoreConfig::default(), default_mask(), clock.clone());
    let app = router(state.clone());
    for (sid, at) in [("idle3601", 0), ("idle3600", 1), ("idle3599", 2)] {
        clock.set(Timestamp::from_secs(at));
        post(&app, sid, json!({"action": "set", "state": {"k": at}})).await;
    }
    clock.set(Timestamp::from_secs(2));
    get(&app, "/go?sid=refreshed").await;
    clock.set(Timestamp::from_secs(3000));
    // A read counts as access.
    get(&app, "/state?sid=refreshed").await;

    clock.set(Timestamp::from_secs(3601));
    assert_eq!(state.collect_garbage(), 1);
    let store = state.store();
    assert!(!store.contains(&SessionId::new("idle3601").unwrap()));
    for sid in ["idle3600", "idle3599", "refreshed"] {
        assert!(store.contains(&SessionId::new(sid).unwrap()), "{sid}");
    }
    assert_eq!(DEFAULT_TTL, Duration::from_secs(3600));

    // The collected session starts over from the seed.
    let (_, fresh) = get(&app, "/state?sid=idle3601").await;
    assert_eq!(fresh["has_custom_state"], false);
}

#[derive(Debug, Clone)]
enum Op {
    Post(InjectionAction, Option<Value>),
}

fn random_state(rng: &mut StdRng) -> Value {
    let mut map = serde_json::Map::new();
    for _ in 0..rng.gen_range(0..4) {
        let key = ["a", "b", "c", "d"][rng.gen_range(0..4)];
        let value = match rng.gen_range(0..4) {
            0 => json!(rng.gen_range(0..100)),
            1 => json!(format!("v{}", rng.gen_range(0..10))),
            2 => json!([rng.gen_range(0..3), rng.gen_range(0..3)]),
            _ => json!({"x": rng.gen_range(0..3), "y": {"z": rng.gen::<bool>()}}),
        };
        map.insert(key.into(), value);
    }
    Value::Object(map)
}

fn random_ops(rng: &mut StdRng) -> Vec<Op> {
    (0..rng.gen_range(1..16))
        .map(|_| match rng.gen_range(0..10) {
            0 => Op::Post(InjectionAction::Reset, None),
            1..=3 => Op::Post(InjectionAction::Set, Some(random_state(rng))),
            4..=6 => Op::Post(InjectionAction::SetCurrent, Some(random_state(rng))),
            _ => Op::Post(InjectionAction::Merge, Some(random_state(rng))),
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_sessions_match_serial_replay() {
    for repetition in 0..10u64 {
        let app = app();
        let mut rng = StdRng::seed_from_u64(repetition);
        let plans: Vec<(String, Vec<Op>)> =
            (0..100).map(|i| (format!("sess-{repetition}-{i}"), random_ops(&mut rng))).collect();

        let mut tasks = Vec::new();
        for (sid, ops) in plans.clone() {
            let app = app.clone();
            let jitter = rng.gen::<u64>();
            tasks.push(tokio::spawn(async move {
                let mut local = StdRng::seed_from_u64(jitter);
                for Op::Post(action, state) in ops {
                    let mut body = json!({"action": action.as_str()});
                    if let Some(state) = state {
                        body["state"] = state;
                    }
                    let (status, _) = post(&app, &sid, body).await;
                    assert_eq!(status, StatusCode::OK);
                    if local.gen_bool(0.3) {
                        tokio::task::yield_now().await;
                    }
                }
            }));
        }
        for task in tasks {
            task.await.unwrap();
        }

        for (sid, ops) in &plans {
            let replay = SessionStore::default();
            let id = SessionId::new(sid.as_str()).unwrap();
            for Op::Post(action, state) in ops {
                let state = state.as_ref().map(|s| StateValue::try_from(s.clone()).unwrap());
                replay.apply_action(&id, *action, state, Timestamp::default()).unwrap();
            }
            let expected = replay.get_or_create(&id, Timestamp::default());
            let (_, go) = get(&app, &format!("/go?sid={sid}")).await;
            let current = StateValue::try_from(go["current_state"].clone()).unwrap();
            assert_eq!(current.digest(), expected.current_snapshot.digest(), "{sid}");
            let initial = match &go["initial_state"] {
                Value::Null => None,
                v => Some(StateValue::try_from(v.clone()).unwrap().digest()),
            };
            assert_eq!(initial, expected.initial_snapshot.as_ref().map(StateValue::digest), "{sid}");
        }
    }
}
