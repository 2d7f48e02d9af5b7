use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use updown_core::estimators::{estimate, EstimateOptions};
use updown_core::{ChainData, Engine, EstimatorKind, Policy, Response, TreatmentGrid};
use updown_service::{router, FixedClock, SequentialIds, Store};

fn store() -> Arc<Store> {
    Arc::new(Store::in_memory(clock(), Arc::new(SequentialIds::default())))
}

fn clock() -> Arc<FixedClock> {
    Arc::new(FixedClock::new(Utc.with_ymd_and_hms(2024, 5, 1, 8, 0, 0).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON reply: {}", String::from_utf8_lossy(&bytes)))
    };
    (status, v)
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn ud(rule: Value, levels: &[f64], start: usize) -> Value {
    json!({
        "levels": levels,
        "policy": {"policy": "up_down", "rule": {"variant": rule}},
        "start_level": start,
    })
}

fn six() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
}

async fn create(app: &Router, config: Value) -> Value {
    let (s, v) = call(app, "POST", "/trials", Some(config)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v
}

async fn respond(app: &Router, id: &str, r: &str) -> Value {
    let (s, v) = call(app, "POST", &format!("/trials/{id}/responses"), Some(json!({"response": r}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn create_recommends_start_and_ids_differ() {
    let app = router(store());
    let cfg = ud(json!({"type": "kr", "k": 4}), &six(), 3);
    let a = create(&app, cfg.clone()).await;
    let b = create(&app, cfg).await;
    assert_eq!(a["recommendation"]["level"], 3);
    assert_eq!(a["recommendation"]["value"], 4.0);
    assert_eq!(a["status"], "active");
    assert_ne!(a["id"], b["id"]);
    let (_, list) = call(&app, "GET", "/trials", None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn bcd_without_seed_gets_one() {
    let dir = tempfile::tempdir().unwrap();
    let st = Arc::new(Store::open(dir.path(), clock(), Arc::new(SequentialIds::default())).unwrap());
    let app = router(st);
    let v = create(&app, ud(json!({"type": "bcd", "gamma": 0.25}), &six(), 0)).await;
    let seed = v["config"]["seed"].as_u64().expect("seed assigned");
    let id = v["id"].as_str().unwrap();
    let log = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert!(log.contains(&format!("\"seed\":{seed}")));
}

#[tokio::test]
async fn sud_yes_moves_down() {
    let app = router(store());
    let v = create(&app, ud(json!({"type": "sud"}), &six(), 3)).await;
    let r = respond(&app, v["id"].as_str().unwrap(), "yes").await;
    assert_eq!(r["recommendation"]["level"], 2);
    assert_eq!(r["trial"], 1);
}

#[tokio::test]
async fn fixed_n_completes_and_rejects_more() {
    let app = router(store());
    let mut cfg = ud(json!({"type": "sud"}), &six(), 2);
    cfg["n_max"] = json!(3);
    let id = create(&app, cfg).await["id"].as_str().unwrap().to_string();
    respond(&app, &id, "no").await;
    respond(&app, &id, "no").await;
    let last = respond(&app, &id, "no").await;
    assert_eq!(last["status"], "completed");
    assert_eq!(last["recommendation"]["level"], 5);
    let (s, e) = call(&app, "POST", &format!("/trials/{id}/responses"), Some(json!({"response": "yes"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "trial_completed");
    let (s, _) = call(&app, "GET", &format!("/trials/{id}/what-if"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn what_if_is_pure_and_predicts_both_branches() {
    let app = router(store());
    let v = create(&app, ud(json!({"type": "kr", "k": 2}), &six(), 3)).await;
    let id = v["id"].as_str().unwrap().to_string();
    respond(&app, &id, "no").await;
    let (_, w1) = call(&app, "GET", &format!("/trials/{id}/what-if"), None).await;
    let (_, w2) = call(&app, "GET", &format!("/trials/{id}/what-if"), None).await;
    assert_eq!(w1, w2);
    let (_, export) = call(&app, "GET", &format!("/trials/{id}/export"), None).await;
    for branch in ["yes", "no"] {
        let other = router(store());
        let (s, _) = call(&other, "POST", "/trials/import", Some(export.clone())).await;
        assert_eq!(s, StatusCode::CREATED);
        let r = respond(&other, &id, branch).await;
        assert_eq!(r["recommendation"]["level"], w1[branch]["level"], "{branch}");
    }
}

#[tokio::test]
async fn bcd_branch_reports_up_probability() {
    let app = router(store());
    let v = create(&app, ud(json!({"type": "bcd", "gamma": 0.25}), &six(), 2)).await;
    let (_, w) = call(&app, "GET", &format!("/trials/{}/what-if", v["id"].as_str().unwrap()), None).await;
    assert_eq!(w["yes"]["level"], 1);
    assert!(w["no"]["level"].is_null());
    let p = w["no"]["move_probability"].as_f64().unwrap();
    assert!((p - 0.25 / 0.75).abs() < 1e-12);
    let outcomes = w["no"]["outcomes"].as_array().unwrap();
    assert_eq!(outcomes.len(), 2);
    assert_eq!(outcomes[0]["level"], 3);
    assert_eq!(outcomes[1]["level"], 2);
    assert!((outcomes[1]["probability"].as_f64().unwrap() - (1.0 - p)).abs() < 1e-12);
}

#[tokio::test]
async fn one_trial_is_insufficient() {
    let app = router(store());
    let id = create(&app, ud(json!({"type": "sud"}), &six(), 2)).await["id"].as_str().unwrap().to_string();
    respond(&app, &id, "yes").await;
    let (s, v) = call(&app, "GET", &format!("/trials/{id}/estimates"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "insufficient_data");
    assert!(v["estimates"].as_array().unwrap().is_empty());
}

/// A KR(3) sequence from the 80% level that reproduces the published
/// Titration data (60%: 0/12, 70%: 4/15, 80%: 2/5).
const TITRATION: &str = "NY NY NNN NNN NY NY NNN NY NNN NNY NNN NNN N";

#[tokio::test]
async fn titration_session_estimate() {
    let app = router(store());
    let cfg = ud(json!({"type": "kr", "k": 3}), &[50.0, 60.0, 70.0, 80.0, 90.0, 100.0], 3);
    let id = create(&app, cfg).await["id"].as_str().unwrap().to_string();
    for c in TITRATION.chars().filter(|c| !c.is_whitespace()) {
        respond(&app, &id, if c == 'Y' { "yes" } else { "no" }).await;
    }
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(view["n"], 32);
    let mut counts = std::collections::BTreeMap::new();
    for t in view["trials"].as_array().unwrap() {
        let e = counts.entry(t["level"].as_u64().unwrap()).or_insert((0, 0));
        if t["response"] == "yes" {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    assert_eq!(counts.into_iter().collect::<Vec<_>>(), vec![(1, (0, 12)), (2, (4, 11)), (3, (2, 3))]);
    let (s, v) = call(&app, "GET", &format!("/trials/{id}/estimates?target=0.2&estimators=cir&ci=poisson&conf=0.95"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r = &v["estimates"][0]["result"];
    assert!((r["point"].as_f64().unwrap() - 67.5).abs() < 0.1, "{r}");
    let b = r["bounds"].as_array().unwrap();
    assert!((b[0].as_f64().unwrap() - 55.9).abs() < 1.0, "{r}");
    assert!((b[1].as_f64().unwrap() - 79.1).abs() < 1.0, "{r}");
}

#[tokio::test]
async fn estimates_match_library_on_exported_history() {
    let app = router(store());
    let id = create(&app, ud(json!({"type": "kr", "k": 2}), &six(), 4)).await["id"].as_str().unwrap().to_string();
    for r in "NNYNNNYNYNNYNNNYNYNN".chars() {
        respond(&app, &id, if r == 'Y' { "yes" } else { "no" }).await;
    }
    let (_, v) = call(&app, "GET", &format!("/trials/{id}/estimates?estimators=cir,ad,w&conf=0.9"), None).await;
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    let trials = view["trials"].as_array().unwrap();
    let chain = ChainData::new(
        trials.iter().map(|t| t["value"].as_f64().unwrap()).collect(),
        trials.iter().map(|t| Response::parse(t["response"].as_str().unwrap()).unwrap()).collect(),
    )
    .unwrap();
    let target = view["target"].as_f64().unwrap();
    let mut opts = EstimateOptions::new(target);
    opts.percentiles = vec![(1.0 - 0.9) / 2.0, (1.0 + 0.9) / 2.0];
    opts.x_bounds = Some((1.0, 6.0));
    let rule = updown_core::DesignRule::kr(2).unwrap();
    for (i, name) in ["cir", "ad", "w"].iter().enumerate() {
        let kind = EstimatorKind::parse(name, Some(rule)).unwrap();
        let offline = estimate(&kind, &chain, &opts).unwrap();
        assert_eq!(v["estimates"][i]["result"]["point"].as_f64().unwrap(), offline.point, "{name}");
        assert_eq!(v["estimates"][i]["result"]["bounds"][0].as_f64().unwrap(), offline.bounds[0], "{name}");
    }
}

#[tokio::test]
async fn export_import_round_trip() {
    let app = router(store());
    let mut cfg = ud(json!({"type": "bcd", "gamma": 0.3}), &six(), 1);
    cfg["seed"] = json!(99);
    let id = create(&app, cfg).await["id"].as_str().unwrap().to_string();
    for r in ["no", "no", "yes", "no"] {
        respond(&app, &id, r).await;
    }
    let (_, first) = call_raw(&app, "GET", &format!("/trials/{id}/export"), None).await;
    let other = router(store());
    let doc: Value = serde_json::from_slice(&first).unwrap();
    let (s, _) = call(&other, "POST", "/trials/import", Some(doc.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, second) = call_raw(&other, "GET", &format!("/trials/{id}/export"), None).await;
    assert_eq!(first, second);
    let (s, e) = call(&other, "POST", "/trials/import", Some(doc)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "already_exists");
    for r in ["no", "no", "no", "yes", "no"] {
        let a = respond(&app, &id, r).await;
        let b = respond(&other, &id, r).await;
        assert_eq!(a["recommendation"], b["recommendation"]);
    }
}

#[tokio::test]
async fn service_matches_library_engine() {
    let app = router(store());
    let mut cfg = ud(json!({"type": "bcd", "gamma": 0.2}), &six(), 0);
    cfg["seed"] = json!(7);
    let id = create(&app, cfg).await["id"].as_str().unwrap().to_string();
    let policy = Policy::UpDown {
        rule: updown_core::DesignRule::bcd(0.2).unwrap(),
    };
    let grid = TreatmentGrid::new(six(), updown_core::BoundaryPolicy::Reflecting).unwrap();
    let mut engine = Engine::new(policy, grid, 0, 7).unwrap();
    for (i, r) in "NNNNYNNNNNYNNYNNNN".chars().enumerate() {
        let resp = if r == 'Y' { Response::Yes } else { Response::No };
        let lib = engine.record(resp).unwrap();
        let svc = respond(&app, &id, resp.as_str()).await;
        assert_eq!(svc["recommendation"]["level"], lib.level, "trial {}", i + 1);
    }
}

#[tokio::test]
async fn crm_session_reports_posterior() {
    let app = router(store());
    let levels = six();
    let model = updown_core::bayes::CrmModel::power_default(levels.clone(), 0.3).unwrap();
    let cfg = json!({
        "levels": levels,
        "policy": {"policy": "crm", "model": model, "rule": {"rule": "closest_response"}, "target": 0.3},
        "start_level": 0,
    });
    let id = create(&app, cfg).await["id"].as_str().unwrap().to_string();
    let r = respond(&app, &id, "no").await;
    let q = r["diagnostics"]["posterior"]["qp_quantiles"].as_array().unwrap();
    assert_eq!(q.len(), 3);
    assert!(q[0].as_f64().unwrap() <= q[2].as_f64().unwrap());
}

#[tokio::test]
async fn error_bodies() {
    let app = router(store());
    let (s, e) = call(&app, "GET", "/trials/nope", None).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (s, e) = call(&app, "POST", "/trials", Some(ud(json!({"type": "kr", "k": 2}), &six(), 9))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "invalid_config");
    assert_eq!(e["field"], "start");
    let (s, e) = call(&app, "POST", "/trials", Some(ud(json!({"type": "bcd", "gamma": 0.9}), &six(), 0))).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_config")));
    let (s, e) = call(&app, "POST", "/trials", Some(json!({"levels": [1, 2]}))).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_config")));

    let id = create(&app, ud(json!({"type": "sud"}), &six(), 2)).await["id"].as_str().unwrap().to_string();
    let url = format!("/trials/{id}/responses");
    let (s, e) = call(&app, "POST", &url, Some(json!({"response": "maybe"}))).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_request")));
    let (s, e) = call(&app, "POST", &url, Some(json!({"response": "yes", "level": 4}))).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::CONFLICT, Some("level_mismatch")));
    let (s, e) = call(&app, "POST", &url, Some(json!({"response": "yes", "trial": 2}))).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::CONFLICT, Some("trial_mismatch")));
    let (s, e) = call(&app, "POST", &url, Some(json!({"response": "yes", "level": 4, "deviation": true}))).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("note")));
    let (s, e) = call(&app, "GET", &format!("/trials/{id}/estimates?target=1.5"), None).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("target")));
    let (s, e) = call(&app, "GET", &format!("/trials/{id}/estimates?estimators=foo"), None).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("estimators")));
    let (s, e) = call(&app, "GET", &format!("/trials/{id}/estimates?ci=exact"), None).await;
    assert_eq!((s, e["field"].as_str()), (StatusCode::BAD_REQUEST, Some("ci")));
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(view["n"], 0);
}

#[tokio::test]
async fn protocol_deviation_is_logged_and_replayed() {
    let app = router(store());
    let id = create(&app, ud(json!({"type": "sud"}), &six(), 2)).await["id"].as_str().unwrap().to_string();
    respond(&app, &id, "no").await;
    let (s, r) = call(
        &app,
        "POST",
        &format!("/trials/{id}/responses"),
        Some(json!({"response": "yes", "level": 1, "deviation": true, "note": "pharmacy error"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["recommendation"]["level"], 0);
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    let t = &view["trials"][1];
    assert_eq!((t["level"].as_u64(), t["recommended"].as_u64()), (Some(1), Some(3)));
    assert_eq!(t["deviation"], true);
    let (_, export) = call(&app, "GET", &format!("/trials/{id}/export"), None).await;
    let other = router(store());
    let (_, imported) = call(&other, "POST", "/trials/import", Some(export)).await;
    assert_eq!(imported["recommendation"]["level"], 0);
    assert_eq!(imported["trials"], view["trials"]);
}

#[tokio::test]
async fn acknowledged_responses_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let open = || Arc::new(Store::open(dir.path(), clock(), Arc::new(SequentialIds::default())).unwrap().with_snapshot_every(3));
    let st = open();
    let app = router(st.clone());
    let id = create(&app, ud(json!({"type": "kr", "k": 2}), &six(), 2)).await["id"].as_str().unwrap().to_string();
    let mut last = Value::Null;
    for r in ["no", "no", "no", "yes", "no"] {
        last = respond(&app, &id, r).await;
    }
    let (_, before) = call_raw(&app, "GET", &format!("/trials/{id}/export"), None).await;
    drop(app);
    drop(st);

    // Simulate a crash mid-append.
    let log = dir.path().join(format!("{id}.jsonl"));
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    std::io::Write::write_all(&mut f, b"{\"type\":\"response\",\"seq\":6,").unwrap();
    drop(f);

    let app = router(open());
    let (_, after) = call_raw(&app, "GET", &format!("/trials/{id}/export"), None).await;
    assert_eq!(before, after);
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(view["recommendation"], last["recommendation"]);
    respond(&app, &id, "no").await;

    // The snapshot alone restores the session when the log is lost.
    drop(app);
    std::fs::remove_file(&log).unwrap();
    let app = router(open());
    let (_, view) = call(&app, "GET", &format!("/trials/{id}"), None).await;
    assert_eq!(view["n"], 6);
}

#[tokio::test]
async fn concurrent_responses_for_one_step_are_linearized() {
    let st = store();
    let app = router(st.clone());
    let id = create(&app, ud(json!({"type": "sud"}), &six(), 2)).await["id"].as_str().unwrap().to_string();
    let mut handles = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        let url = format!("/trials/{id}/responses");
        handles.push(tokio::spawn(async move {
            let r = if i % 2 == 0 { "yes" } else { "no" };
            call(&app, "POST", &url, Some(json!({"response": r, "trial": 1}))).await.0
        }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(st.get(&id).unwrap().engine().n(), 1);
}

#[tokio::test]
async fn unknown_route_is_json() {
    let app = router(store());
    let (s, e) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!((s, e["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}
