use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mug_cli::service::{router, AppState, OwnedModelAgent, TRANSCRIPTS_FILE};
use mug_core::agent::{Model, ModelConfig, Variant};
use mug_core::eval::{replay_offline, Agent, ConstantAgent};
use mug_core::generator::{generate_screen, GeneratorConfig};
use mug_core::io::read_sessions;
use mug_core::screen::{validate_screen, validate_session, Screen};
use mug_core::vocab::Vocab;
use serde_json::{json, Value};
use tower::ServiceExt;

fn screens(n: u64) -> BTreeMap<String, Screen> {
    (0..n).map(|k| generate_screen(100 + k, &GeneratorConfig::default()).unwrap()).map(|s| (s.screen_id.clone(), s)).collect()
}

fn model_agent() -> OwnedModelAgent {
    let vocab = Vocab::bundled();
    OwnedModelAgent { model: Model::new(ModelConfig { max_objects: 64, ..ModelConfig::toy() }, vocab.len(), 3), variant: Variant::Multi, vocab }
}

fn app(agent: Arc<dyn Agent + Send + Sync>, dir: &Path) -> (Router, Arc<AppState>) {
    let st = Arc::new(AppState::new(agent, screens(8), Some(dir.to_owned()), 7));
    (router(st.clone()), st)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

fn has_key(v: &Value, key: &str) -> bool {
    match v {
        Value::Object(m) => m.contains_key(key) || m.values().any(|x| has_key(x, key)),
        Value::Array(a) => a.iter().any(|x| has_key(x, key)),
        _ => false,
    }
}

/// Drives one session to a terminal state, answering truthfully. Returns
/// the final state and every agent-facing payload seen.
async fn drive(app: &Router, id: &str, target: u64, salt: &str) -> (String, Vec<Value>) {
    let mut agent_payloads = Vec::new();
    for t in 0..5 {
        let (s, r) = call(app, "POST", &format!("/v1/sessions/{id}/command"), Some(json!({ "text": format!("click the button {salt} {t}") }))).await;
        assert_eq!(s, StatusCode::OK, "{r}");
        agent_payloads.push(r.clone());
        if r["state"] == "exhausted" {
            return ("exhausted".into(), agent_payloads);
        }
        let correct = r["selection"]["index"].as_u64() == Some(target);
        let (s, c) = call(app, "POST", &format!("/v1/sessions/{id}/confirm"), Some(json!({ "correct": correct }))).await;
        assert_eq!(s, StatusCode::OK, "{c}");
        agent_payloads.push(c.clone());
        let st = c["state"].as_str().unwrap().to_owned();
        if st != "awaiting_command" {
            return (st, agent_payloads);
        }
    }
    unreachable!("the turn cap ends every session");
}

#[tokio::test]
async fn session_round_trip_persists_valid_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let agent = Arc::new(model_agent());
    let (app, st) = app(agent.clone(), dir.path());
    let (s, created) = call(&app, "POST", "/v1/sessions", Some(json!({}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(created["state"], "awaiting_command");
    let screen: Screen = serde_json::from_value(created["screen"].clone()).unwrap();
    assert!(validate_screen(&screen, None).is_empty());
    let id = created["session_id"].as_str().unwrap();
    let target = created["target"].as_u64().unwrap();
    let (state, _) = drive(&app, id, target, "a").await;
    let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(view["state"], state);
    let saved = read_sessions(&dir.path().join(TRANSCRIPTS_FILE)).unwrap();
    assert_eq!(saved.len(), 1);
    let session = &saved[0];
    assert_eq!(session.completed, state == "completed");
    let screen = &st.screens[&session.screen_id];
    assert!(validate_session(session, screen).is_empty());
    assert_eq!(view["turns"].as_array().unwrap().len(), session.turns.len());
    let rec = replay_offline(agent.as_ref(), session, screen, true).unwrap();
    assert_eq!(rec.turns.iter().map(|t| t.action).collect::<Vec<_>>(), session.actions());
    assert_eq!(rec.success_turn.is_some(), session.completed);
}

#[tokio::test]
async fn protocol_violations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Arc::new(ConstantAgent(0)), dir.path());
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({ "screen_id": "nope" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/v1/screens/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, created) = call(&app, "POST", "/v1/sessions", None).await;
    let id = created["session_id"].as_str().unwrap();
    let (s, r) = call(&app, "POST", &format!("/v1/sessions/{id}/confirm"), Some(json!({ "correct": true }))).await;
    assert_eq!(s, StatusCode::CONFLICT, "{r}");
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{id}/command"), Some(json!({ "text": " ?! " }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, r) = call(&app, "POST", &format!("/v1/sessions/{id}/command"), Some(json!({ "text": "Click OK" }))).await;
    assert_eq!(s, StatusCode::OK);
    let correct = r["selection"]["index"] == created["target"];
    if !correct {
        call(&app, "POST", &format!("/v1/sessions/{id}/confirm"), Some(json!({ "correct": false }))).await;
        let (s, r) = call(&app, "POST", &format!("/v1/sessions/{id}/command"), Some(json!({ "text": "click ok" }))).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(r["rule"], "no_repeated_command");
    }
}

#[tokio::test]
async fn fifth_wrong_confirmation_exhausts() {
    let dir = tempfile::tempdir().unwrap();
    let (app, st) = app(Arc::new(ConstantAgent(0)), dir.path());
    let screen = st.screens.values().find(|s| s.clickable_indices().len() >= 6).unwrap();
    let target = *screen.clickable_indices().last().unwrap();
    let (_, created) = call(&app, "POST", "/v1/sessions", Some(json!({ "screen_id": screen.screen_id, "target": target }))).await;
    let id = created["session_id"].as_str().unwrap();
    let (state, _) = drive(&app, id, target as u64, "x").await;
    assert_eq!(state, "exhausted");
    let saved = read_sessions(&dir.path().join(TRANSCRIPTS_FILE)).unwrap();
    assert_eq!(saved[0].turns.len(), 5);
    assert!(!saved[0].completed);
    assert!(validate_session(&saved[0], screen).is_empty());
}

#[tokio::test]
async fn agent_channel_never_carries_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Arc::new(model_agent()), dir.path());
    for _ in 0..5 {
        let (_, created) = call(&app, "POST", "/v1/sessions", None).await;
        assert!(has_key(&created, "target"));
        let id = created["session_id"].as_str().unwrap();
        let screen_id = created["screen"]["screen_id"].as_str().unwrap();
        let (_, payloads) = drive(&app, id, created["target"].as_u64().unwrap(), "p").await;
        let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
        let (_, agent_view) = call(&app, "GET", &format!("/v1/sessions/{id}?view=agent"), None).await;
        let (_, screen) = call(&app, "GET", &format!("/v1/screens/{screen_id}"), None).await;
        for p in payloads.iter().chain([&view, &agent_view, &screen]) {
            assert!(!has_key(p, "target"), "{p}");
        }
        let (_, user_view) = call(&app, "GET", &format!("/v1/sessions/{id}?view=user"), None).await;
        assert_eq!(user_view["target"], created["target"]);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_sessions_do_not_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Arc::new(model_agent()), dir.path());
    let mut handles = Vec::new();
    for k in 0..100 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let (_, created) = call(&app, "POST", "/v1/sessions", None).await;
            let id = created["session_id"].as_str().unwrap().to_owned();
            let (state, _) = drive(&app, &id, created["target"].as_u64().unwrap(), &format!("s{k}")).await;
            let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}?view=user"), None).await;
            (id, state, view)
        }));
    }
    let mut results = Vec::new();
    for h in handles {
        results.push(h.await.unwrap());
    }
    let ids: std::collections::BTreeSet<_> = results.iter().map(|r| r.0.clone()).collect();
    assert_eq!(ids.len(), 100);
    let saved = read_sessions(&dir.path().join(TRANSCRIPTS_FILE)).unwrap();
    assert_eq!(saved.len(), 100);
    for (id, state, view) in &results {
        let s = saved.iter().find(|s| &s.session_id == id).unwrap();
        assert_eq!(s.completed, state == "completed");
        assert_eq!(view["target"].as_u64().unwrap() as usize, s.target);
        let turns = view["turns"].as_array().unwrap();
        assert_eq!(turns.len(), s.turns.len());
        for (v, t) in turns.iter().zip(&s.turns) {
            assert_eq!(v["action"].as_u64().unwrap() as usize, t.action);
            assert_eq!(v["command"].as_str().unwrap(), t.command.text());
            // Commands embed the per-session salt, so a foreign turn would show.
            let salt = t.command.tokens[3].clone();
            assert_eq!(&salt, &s.turns[0].command.tokens[3]);
        }
    }
}
