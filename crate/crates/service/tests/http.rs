use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use loosekey::config::RunConfig;
use loosekey::jobs::{JobKind, JobStore};
use loosekey::pipeline::{edit_observation, synth_sources};
use loosekey::server::{router, AppState};
use loosekey_core::io::motion_from_json;
use loosekey_core::{Keyframe, KeyframeSet, Motion, Skeleton};
use loosekey_model::{Denoiser, Mode};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.net.latent = 16;
    cfg.net.layers = 1;
    cfg.net.heads = 2;
    cfg.net.ff = 32;
    cfg.net.warp_hidden = [16, 8];
    cfg.net.diffusion_steps = 10;
    cfg.net.mode = Mode::Lt;
    cfg.synth.sources = 2;
    cfg.synth.frames = 90;
    cfg
}

fn app_with(dir: &TempDir, cfg: RunConfig, with_net: bool) -> (Router, AppState) {
    let net = with_net.then(|| Denoiser::new(cfg.net.clone(), 0).unwrap());
    let store = JobStore::open(dir.path().join("runs")).unwrap();
    let state = AppState::new(cfg, net, Some("tiny.lkck".into()), Some("abc".into()), store);
    (router(state.clone()), state)
}

fn app(dir: &TempDir) -> Router {
    app_with(dir, tiny_config(), true).0
}

async fn call(app: &Router, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(path).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn wait_done(app: &Router, id: &str) -> Value {
    for _ in 0..1500 {
        let (status, job) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        match job["status"].as_str().unwrap() {
            "done" | "failed" => return job,
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    }
    panic!("job {id} did not finish");
}

fn source() -> Motion {
    synth_sources(&tiny_config(), 3, 1).unwrap().remove(0)
}

fn keyframes(motion: &Motion, len: usize, frames: &[usize]) -> KeyframeSet {
    let entries = frames
        .iter()
        .map(|&f| Keyframe {
            frame: f,
            pose: motion.pose(f),
        })
        .collect();
    KeyframeSet::new(len, motion.fps(), *motion.layout(), entries).unwrap()
}

#[tokio::test]
async fn health_reports_checkpoint_and_hash() {
    let dir = TempDir::new().unwrap();
    let (status, v) = call(&app(&dir), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["mode"], "LT");
    assert_eq!(v["frames"], 60);
    assert_eq!(v["checkpoint"], "tiny.lkck");
    assert_eq!(v["config_hash"], tiny_config().hash());
}

#[tokio::test]
async fn skeleton_exposes_rest_positions() {
    let dir = TempDir::new().unwrap();
    let (status, v) = call(&app(&dir), "GET", "/skeleton", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["dim"], 79);
    let rest = Skeleton::desk().rest_positions();
    let got = v["rest_positions"].as_array().unwrap();
    assert_eq!(got.len(), rest.len());
    for (g, r) in got.iter().zip(&rest) {
        for a in 0..3 {
            assert!((g[a].as_f64().unwrap() - r[a]).abs() < 1e-12);
        }
    }
}

#[tokio::test]
async fn generate_inline_returns_retrievable_motion() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let kf = keyframes(&source(), 60, &[30]);
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": kf.to_json(), "seed": 4}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "done");
    let id = v["motions"][0]["id"].as_str().unwrap().to_string();
    let (status, doc) = call(&app, "GET", &format!("/motions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc, v["motions"][0]["motion"]);
    let file = motion_from_json(doc.clone()).unwrap();
    assert_eq!(file.motion.num_frames(), 60);
    assert!(file.motion.frames().iter().all(|x| x.is_finite()));
    let (_, job) = call(&app, "GET", &format!("/jobs/{}", v["job_id"].as_str().unwrap()), None).await;
    assert_eq!(job["motions"][0], id.as_str());
    assert_eq!(job["seed"], 4);
}

#[tokio::test]
async fn generate_queued_completes_and_lists_every_job() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let kf = keyframes(&source(), 90, &[10, 80]);
    let mut ids = Vec::new();
    for seed in 0..3 {
        let body = json!({"keyframes": kf.to_json(), "seed": seed, "num_samples": 2, "inline": false});
        let (status, v) = call(&app, "POST", "/generate", Some(body)).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        ids.push(v["job_id"].as_str().unwrap().to_string());
    }
    for id in &ids {
        let job = wait_done(&app, id).await;
        assert_eq!(job["status"], "done", "{job}");
        let motions = job["motions"].as_array().unwrap();
        assert_eq!(motions.len(), 2);
        let (status, doc) = call(&app, "GET", &format!("/motions/{}", motions[1].as_str().unwrap()), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(motion_from_json(doc.clone()).unwrap().motion.num_frames(), 90);
    }
    let (_, list) = call(&app, "GET", "/jobs", None).await;
    assert_eq!(list["jobs"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn keyframe_outside_timeline_is_rejected_with_field_messages() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let mut doc = keyframes(&source(), 60, &[5]).to_json();
    doc["keyframes"][0]["frame"] = json!(60);
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": doc}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    let details = v["details"].as_array().unwrap();
    assert!(details.iter().any(|d| d.as_str().unwrap().contains("keyframes[0]")), "{v}");

    let doc = keyframes(&source(), 90, &[80]).to_json();
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": doc, "F_total": 70}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn every_invalid_option_is_reported() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let doc = keyframes(&source(), 40, &[5]).to_json();
    let body = json!({"keyframes": doc, "num_samples": 0, "imputation_C": 99, "mode": "NoWarp"});
    let (status, v) = call(&app, "POST", "/generate", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let details: Vec<&str> = v["details"].as_array().unwrap().iter().map(|d| d.as_str().unwrap()).collect();
    for key in ["num_samples", "mode", "imputation_C", "F_total"] {
        assert!(details.iter().any(|d| d.starts_with(key)), "{key} missing from {details:?}");
    }
    let (status, _) = call(&app, "POST", "/generate", Some(json!({"keyframes": {}, "bogus": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, list) = call(&app, "GET", "/jobs", None).await;
    assert!(list["jobs"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    for path in ["/jobs/job-999999", "/motions/job-999999-m0", "/metrics/job-999999", "/motions/..%2Fx"] {
        let (status, v) = call(&app, "GET", path, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{path}: {v}");
        assert_eq!(v["error"], "not_found");
    }
    let (status, _) = call(&app, "POST", "/edit", Some(json!({"base_motion_id": "job-000042-m0"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn full_queue_answers_conflict() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_config();
    cfg.serve.queue_depth = 1;
    let (app, state) = app_with(&dir, cfg, true);
    state.store.create(JobKind::Generate, 0, 1).unwrap();
    let doc = keyframes(&source(), 60, &[5]).to_json();
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": doc}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    let (status, _) = call(&app, "POST", "/eval", Some(json!({"generator": "interp"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[test]
fn edit_mask_keeps_ranges_and_adds_keyposes() {
    let base = source().slice(0, 60).unwrap();
    let other = source().slice(30, 90).unwrap();
    let kf = keyframes(&other, 60, &[40]);
    let obs = edit_observation(&base, &[(0, 20)], Some(&kf)).unwrap();
    let expected: Vec<bool> = (0..60).map(|f| f < 20 || f == 40).collect();
    assert_eq!(obs.mask(), expected.as_slice());

    let overlap = keyframes(&other, 60, &[10]);
    let obs = edit_observation(&base, &[(0, 20)], Some(&overlap)).unwrap();
    let contacts = base.layout().contacts();
    for (c, (a, b)) in obs.buffer().row(10).iter().zip(other.frame(10).iter()).enumerate() {
        if !contacts.contains(&c) {
            assert_eq!(a, b);
        }
    }
    assert!(edit_observation(&base, &[(20, 20), (50, 61)], None).is_err());
}

#[tokio::test]
async fn edit_holds_kept_frames_and_new_keypose() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let src = source();
    let kf = keyframes(&src, 60, &[0, 59]);
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": kf.to_json(), "mode": "interp"}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let base_id = v["motions"][0]["id"].as_str().unwrap().to_string();
    let base = motion_from_json(v["motions"][0]["motion"].clone()).unwrap().motion;

    let new_pose = keyframes(&src, 60, &[40]).to_json();
    let body = json!({
        "base_motion_id": base_id,
        "keep_ranges": [[0, 20]],
        "keyframes": new_pose,
        "mode": "IMP(0)",
        "seed": 1,
    });
    let (status, v) = call(&app, "POST", "/edit", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let edited = motion_from_json(v["motions"][0]["motion"].clone()).unwrap().motion;
    let contacts = base.layout().contacts();
    let same = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b.iter()).enumerate().all(|(c, (x, y))| contacts.contains(&c) || x == y)
    };
    for f in 0..20 {
        assert!(same(edited.frame(f), base.frame(f)), "kept frame {f}");
    }
    assert!(same(edited.frame(40), src.frame(40)));

    let body = json!({"base_motion_id": base_id, "keep_ranges": [[30, 10]]});
    let (status, v) = call(&app, "POST", "/edit", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["details"][0].as_str().unwrap().starts_with("keep_ranges[0]"));
}

#[tokio::test]
async fn eval_job_publishes_metrics() {
    let dir = TempDir::new().unwrap();
    let app = app(&dir);
    let (status, v) = call(&app, "POST", "/eval", Some(json!({"generator": "gt", "test_pairs": 3}))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let id = v["job_id"].as_str().unwrap().to_string();
    let job = wait_done(&app, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    let (status, doc) = call(&app, "GET", &format!("/metrics/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["generator"], "GT");
    assert_eq!(doc["report"]["kpe"], 0.0);
    assert_eq!(doc["retimed_fraction"], 1.0);
    assert_eq!(doc["checkpoint_config_hash"], "abc");

    let (status, _) = call(&app, "POST", "/eval", Some(json!({"generator": "NoWarp"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn without_checkpoint_only_interp_is_served() {
    let dir = TempDir::new().unwrap();
    let (app, _) = app_with(&dir, tiny_config(), false);
    let doc = keyframes(&source(), 60, &[5, 50]).to_json();
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": doc.clone()}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (status, v) = call(&app, "POST", "/generate", Some(json!({"keyframes": doc, "mode": "LT"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["details"][0].as_str().unwrap().contains("checkpoint"));
}
