use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pilesort_core::features::{format_feature_file, FeatureVector};
use pilesort_core::fewshot::{write_model_file, RelationModel};
use pilesort_core::session::{create_session_from_features, Actor, SessionConfig};
use pilesort_core::synthetic::gaussian_blobs;
use pilesort_core::{Control, Point};
use pilesort_service::app::apply_command;
use pilesort_service::jobs::JobState;
use pilesort_service::wire::{AutoGroupResponse, Command, CommandResponse, SessionView};
use pilesort_service::{api, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    state: Arc<AppState>,
    app: Router,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let state = AppState::open(config(&root)).unwrap();
        let app = api::router(state.clone());
        Self { _dir: dir, root, state, app }
    }

    fn reopen(&mut self) {
        self.state = AppState::open(config(&self.root)).unwrap();
        self.app = api::router(self.state.clone());
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(&b).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        self.send(req).await
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, v)
    }

    async fn wait_job(&self, job: &str) -> Value {
        let s = self.state.jobs.wait(job).await.unwrap();
        let (code, v) = self.call("GET", &format!("/jobs/{job}"), None).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(v["state"], serde_json::to_value(s.state).unwrap());
        v
    }
}

fn config(root: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: root.to_path_buf(),
        ..ServiceConfig::default()
    }
}

fn blob_rows(per_class: usize, seed: u64) -> Vec<(String, FeatureVector)> {
    let (x, _) = gaussian_blobs(3, per_class, 6, 10.0, 1.0, seed);
    x.row_iter()
        .enumerate()
        .map(|(i, r)| (format!("img{i:02}"), FeatureVector(r.to_vec())))
        .collect()
}

fn write_features(dir: &Path, rows: &[(String, FeatureVector)]) -> String {
    let path = dir.join("features.txt");
    let text = format_feature_file(rows[0].1.len(), rows.iter().map(|(n, f)| (n.as_str(), f))).unwrap();
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

async fn features_session(h: &Harness, id: &str, rows: &[(String, FeatureVector)], seed: u64) -> SessionView {
    let path = write_features(&h.root, rows);
    let (code, v) = h
        .call("POST", "/sessions", Some(json!({ "session_id": id, "features": path, "seed": seed })))
        .await;
    assert_eq!(code, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["schema_version"], 1);
    let job = h.wait_job(v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    let (code, v) = h.call("GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(code, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn created_session_matches_direct_construction() {
    let h = Harness::new();
    let rows = blob_rows(5, 1);
    let view = features_session(&h, "alpha", &rows, 7).await;
    let cfg = SessionConfig { seed: 7, ..SessionConfig::default() };
    let direct = create_session_from_features("alpha", rows, cfg, &Control::default()).unwrap();
    assert_eq!(view, SessionView::of(&direct));
    let (_, list) = h.call("GET", "/sessions", None).await;
    assert_eq!(list["sessions"], json!(["alpha"]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn api_command_sequence_equals_direct_calls() {
    let h = Harness::new();
    let rows = blob_rows(4, 2);
    features_session(&h, "s", &rows, 0).await;
    let mut direct = create_session_from_features("s", rows, SessionConfig::default(), &Control::default()).unwrap();

    let script = vec![
        json!({"op": "create_group", "label": "left"}),
        json!({"op": "create_group", "label": "right"}),
        json!({"op": "move", "image_id": "img00", "x": 100.0, "y": 120.5}),
        json!({"op": "assign", "image_id": "img00", "group_id": "g0"}),
        json!({"op": "move", "image_id": "img01", "x": 110.0, "y": 125.0}),
        json!({"op": "assign", "image_id": "img01", "group_id": "g0"}),
        json!({"op": "assign", "image_id": "img05", "group_id": "g1"}),
        json!({"op": "rename_group", "group_id": "g1", "label": "east"}),
        json!({"op": "set_threshold", "threshold": 0.55}),
        json!({"op": "move", "image_id": "img03", "x": -5.0, "y": 5000.0}),
        json!({"op": "undo"}),
        json!({"op": "unassign", "image_id": "img05"}),
        json!({"op": "delete_group", "group_id": "g1"}),
        json!({"op": "undo"}),
    ];
    for cmd in script {
        let (code, v) = h.call("POST", "/sessions/s/events", Some(cmd.clone())).await;
        assert_eq!(code, StatusCode::OK, "{v}");
        let resp: CommandResponse = serde_json::from_value(v).unwrap();
        let expected = apply_command(&mut direct, serde_json::from_value::<Command>(cmd).unwrap()).unwrap();
        assert_eq!(resp.outcome, expected);
        assert_eq!(resp.state, SessionView::of(&direct));
    }
    // the same edits through the session methods themselves
    let mut by_hand =
        create_session_from_features("s", blob_rows(4, 2), SessionConfig::default(), &Control::default()).unwrap();
    by_hand.create_group("left").unwrap();
    by_hand.create_group("right").unwrap();
    by_hand.move_image("img00", Point::new(100.0, 120.5)).unwrap();
    by_hand.assign_to_group("img00", "g0", Actor::User).unwrap();
    by_hand.move_image("img01", Point::new(110.0, 125.0)).unwrap();
    by_hand.assign_to_group("img01", "g0", Actor::User).unwrap();
    by_hand.assign_to_group("img05", "g1", Actor::User).unwrap();
    by_hand.rename_group("g1", "east").unwrap();
    by_hand.set_threshold(0.55).unwrap();
    by_hand.move_image("img03", Point::new(-5.0, 5000.0)).unwrap();
    by_hand.undo().unwrap();
    by_hand.unassign("img05").unwrap();
    by_hand.delete_group("g1").unwrap();
    by_hand.undo().unwrap();
    let (_, v) = h.call("GET", "/sessions/s", None).await;
    let api_view: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(api_view, SessionView::of(&by_hand));
    assert_eq!(by_hand.state(), direct.state());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_are_404() {
    let h = Harness::new();
    features_session(&h, "s", &blob_rows(2, 3), 0).await;
    for (m, uri, body) in [
        ("GET", "/sessions/nope", None),
        ("POST", "/sessions/nope/events", Some(json!({"op": "undo"}))),
        ("POST", "/sessions/nope/auto-group", None),
        ("POST", "/sessions/nope/auto-position", None),
        ("POST", "/sessions/nope/finetune", None),
        ("GET", "/sessions/nope/grid", None),
        ("GET", "/sessions/nope/images/x/heatmap?group=g0", None),
        ("GET", "/jobs/job-999", None),
        ("DELETE", "/jobs/job-999", None),
        ("POST", "/sessions/s/events", Some(json!({"op": "move", "image_id": "ghost", "x": 1.0, "y": 1.0}))),
        ("POST", "/sessions/s/events", Some(json!({"op": "assign", "image_id": "img00", "group_id": "g9"}))),
    ] {
        let (code, v) = h.call(m, uri, body).await;
        assert_eq!(code, StatusCode::NOT_FOUND, "{m} {uri}: {v}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_and_preconditions() {
    let h = Harness::new();
    features_session(&h, "s", &blob_rows(2, 4), 0).await;
    let (code, _) = h.call("POST", "/sessions/s/events", Some(json!({"op": "teleport"}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = h.call("POST", "/sessions/s/events", Some(json!({"op": "set_threshold", "threshold": 1.5}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, v) = h.call("POST", "/sessions/s/auto-group", None).await;
    assert_eq!(code, StatusCode::CONFLICT, "{v}");
    let (code, v) = h.call("POST", "/sessions/s/auto-position", None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("arrange"));
    let (code, _) = h.call("POST", "/sessions/s/finetune", None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = h.call("POST", "/sessions", Some(json!({"session_id": "s", "features": "x"}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = h.call("POST", "/sessions", Some(json!({"session_id": "../etc"}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = h.call("POST", "/sessions", Some(json!({"features": "a", "dataset": "b"}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    // a failing build leaves no session behind
    let (code, v) = h.call("POST", "/sessions", Some(json!({"session_id": "t", "features": "/no/such/file"}))).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let job = h.wait_job(v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "failed");
    let (code, _) = h.call("GET", "/sessions/t", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn auto_group_and_position_match_direct_calls() {
    let h = Harness::new();
    let rows = blob_rows(5, 5);
    features_session(&h, "s", &rows, 0).await;
    let model = RelationModel::init(6, 16, 4);
    h.state.set_default_model(Some(Arc::new(model.clone())));
    let mut direct = create_session_from_features("s", rows, SessionConfig::default(), &Control::default()).unwrap();
    let script = [
        json!({"op": "create_group", "label": "a"}),
        json!({"op": "create_group", "label": "b"}),
        json!({"op": "assign", "image_id": "img00", "group_id": "g0"}),
        json!({"op": "assign", "image_id": "img05", "group_id": "g1"}),
        json!({"op": "set_threshold", "threshold": 0.5}),
        json!({"op": "move", "image_id": "img01", "x": 300.0, "y": 300.0}),
        json!({"op": "move", "image_id": "img06", "x": 700.0, "y": 300.0}),
        json!({"op": "move", "image_id": "img11", "x": 500.0, "y": 650.0}),
    ];
    for cmd in script {
        h.call("POST", "/sessions/s/events", Some(cmd.clone())).await;
        apply_command(&mut direct, serde_json::from_value(cmd).unwrap()).unwrap();
    }
    let (code, v) = h.call("POST", "/sessions/s/auto-group", None).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    let resp: AutoGroupResponse = serde_json::from_value(v).unwrap();
    let expected = direct.run_auto_group(&model, &Control::default()).unwrap();
    assert_eq!(resp.assignments, expected);
    assert_eq!(resp.state, SessionView::of(&direct));

    let (code, v) = h.call("POST", "/sessions/s/auto-position", None).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    let moved = direct.run_auto_position().unwrap();
    assert_eq!(v["moved"].as_array().unwrap().len(), moved.len());
    let state: SessionView = serde_json::from_value(v["state"].clone()).unwrap();
    assert_eq!(state, SessionView::of(&direct));

    let (code, v) = h.call("GET", "/sessions/s/grid", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["entries"], serde_json::to_value(direct.grid_view()).unwrap());

    let (code, _) = h.call("GET", "/sessions/s/images/img00/heatmap?group=g0", None).await;
    assert_eq!(code, StatusCode::CONFLICT);
}

fn png_bytes(v: u8, w: u32, h: u32, mark: (u32, u32)) -> Vec<u8> {
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([v, v, v]));
    for dy in 0..8 {
        for dx in 0..8 {
            img.put_pixel(mark.0 + dx, mark.1 + dy, image::Rgb([255 - v, 0, v]));
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn multipart(files: &[(String, Vec<u8>)], fields: &[(&str, &str)]) -> (String, Vec<u8>) {
    let boundary = "pilesortboundary".to_string();
    let mut body = Vec::new();
    for (k, v) in fields {
        body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{k}\"\r\n\r\n{v}\r\n").as_bytes());
    }
    for (name, bytes) in files {
        body.extend(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"images\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend(bytes);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{boundary}--\r\n").as_bytes());
    (boundary, body)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn uploads_heatmaps_finetune_and_restart() {
    let mut h = Harness::new();
    let mut files: Vec<(String, Vec<u8>)> = (0..8)
        .map(|i| (format!("p{i}.png"), png_bytes(if i < 4 { 30 } else { 220 }, 40, 32, (4 * i as u32, 10))))
        .collect();
    files.push(("broken.png".into(), b"nope".to_vec()));
    let (boundary, body) = multipart(&files, &[("session_id", "up"), ("seed", "3")]);
    let req = Request::builder()
        .method("POST")
        .uri("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let (code, v) = h.send(req).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{v}");
    let job = h.wait_job(v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert!(job["message"].as_str().unwrap().contains("1 skipped"));
    let (_, v) = h.call("GET", "/sessions/up", None).await;
    assert_eq!(v["items"].as_array().unwrap().len(), 8);

    let model = RelationModel::init(256, 16, 1).with_extractor(Default::default());
    let model_path = h.state.models_dir().join("base.psrel");
    write_model_file(&model, &model_path).unwrap();
    h.state.set_default_model(Some(Arc::new(model.clone())));

    for cmd in [
        json!({"op": "create_group", "label": "dark"}),
        json!({"op": "create_group", "label": "light"}),
        json!({"op": "assign", "image_id": "p0.png", "group_id": "g0"}),
        json!({"op": "assign", "image_id": "p1.png", "group_id": "g0"}),
        json!({"op": "assign", "image_id": "p4.png", "group_id": "g1"}),
        json!({"op": "assign", "image_id": "p5.png", "group_id": "g1"}),
    ] {
        let (code, _) = h.call("POST", "/sessions/up/events", Some(cmd)).await;
        assert_eq!(code, StatusCode::OK);
    }
    let (code, v) = h.call("GET", "/sessions/up/images/p2.png/heatmap?group=g0&patch=16&stride=8", None).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    assert_eq!(v["heatmap"]["rows"], 3);
    assert_eq!(v["heatmap"]["cols"], 4);
    let (code, _) = h.call("GET", "/sessions/up/images/p2.png/heatmap?group=g7", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = h.call("GET", "/sessions/up/images/p2.png/heatmap?group=g0&patch=99", None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    let (code, v) = h.call("POST", "/sessions/up/finetune", None).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let job = h.wait_job(v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["progress"], 1.0);
    let (_, before) = h.call("GET", "/sessions/up", None).await;
    let model_ref = before["model_ref"].as_str().unwrap().to_string();
    assert!(h.state.models_dir().join(&model_ref).is_file());
    let (code, _) = h.call("POST", "/sessions/up/auto-group", None).await;
    assert_eq!(code, StatusCode::OK);
    let (_, before) = h.call("GET", "/sessions/up", None).await;

    h.reopen();
    let (code, after) = h.call("GET", "/sessions/up", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(before, after);
    // the session keeps using its fine-tuned model after a restart
    let (code, _) = h.call("GET", "/sessions/up/images/p6.png/heatmap?group=g1", None).await;
    assert_eq!(code, StatusCode::OK);
}

fn write_png(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn train_endpoint_sets_the_default_model() {
    let h = Harness::new();
    let data = h.root.join("dataset");
    for c in 0..3u32 {
        for i in 0..4u32 {
            write_png(&data.join(format!("c{c}/{i}.png")), &png_bytes(60 * c as u8, 24, 24, (c * 5, i * 3)));
        }
    }
    let (code, _) = h.call("POST", "/train", Some(json!({"dataset": "/no/such/dir"}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, v) = h
        .call("POST", "/train", Some(json!({"dataset": data, "steps": 30, "hidden": 8, "out": "tiny.psrel"})))
        .await;
    assert_eq!(code, StatusCode::ACCEPTED, "{v}");
    let job = h.wait_job(v["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["kind"], "train");
    let m = h.state.default_model().unwrap();
    assert_eq!(m.layer_sizes(), [512, 8, 1]);
    assert!(h.state.models_dir().join("tiny.psrel").is_file());

    // a dataset session created through the API
    let (code, v) = h.call("POST", "/sessions", Some(json!({"session_id": "ds", "dataset": data}))).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    h.wait_job(v["job_id"].as_str().unwrap()).await;
    let (_, v) = h.call("GET", "/sessions/ds", None).await;
    assert_eq!(v["items"][0]["image_id"], "c0/0.png");
    assert_eq!(v["items"].as_array().unwrap().len(), 12);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancelled_embedding_leaves_nothing_behind() {
    let h = Harness::new();
    let path = write_features(&h.root, &blob_rows(150, 6));
    let (_, v) = h.call("POST", "/sessions", Some(json!({"session_id": "big", "features": path}))).await;
    let job = v["job_id"].as_str().unwrap().to_string();
    let (code, v) = h.call("GET", "/sessions/big", None).await;
    assert!(code == StatusCode::CONFLICT || code == StatusCode::OK, "{v}");
    let (code, _) = h.call("DELETE", &format!("/jobs/{job}"), None).await;
    assert_eq!(code, StatusCode::OK);
    let status = h.state.jobs.wait(&job).await.unwrap();
    match status.state {
        JobState::Cancelled => {
            let (code, _) = h.call("GET", "/sessions/big", None).await;
            assert_eq!(code, StatusCode::NOT_FOUND);
            assert!(!h.root.join("sessions/big").exists());
        }
        JobState::Done => {
            let (code, _) = h.call("GET", "/sessions/big", None).await;
            assert_eq!(code, StatusCode::OK);
        }
        other => panic!("unexpected {other:?}"),
    }
}
