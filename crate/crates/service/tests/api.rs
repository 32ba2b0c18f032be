use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pointsup::dataset::{BboxSource, Dataset, ImageInfo, InstanceRecord};
use pointsup::mask::{rasterize_polygon, BoundingBox};
use pointsup::sim::{pooled_agreement, simulate_dataset, PointAnnotationFile};
use pointsup::Exec;
use pointsup_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset(n: usize) -> Dataset {
    let (w, h) = (80, 60);
    let mut images = Vec::new();
    let mut instances = Vec::new();
    for i in 0..n as u64 {
        let ring = if i == 0 {
            // hugs the top-left corner
            vec![[0.0, 0.0], [9.0, 0.0], [6.0, 7.0], [0.0, 5.0]]
        } else {
            let cx = 20.0 + (i % 4) as f64 * 10.0;
            vec![[cx - 12.0, 10.0], [cx + 14.0, 14.0], [cx + 4.0, 50.0], [cx - 9.0, 38.0]]
        };
        images.push(ImageInfo {
            id: i,
            file_name: format!("img{i}.png"),
            width: w,
            height: h,
        });
        instances.push(InstanceRecord {
            instance_id: 500 + i,
            image_id: i,
            category: "shape".into(),
            bbox: BoundingBox::new(0.0, 0.0, w as f64, h as f64).unwrap(),
            bbox_source: BboxSource::Given,
            mask: rasterize_polygon(&[ring], w, h).unwrap().mask,
        });
    }
    Dataset {
        id: "shapes".into(),
        images,
        instances,
    }
}

fn app(ds: &Dataset, images: &Path, data: &Path) -> Router {
    router(Arc::new(AppState::open(vec![ds.clone()], images, data).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn create(app: &Router, n: usize, seed: u64) -> (String, usize) {
    let (st, v) = call(app, "POST", "/sessions", Some(json!({"dataset_id": "shapes", "n_points": n, "seed": seed}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v["total"].as_u64().unwrap() as usize)
}

async fn label(app: &Router, id: &str, task_id: usize, label: &str, ms: f64) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/sessions/{id}/labels"),
        Some(json!({"task_id": task_id, "label": label, "elapsed_ms": ms})),
    )
    .await
}

fn log_lines(data: &Path, id: &str) -> usize {
    std::fs::read_to_string(data.join(format!("{id}.jsonl"))).unwrap().lines().count()
}

/// Labels every remaining task, answering from ground truth except where
/// `flip(task_id)` holds.
async fn label_all(app: &Router, id: &str, flip: impl Fn(usize) -> bool) -> usize {
    let mut n = 0;
    loop {
        let (_, next) = call(app, "GET", &format!("/sessions/{id}/next"), None).await;
        if next["done"].as_bool().unwrap() {
            return n;
        }
        let t = &next["task"];
        let task_id = t["task_id"].as_u64().unwrap() as usize;
        let truth = truth_label(t);
        let answer = if flip(task_id) { other(&truth) } else { truth };
        let (st, _) = label(app, id, task_id, &answer, 700.0 + (task_id % 7) as f64 * 100.0).await;
        assert_eq!(st, StatusCode::OK);
        n += 1;
    }
}

fn truth_label(task: &Value) -> String {
    let ds = dataset(6);
    let inst = ds.instance(task["instance_id"].as_u64().unwrap()).unwrap();
    let (x, y) = (task["point"]["x"].as_f64().unwrap(), task["point"]["y"].as_f64().unwrap());
    if inst.mask.at_point(x, y).unwrap() { "object" } else { "background" }.to_string()
}

fn other(label: &str) -> String {
    if label == "object" { "background" } else { "object" }.to_string()
}

#[tokio::test]
async fn task_counts_and_unknowns() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(2), dir.path(), dir.path());
    let (_, total) = create(&app, 3, 0).await;
    assert_eq!(total, 6);
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({"dataset_id": "nope", "n_points": 3}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_dataset");
    let (st, v) = call(&app, "GET", "/sessions/missing/next", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_session");
}

#[tokio::test]
async fn tasks_follow_the_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(6);
    let app = app(&ds, dir.path(), dir.path());
    let sim = simulate_dataset(&ds, 4, 11, None, Exec::Sequential).unwrap();
    let expected: Vec<(f64, f64)> = sim.annotations.iter().flat_map(|a| a.points.iter().map(|p| (p.x, p.y))).collect();

    let mut runs = Vec::new();
    for _ in 0..2 {
        let (id, total) = create(&app, 4, 11).await;
        assert_eq!(total, 24);
        let mut coords = Vec::new();
        loop {
            let (_, next) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
            if next["done"].as_bool().unwrap() {
                break;
            }
            let t = &next["task"];
            assert_eq!(t["task_id"].as_u64().unwrap() as usize, coords.len());
            coords.push((t["point"]["x"].as_f64().unwrap(), t["point"]["y"].as_f64().unwrap()));
            label(&app, &id, coords.len() - 1, "object", 1.0).await;
        }
        runs.push(coords);
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], expected);
}

#[tokio::test]
async fn ordering_idempotency_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(3), dir.path(), dir.path());
    let (id, total) = create(&app, 4, 2).await;

    let (_, next) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(next["task"]["task_id"], 0);
    assert_eq!(next["done"], false);
    // reading does not advance
    let (_, again) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(again, next);

    let (st, ack) = label(&app, &id, 0, "object", 850.0).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ack["progress"], json!({"labeled": 1, "total": total}));
    let lines = log_lines(dir.path(), &id);

    let (st, retry) = label(&app, &id, 0, "object", 990.0).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(retry, ack);
    assert_eq!(log_lines(dir.path(), &id), lines);

    let (st, v) = label(&app, &id, 0, "background", 850.0).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflicting_label");
    assert_eq!(v["cursor"], 1);

    label(&app, &id, 1, "background", 10.0).await;
    label(&app, &id, 2, "background", 10.0).await;
    let (st, v) = label(&app, &id, 5, "object", 10.0).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "out_of_order");
    assert_eq!(v["cursor"], 3);

    let (st, _) = label(&app, &id, 3, "object", -1.0).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (_, stats) = call(&app, "GET", &format!("/sessions/{id}/stats"), None).await;
    assert_eq!(stats["labeled"], 3);
    assert_eq!(log_lines(dir.path(), &id), 4);

    // past the end
    let (st, v) = label(&app, &id, total, "object", 1.0).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["cursor"], 3);
}

#[tokio::test]
async fn stats_and_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(6);
    let app = app(&ds, dir.path(), dir.path());

    let (id, total) = create(&app, 10, 5).await;
    let (_, empty) = call(&app, "GET", &format!("/sessions/{id}/stats"), None).await;
    assert_eq!(empty, json!({"labeled": 0, "total": total, "mean_s_per_point": null, "agreement": null}));

    assert_eq!(label_all(&app, &id, |_| false).await, total);
    let (_, stats) = call(&app, "GET", &format!("/sessions/{id}/stats"), None).await;
    assert_eq!(stats["agreement"], 1.0);
    let want_mean = (0..total).map(|t| 700.0 + (t % 7) as f64 * 100.0).sum::<f64>() / total as f64 / 1000.0;
    assert!((stats["mean_s_per_point"].as_f64().unwrap() - want_mean).abs() < 1e-12);
    let (_, next) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(next["done"], true);

    let (id2, _) = create(&app, 10, 5).await;
    label_all(&app, &id2, |t| t % 20 == 19).await;
    let (_, stats) = call(&app, "GET", &format!("/sessions/{id2}/stats"), None).await;
    let agreement = stats["agreement"].as_f64().unwrap();
    assert!((agreement - 0.95).abs() <= 1.0 / total as f64 + 1e-12, "{agreement}");

    // offline recomputation on the exported file
    let (_, exported) = call(&app, "GET", &format!("/sessions/{id2}/export"), None).await;
    let file: PointAnnotationFile = serde_json::from_value(exported).unwrap();
    assert_eq!(file.meta.dataset_id, "shapes");
    assert_eq!(file.annotations.iter().map(|a| a.points.len()).sum::<usize>(), total);
    let offline = pooled_agreement(&file.to_annotations(), &ds).unwrap().unwrap();
    assert_eq!(offline, agreement);
}

#[tokio::test]
async fn replay_restores_cursor_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(4);
    let first = app(&ds, dir.path(), dir.path());
    let (id, _) = create(&first, 5, 3).await;
    for t in 0..7 {
        let (_, next) = call(&first, "GET", &format!("/sessions/{id}/next"), None).await;
        let truth = truth_label(&next["task"]);
        let answer = if t == 4 { other(&truth) } else { truth };
        label(&first, &id, t, &answer, 123.0 * (t + 1) as f64).await;
    }
    let (_, stats) = call(&first, "GET", &format!("/sessions/{id}/stats"), None).await;
    let (_, next) = call(&first, "GET", &format!("/sessions/{id}/next"), None).await;
    drop(first);

    // a torn, never-acknowledged write at the tail
    let path = dir.path().join(format!("{id}.jsonl"));
    let mut bytes = std::fs::read(&path).unwrap();
    let clean_len = bytes.len();
    bytes.extend_from_slice(br#"{"event":"label","task_id":7,"lab"#);
    std::fs::write(&path, bytes).unwrap();

    let second = app(&ds, dir.path(), dir.path());
    let (_, stats2) = call(&second, "GET", &format!("/sessions/{id}/stats"), None).await;
    let (_, next2) = call(&second, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(stats2, stats);
    assert_eq!(next2, next);
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, clean_len);

    let (st, _) = label(&second, &id, 7, "object", 1.0).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(log_lines(dir.path(), &id), 9);
}

#[tokio::test]
async fn corner_views_stay_in_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(1), dir.path(), dir.path());
    let (id, total) = create(&app, 30, 0).await;
    for t in 0..total {
        let (_, next) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
        let task = &next["task"];
        let g = &task["view_geometry"];
        let (x, y) = (task["point"]["x"].as_f64().unwrap(), task["point"]["y"].as_f64().unwrap());
        for view in ["context_view", "zoom_view"] {
            let r = &g[view]["rect"];
            let (rx, ry, rw, rh) = (
                r["x"].as_f64().unwrap(),
                r["y"].as_f64().unwrap(),
                r["w"].as_f64().unwrap(),
                r["h"].as_f64().unwrap(),
            );
            // clamping oracle: inside [0, 80] x [0, 60] with positive area
            assert!(rx >= 0.0 && ry >= 0.0 && rx + rw <= 80.0 && ry + rh <= 60.0, "{view}: {r}");
            assert!(rw > 0.0 && rh > 0.0);
            if view == "zoom_view" {
                assert!(x >= rx && x <= rx + rw && y >= ry && y <= ry + rh);
                let m = &g[view]["marker"];
                assert_eq!(m[0].as_f64().unwrap(), (x - rx) * 4.0);
                assert_eq!(m[1].as_f64().unwrap(), (y - ry) * 4.0);
            }
        }
        assert_eq!(g["marker"]["highlight_box_px"], 24.0);
        label(&app, &id, t, "object", 1.0).await;
    }
}

#[tokio::test]
async fn images_are_served_from_the_root() {
    let images = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    std::fs::write(images.path().join("img0.png"), b"\x89PNG fake").unwrap();
    let app = app(&dataset(1), images.path(), data.path());
    let (id, _) = create(&app, 1, 0).await;
    let (_, next) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    let url = next["task"]["image_url"].as_str().unwrap().to_string();
    assert_eq!(url, "/images/img0.png");

    let resp = app
        .clone()
        .oneshot(Request::get(url).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(&resp.into_body().collect().await.unwrap().to_bytes()[..], b"\x89PNG fake");

    let (st, _) = call(&app, "GET", "/images/missing.png", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "GET", "/images/..%2Fsecret", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_and_racing_retries() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(3);
    let app = app(&ds, dir.path(), dir.path());
    let mut ids = Vec::new();
    for seed in 0..4 {
        ids.push(create(&app, 5, seed).await);
    }
    let mut handles = Vec::new();
    for (id, total) in ids.clone() {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            for t in 0..total {
                // three identical submissions race for the same task
                let a = label(&app, &id, t, "object", 5.0);
                let b = label(&app, &id, t, "object", 5.0);
                let c = label(&app, &id, t, "object", 5.0);
                let (ra, rb, rc) = tokio::join!(a, b, c);
                // one appends, the other two see a duplicate; all get the same ack
                assert!([&ra, &rb, &rc].iter().all(|r| r.0 == StatusCode::OK));
                assert!(ra.1 == rb.1 && rb.1 == rc.1);
            }
        }));
    }
    for h in handles {
        h.await.unwrap();
    }
    for (id, total) in ids {
        assert_eq!(log_lines(dir.path(), &id), total + 1);
        let (_, stats) = call(&app, "GET", &format!("/sessions/{id}/stats"), None).await;
        assert_eq!(stats["labeled"].as_u64().unwrap() as usize, total);
    }
}
