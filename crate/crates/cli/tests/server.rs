mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use serde_json::{json, Value};
use tower::ServiceExt;
use voxstream::volume::SliceVolume;
use voxstream_cli::server::{router, serve, AppState, JobState, JobStatus, ServerConfig};
use voxstream_cli::CliError;
use voxstream_ensemble::{
    distance_matrix, extract_features, mds_embed, scan_ensemble, CachePolicy, Sampling,
};

const MEMBERS: [&str; 4] = ["a", "b", "c", "d"];
const STEPS: usize = 3;
const DIMS: [usize; 3] = [12, 10, 8];

struct Fixture {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
    state: Arc<AppState>,
    app: Router,
}

fn fixture_with(f: impl FnOnce(&mut ServerConfig)) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ens");
    build_ensemble(&root, &MEMBERS, STEPS, DIMS, wave);
    let mut cfg = ServerConfig::new(&root, tmp.path().join("work"));
    cfg.samples = 200;
    cfg.seed = 7;
    cfg.brick_size = 16;
    f(&mut cfg);
    let state = Arc::new(AppState::new(cfg).unwrap());
    let app = router(state.clone());
    Fixture {
        _tmp: tmp,
        root,
        state,
        app,
    }
}

fn fixture() -> Fixture {
    fixture_with(|_| {})
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, headers, bytes.to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Polls a job until it leaves the queued and running states; returns the
/// final status and every progress value seen.
async fn wait_job(app: &Router, id: u64) -> (JobStatus, Vec<f64>) {
    let mut seen = Vec::new();
    for _ in 0..2000 {
        let (s, v) = get_json(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        let st: JobStatus = serde_json::from_value(v).unwrap();
        seen.push(st.progress);
        if !matches!(st.state, JobState::Queued | JobState::Running) {
            return (st, seen);
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("job {id} did not finish");
}

async fn run_job(app: &Router, kind: &str, body: Value) -> JobStatus {
    let (s, h, b) = call(app, "POST", &format!("/api/jobs/{kind}"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&b));
    let created: JobStatus = serde_json::from_slice(&b).unwrap();
    assert_eq!(h["location"], format!("/api/jobs/{}", created.id).as_str());
    let (done, progress) = wait_job(app, created.id).await;
    assert!(progress.windows(2).all(|w| w[0] <= w[1]), "progress went backwards: {progress:?}");
    assert!(progress.iter().all(|p| (0.0..=1.0).contains(p)));
    done
}

#[tokio::test(flavor = "multi_thread")]
async fn ensemble_endpoint_passes_the_scan_through() {
    let fx = fixture();
    let (s, v) = get_json(&fx.app, "/api/ensemble").await;
    assert_eq!(s, StatusCode::OK);
    let (ds, _) = scan_ensemble(&fx.root, CachePolicy::Ignore, None).unwrap();
    let mut expected = serde_json::to_value(&ds).unwrap();
    expected["total_steps"] = json!(MEMBERS.len() * STEPS);
    assert_eq!(v, expected);
    assert_eq!(v["members"].as_array().unwrap().len(), 4);
    assert_eq!(v["common_fields"], json!(["p", "v"]));
    assert_eq!(v["union_time_range"], json!([0.0, 2.0]));
}

#[tokio::test(flavor = "multi_thread")]
async fn embedding_needs_features_then_matches_direct_computation() {
    let fx = fixture();
    let (s, v) = get_json(&fx.app, "/api/embedding?fields=p&k=3").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["hint"]["method"], "POST");
    assert_eq!(v["hint"]["path"], "/api/jobs/extract");
    assert_eq!(v["hint"]["body"]["fields"], json!(["p"]));

    let done = run_job(&fx.app, "extract", json!({ "fields": ["p"] })).await;
    assert_eq!(done.state, JobState::Done, "{}", done.message);
    assert_eq!(done.progress, 1.0);
    assert_eq!(done.result.as_ref().unwrap()["computed"], json!(12));

    let (s, v) = get_json(&fx.app, "/api/embedding?fields=p&k=3").await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), MEMBERS.len() * STEPS);
    assert!(points.iter().all(|p| p.as_array().unwrap().len() == 3));
    assert_eq!(v["curves"].as_array().unwrap().len(), MEMBERS.len());

    let tmp = tempfile::tempdir().unwrap();
    let run = extract_features(
        fx.state.dataset(),
        &["p".to_string()],
        Sampling::Random { count: 200, seed: 7 },
        None,
        tmp.path(),
        None,
    )
    .unwrap();
    let e = mds_embed(&distance_matrix(&run.matrices, None).unwrap(), 3).unwrap();
    assert_eq!(v["points"], e.to_json()["points"]);

    let (s, sub) = get_json(&fx.app, "/api/reembed?fields=p&members=a,c&k=2").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sub["points"].as_array().unwrap().len(), 2 * STEPS);
    let (s, _) = get_json(&fx.app, "/api/reembed?fields=p&members=zz").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&fx.app, "/api/reembed?fields=p").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn matrix_job_reports_missing_features_then_succeeds() {
    let fx = fixture();
    let failed = run_job(&fx.app, "matrix", json!({ "fields": ["v"] })).await;
    assert_eq!(failed.state, JobState::Failed);
    assert_eq!(failed.result.unwrap()["error"], "IncompleteFeatures");
    assert_eq!(run_job(&fx.app, "extract", json!({ "fields": ["v"] })).await.state, JobState::Done);
    let done = run_job(&fx.app, "matrix", json!({ "fields": ["v"] })).await;
    assert_eq!(done.state, JobState::Done);
    assert_eq!(done.result.unwrap()["records"], json!(12));
    let (s, v) = get_json(&fx.app, "/api/embedding?fields=v").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["points"].as_array().unwrap().len(), 12);
}

fn decode_png16(bytes: &[u8]) -> (u32, u32, Vec<u16>) {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).unwrap().to_luma16();
    (img.width(), img.height(), img.into_raw())
}

fn quantize(v: f32, [lo, hi]: [f64; 2]) -> u16 {
    ((((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)) * 65535.0).round() as u16
}

#[tokio::test(flavor = "multi_thread")]
async fn slice_png_equals_volume_plane() {
    let fx = fixture();
    for (field, channel, member, step, index) in [("p", 0usize, "b", 1usize, 3usize), ("v", 2, "d", 2, 0)] {
        let uri = format!("/api/slice?member={member}&t={step}&field={field}&axis=z&index={index}&lod=0&channel={channel}");
        let (s, h, body) = call(&fx.app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        assert_eq!(h["content-type"], "image/png");
        let (w, hgt, px) = decode_png16(&body);
        assert_eq!([w as usize, hgt as usize], [DIMS[0], DIMS[1]]);
        let range = fx.state.dataset().field(field).unwrap().range[channel];
        let vol = SliceVolume::open(fx.root.join(member).join(step_name(step)).join(field)).unwrap().read_dense().unwrap();
        let expected: Vec<u16> = (0..DIMS[1])
            .flat_map(|y| (0..DIMS[0]).map(move |x| (x, y)))
            .map(|(x, y)| quantize(vol.get(channel, x, y, index), range))
            .collect();
        assert_eq!(px, expected);
    }
    let (s, _) = get_json(&fx.app, "/api/slice?member=zz&t=0&field=p&index=0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&fx.app, "/api/slice?member=a&t=0&field=p").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&fx.app, "/api/slice?member=a&t=0&field=p&index=99").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn aggregate_slice_matches_dense_mean() {
    let fx = fixture();
    let (s, v) = get_json(&fx.app, "/api/aggregate?field=p&stat=mean&index=2&format=json&members=a,c&t0=1").await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let values: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(values.len(), DIMS[0] * DIMS[1]);
    for y in 0..DIMS[1] {
        for x in 0..DIMS[0] {
            let mut sum = 0.0f64;
            let mut n = 0;
            for m in [0usize, 2] {
                for s in 1..STEPS {
                    sum += wave(m, s, 0, 0, x, y, 2) as f64;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            assert!((values[y * DIMS[0] + x] - mean).abs() <= 1e-6 * (1.0 + mean.abs()));
        }
    }
    let (s, h, body) = call(&fx.app, "GET", "/api/aggregate?field=p&stat=stddev&index=0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["content-type"], "image/png");
    assert!(h.contains_key("x-value-max"));
    assert_eq!(decode_png16(&body).2.len(), DIMS[0] * DIMS[1]);
    let (s, _) = get_json(&fx.app, "/api/aggregate?field=p&stat=median&index=0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn parcoords_selection_and_mask_job() {
    let fx = fixture();
    let (s, _, _) = call(&fx.app, "POST", "/api/selection", Some(json!({ "intervals": [null] }))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = get_json(&fx.app, "/api/parcoords?fields=p&samples=300&times=2").await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let values: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(values.len(), MEMBERS.len() * 300 * 2);
    assert_eq!(v["summary"]["lines"], json!(MEMBERS.len() * 600));
    let range = fx.state.dataset().field("p").unwrap().range[0];
    let iv = [range[0], (range[0] + range[1]) / 2.0];

    let tf = json!({ "window": range, "points": [[0.0, 1.0, 0.0, 0.0, 0.2], [1.0, 0.0, 0.0, 1.0, 1.0]] });
    let (s, _, b) = call(
        &fx.app,
        "POST",
        "/api/selection",
        Some(json!({ "intervals": [iv], "tfs": [{ "axis": 0, "tf": tf }], "lines": true })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let sel: Value = serde_json::from_slice(&b).unwrap();
    let expected = values.iter().filter(|&&x| x as f32 as f64 >= iv[0] && x <= iv[1]).count();
    assert_eq!(sel["selected"], json!(expected));
    assert_eq!(sel["lines"].as_array().unwrap().len(), expected);
    let frac = sel["fractions"][0].as_f64().unwrap();
    assert!((frac - expected as f64 / values.len() as f64).abs() < 1e-12);
    assert_eq!(sel["tfs"][0]["window"], json!(iv));
    assert_eq!(sel["tfs"][0]["clip"], json!(true));

    let done = run_job(
        &fx.app,
        "mask",
        json!({ "member": "c", "step": 1, "selection": { "intervals": [iv] } }),
    )
    .await;
    assert_eq!(done.state, JobState::Done, "{}", done.message);
    let path = done.result.unwrap()["path"].as_str().unwrap().to_string();
    let mask = SliceVolume::open(Path::new(&path)).unwrap().read_dense().unwrap();
    let src = SliceVolume::open(fx.root.join("c").join(step_name(1)).join("p")).unwrap().read_dense().unwrap();
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let v = src.get(0, x, y, z) as f64;
                let inside = v >= iv[0] && v <= iv[1];
                assert_eq!(mask.get(0, x, y, z), if inside { 255.0 } else { 0.0 });
            }
        }
    }
    let (s, _, _) = call(
        &fx.app,
        "POST",
        "/api/jobs/mask",
        Some(json!({ "member": "zz", "step": 0, "selection": { "intervals": [null] } })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn time_histogram_parcoords() {
    let fx = fixture();
    let (s, v) = get_json(&fx.app, "/api/parcoords?time_field=p&samples=50&members=a,b").await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["header"]["axes"].as_array().unwrap().len(), STEPS);
    assert_eq!(v["values"].as_array().unwrap().len(), 2 * 50 * STEPS);
}

#[tokio::test(flavor = "multi_thread")]
async fn jobs_can_be_cancelled_and_unknown_ids_are_404() {
    let fx = fixture();
    let st = fx.state.spawn_job("spin", false, |_, job| loop {
        job.check()?;
        std::thread::sleep(Duration::from_millis(2));
    });
    let (s, _) = get_json(&fx.app, &format!("/api/jobs/{}", st.id)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _, _) = call(&fx.app, "DELETE", &format!("/api/jobs/{}", st.id), None).await;
    assert_eq!(s, StatusCode::OK);
    let (end, _) = wait_job(&fx.app, st.id).await;
    assert_eq!(end.state, JobState::Cancelled);
    let (s, _) = get_json(&fx.app, "/api/jobs/999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&fx.app, "POST", "/api/jobs/nosuchkind", Some(json!({}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn exclusive_jobs_run_one_at_a_time() {
    let fx = fixture();
    let active = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let peak = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let ids: Vec<u64> = (0..4)
        .map(|_| {
            let (active, peak) = (active.clone(), peak.clone());
            fx.state
                .spawn_job("work", true, move |_, _| {
                    let now = active.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
                    peak.fetch_max(now, std::sync::atomic::Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(20));
                    active.fetch_sub(1, std::sync::atomic::Ordering::SeqCst);
                    Ok(json!({}))
                })
                .id
        })
        .collect();
    for id in ids {
        assert_eq!(wait_job(&fx.app, id).await.0.state, JobState::Done);
    }
    assert_eq!(peak.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn static_files_and_default_index() {
    let fx = fixture();
    let (s, _, b) = call(&fx.app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8_lossy(&b).contains("/api/ensemble"));

    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<p>explorer</p>").unwrap();
    std::fs::write(ui.path().join("app.js"), "console.log(1)").unwrap();
    let dir = ui.path().to_path_buf();
    let fx = fixture_with(move |c| c.static_dir = Some(dir));
    let (s, _, b) = call(&fx.app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"<p>explorer</p>");
    let (s, _, b) = call(&fx.app, "GET", "/app.js", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"console.log(1)");
    let (s, _) = get_json(&fx.app, "/api/ensemble").await;
    assert_eq!(s, StatusCode::OK);
}

#[test]
fn serve_reports_bind_errors() {
    let fx = fixture();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let cfg = ServerConfig::new(&fx.root, fx.root.join(".work"));
    let err = serve(cfg, &addr).unwrap_err();
    assert!(matches!(err, CliError::Bind { .. }), "{err}");
    assert_eq!(err.to_json()["error"], "BindError");
}

#[test]
fn unreadable_root_fails_to_start() {
    let tmp = tempfile::tempdir().unwrap();
    let err = AppState::new(ServerConfig::new(tmp.path().join("missing"), tmp.path().join("w"))).err().unwrap();
    assert_ne!(err.kind(), "BindError");
}
