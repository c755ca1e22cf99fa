mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::{cluster, server_config, Api};
use pubcluster_core::domain::AllocationMode;
use pubcluster_core::{parse_log, replay};
use pubcluster_server::store::LOG_FILE;
use pubcluster_server::{FlakyStore, Mode, Server};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

async fn start(levels: &[u8]) -> (Server, Api) {
    let server = Server::start(server_config(cluster(levels), 1)).await.unwrap();
    let api = Api::new(&server);
    (server, api)
}

fn code(v: &Value) -> &str {
    v["code"].as_str().unwrap_or_default()
}

#[tokio::test]
async fn token_issuance_rules() {
    let (server, api) = start(&[1]).await;
    let a = api.anonymous_token().await;
    let b = api.anonymous_token().await;
    assert_ne!(a, b);
    assert_eq!(a.len(), 32);

    let (status, v) = api
        .send(Method::POST, "/admin/tokens", None, false, Some(json!({ "role": "privileged" })))
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(code(&v), "Unauthorized");
    let (status, v) = api
        .send(Method::POST, "/admin/tokens", Some(&a), false, Some(json!({ "role": "privileged" })))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::FORBIDDEN, "Unauthorized"));

    let (status, v) = api.admin_post("/admin/tokens", json!({ "role": "admin" })).await;
    assert_eq!(status, StatusCode::CREATED);
    let admin = v["token"].as_str().unwrap().to_string();
    // an admin token works in place of the shared secret
    let (status, _) = api
        .send(Method::GET, "/admin/nodes", Some(&admin), false, None)
        .await;
    assert_eq!(status, StatusCode::OK);

    let (status, v) = api.admin_post("/admin/tokens", json!({ "role": "root" })).await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    server.shutdown().await;
}

#[tokio::test]
async fn admission_over_http() {
    let (server, api) = start(&[1, 1, 1, 1]).await;
    let t = api.anonymous_token().await;
    let (status, v) = api.request(&t, 3, 72).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let accepted = v["request_id"].as_u64().unwrap();

    let (status, v) = api.request(&t, 4, 1).await;
    assert_eq!((status, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "LimitNodes"));
    let rejected = v["details"]["request_id"].as_u64().unwrap();
    let (status, v) = api.request(&t, 2, 96).await;
    assert_eq!((status, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "LimitDuration"));
    let (status, v) = api.request(&t, 0, 1).await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    let (status, v) = api.request("not-a-token", 1, 1).await;
    assert_eq!((status, code(&v)), (StatusCode::FORBIDDEN, "Unauthorized"));

    let (_, v) = api.user_get(&format!("/requests/{accepted}"), &t).await;
    assert_eq!(v["status"], "Pending");
    let (_, v) = api.user_get(&format!("/requests/{rejected}"), &t).await;
    assert_eq!(v["status"], "Rejected");
    assert_eq!(v["reason"], "LimitNodes");

    // someone else cannot read the request
    let other = api.anonymous_token().await;
    let (status, _) = api.user_get(&format!("/requests/{accepted}"), &other).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, v) = api.user_get("/requests/99", &t).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "UnknownRequest"));

    let (status, v) = api.admin_post(&format!("/admin/requests/{accepted}/deny"), json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["reason"], "Denied");
    let (status, v) = api.admin_post(&format!("/admin/requests/{accepted}/deny"), json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "RequestNotPending"));
    server.shutdown().await;
}

#[tokio::test]
async fn admin_routes_reject_users_uniformly() {
    let (server, api) = start(&[1]).await;
    let t = api.anonymous_token().await;
    let routes: [(Method, &str, Value); 12] = [
        (Method::POST, "/admin/allocate", json!({})),
        (Method::POST, "/admin/plans/1/activate", json!({})),
        (Method::POST, "/admin/requests/1/deny", json!({})),
        (Method::POST, "/admin/nodes/1/power", json!({ "power": "on" })),
        (Method::POST, "/admin/nodes/1/reset", json!({})),
        (Method::POST, "/admin/faults", json!({ "node_id": 1, "kind": "node_failure" })),
        (Method::POST, "/admin/tick", json!({ "n": 1 })),
        (Method::GET, "/admin/nodes", Value::Null),
        (Method::GET, "/admin/events?since=0", Value::Null),
        (Method::GET, "/admin/telemetry", Value::Null),
        (Method::GET, "/admin/requests", Value::Null),
        (Method::POST, "/admin/tokens", json!({ "role": "admin" })),
    ];
    let mut bodies = Vec::new();
    for (method, path, body) in routes {
        let body = (!body.is_null()).then_some(body);
        let (status, v) = api.send(method, path, Some(&t), false, body).await;
        assert_eq!(status, StatusCode::FORBIDDEN, "{path}");
        bodies.push(v);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]), "{bodies:?}");
    // a wrong secret is no better
    let (status, _) = api
        .http
        .get(format!("{}/admin/nodes", api.base))
        .header("X-Admin-Secret", "guess")
        .send()
        .await
        .map(|r| (r.status(), ()))
        .unwrap();
    assert_eq!(status, StatusCode::FORBIDDEN);
    server.shutdown().await;
}

#[tokio::test]
async fn lease_lifecycle_over_http() {
    let (server, api) = start(&[1, 1, 1, 1]).await;
    let alice = api.anonymous_token().await;
    let bob = api.anonymous_token().await;
    api.power_on_all().await;
    let (status, _) = api.request(&alice, 3, 1).await;
    assert_eq!(status, StatusCode::CREATED);
    let blocks = api.allocate_and_activate().await;
    assert_eq!(blocks.len(), 1);
    let b = blocks[0];

    let (status, block) = api.user_get(&format!("/blocks/{b}"), &alice).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(block["state"], "Active");
    let nodes: Vec<u64> = block["node_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n.as_u64().unwrap())
        .collect();
    assert_eq!(block["head_node"].as_u64().unwrap(), nodes[0]);
    let (status, v) = api.user_get(&format!("/blocks/{b}"), &bob).await;
    assert_eq!((status, code(&v)), (StatusCode::FORBIDDEN, "NotOwner"));

    let (status, v) = api
        .user_post(&format!("/blocks/{b}/jobs"), &bob, json!({ "width": 1, "duration_ticks": 2 }))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::FORBIDDEN, "NotOwner"));
    let (status, v) = api
        .user_post(&format!("/blocks/{b}/jobs"), &alice, json!({ "width": 4, "duration_ticks": 2 }))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "WidthExceedsBlock"));
    let (status, job) = api
        .user_post(&format!("/blocks/{b}/jobs"), &alice, json!({ "width": 2, "duration_ticks": 2 }))
        .await;
    assert_eq!(status, StatusCode::CREATED, "{job}");
    let j = job["job_id"].as_u64().unwrap();
    assert_eq!(job["state"], "Running");

    api.tick(2).await;
    let (_, job) = api.user_get(&format!("/blocks/{b}/jobs/{j}"), &alice).await;
    assert_eq!(job["state"], "Done");
    let (status, _) = api.user_get(&format!("/blocks/{b}/jobs/{j}"), &bob).await;
    assert_eq!(status, StatusCode::FORBIDDEN);

    let (status, v) = api.user_post(&format!("/blocks/{b}/release"), &bob, json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::FORBIDDEN, "NotOwner"));
    let (status, v) = api.user_post(&format!("/blocks/{b}/release"), &alice, json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["state"], "Released");
    let (status, v) = api.user_post(&format!("/blocks/{b}/release"), &alice, json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "BlockNotActive"));

    // every committed event is visible, gapless
    let events = api.events(0).await;
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e["seq"].as_u64().unwrap(), i as u64 + 1);
    }
    let tail = api.events(events.len() as u64 - 2).await;
    assert_eq!(tail.len(), 2);
    server.shutdown().await;
}

#[tokio::test]
async fn node_admin_routes() {
    let (server, api) = start(&[1, 1]).await;
    let (status, v) = api
        .admin_post("/admin/faults", json!({ "node_id": 1, "kind": "node_failure" }))
        .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    api.tick(1).await;
    let (_, nodes) = api.admin_get("/admin/nodes").await;
    assert_eq!(nodes[0]["power"], "Failed");
    assert_eq!(nodes[0]["alarms"]["failed"], true);
    let (status, v) = api.admin_post("/admin/nodes/1/power", json!({ "power": "on" })).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "IllegalTransition"));
    let (status, v) = api.admin_post("/admin/nodes/1/reset", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["power"], "Off");
    let (status, v) = api.admin_post("/admin/nodes/2/reset", json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "IllegalTransition"));
    let (status, v) = api.admin_post("/admin/nodes/9/reset", json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "UnknownNode"));
    let (status, v) = api
        .admin_post("/admin/faults", json!({ "node_id": 2, "kind": "fan_degraded", "param": 0.5 }))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidParameter"));
    let (status, v) = api
        .admin_post("/admin/faults", json!({ "node_id": 2, "kind": "fan_degraded" }))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));

    let (status, v) = api
        .admin_post("/admin/nodes", json!({ "node_id": 3, "class": { "level": 2, "label": "c2" }, "controller_id": 1 }))
        .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let (status, v) = api
        .admin_post("/admin/nodes", json!({ "node_id": 3, "class": { "level": 2, "label": "c2" }, "controller_id": 1 }))
        .await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "DuplicateNodeId"));
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_input_uses_envelope() {
    let (server, api) = start(&[1]).await;
    let resp = api
        .http
        .post(format!("{}/admin/tick", api.base))
        .header("X-Admin-Secret", common::SECRET)
        .header("content-type", "application/json")
        .body("{nope")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(code(&v), "InvalidRequest");
    assert!(v.get("message").is_some() && v.get("details").is_some());

    let (status, v) = api.admin_get("/admin/nodes/1/reset").await;
    assert_eq!((status, code(&v)), (StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed"));
    let (status, v) = api.admin_post("/admin/nodes/abc/reset", json!({})).await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    let (status, v) = api.admin_post("/admin/tick", json!({ "n": 0 })).await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    server.shutdown().await;
}

#[tokio::test]
async fn storage_failure_is_atomic() {
    let (store, failing) = FlakyStore::new();
    let server = Server::start_with_store(server_config(cluster(&[1, 1]), 1), Box::new(store))
        .await
        .unwrap();
    let api = Api::new(&server);
    api.tick(2).await;
    let (_, before) = api.admin_get("/admin/nodes").await;
    failing.store(true, Ordering::SeqCst);
    let (status, v) = api.admin_post("/admin/tick", json!({ "n": 1 })).await;
    assert_eq!((status, code(&v)), (StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure"));
    let (status, v) = api.send(Method::POST, "/tokens", None, false, None).await;
    assert_eq!((status, code(&v)), (StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure"));
    let (_, after) = api.admin_get("/admin/nodes").await;
    assert_eq!(before, after);
    let (_, status_v) = api.send(Method::GET, "/status", None, false, None).await;
    assert_eq!(status_v["tick"], 2);
    failing.store(false, Ordering::SeqCst);
    api.tick(1).await;
    let events = api.events(0).await;
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e["seq"].as_u64().unwrap(), i as u64 + 1);
    }
    server.shutdown().await;
}

#[tokio::test]
async fn restart_recovers_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = server_config(cluster(&[1, 1, 1]), 5);
    cfg.data_dir = Some(dir.path().to_path_buf());

    let server = Server::start(cfg.clone()).await.unwrap();
    let api = Api::new(&server);
    let t = api.anonymous_token().await;
    api.power_on_all().await;
    api.request(&t, 2, 1).await;
    let blocks = api.allocate_and_activate().await;
    api.tick(5).await;
    let (_, nodes_before) = api.admin_get("/admin/nodes").await;
    let events_before = api.events(0).await;
    server.shutdown().await;

    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let log = parse_log(&text).unwrap();
    assert_eq!(log.len(), events_before.len());
    let rebuilt = replay(cfg.cluster.clone(), cfg.seed, &log).unwrap();
    assert_eq!(rebuilt.tick(), 8);

    let server = Server::start(cfg.clone()).await.unwrap();
    let api = Api::new(&server);
    let (_, nodes_after) = api.admin_get("/admin/nodes").await;
    assert_eq!(nodes_before, nodes_after);
    let (status, _) = api.user_get(&format!("/blocks/{}", blocks[0]), &t).await;
    assert_eq!(status, StatusCode::OK);
    // the next token continues the seeded stream instead of repeating it
    let t2 = api.anonymous_token().await;
    assert_ne!(t, t2);
    server.shutdown().await;

    std::fs::write(dir.path().join(LOG_FILE), format!("{text}{{garbage\n")).unwrap();
    let err = Server::start(cfg).await.err().expect("corrupt log refused");
    assert!(err.to_string().contains("corrupt log"), "{err}");
}

#[tokio::test]
async fn realtime_mode_ticks_by_itself() {
    let mut c = cluster(&[1]);
    c.tick_seconds = 0.02;
    let mut cfg = server_config(c, 1);
    cfg.mode = Mode::Realtime;
    let server = Server::start(cfg).await.unwrap();
    let api = Api::new(&server);
    let (status, v) = api.admin_post("/admin/tick", json!({ "n": 1 })).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "NotSimMode"));
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (_, s) = api.send(Method::GET, "/status", None, false, None).await;
    assert!(s["tick"].as_u64().unwrap() >= 3, "{s}");
    assert_eq!(s["mode"], "realtime");
    server.shutdown().await;
}

#[tokio::test]
async fn auto_mode_activates_after_ticks() {
    let mut c = cluster(&[1, 1]);
    c.allocation_mode = AllocationMode::Auto;
    let server = Server::start(server_config(c, 1)).await.unwrap();
    let api = Api::new(&server);
    let t = api.anonymous_token().await;
    let (_, r) = api.request(&t, 2, 1).await;
    let id = r["request_id"].as_u64().unwrap();
    api.tick(1).await;
    let (_, v) = api.user_get(&format!("/requests/{id}"), &t).await;
    assert_eq!(v["status"], "Allocated", "{v}");
    let b = v["block_id"].as_u64().unwrap();
    api.tick(3).await;
    let (_, block) = api.user_get(&format!("/blocks/{b}"), &t).await;
    assert_eq!(block["state"], "Active");
    let events = api.events(0).await;
    let plan = events.iter().find(|e| e["kind"] == "PlanProduced").unwrap();
    assert_eq!(plan["payload"]["trigger"], "auto");
    server.shutdown().await;
}

async fn read_sse(resp: &mut reqwest::Response, want: usize, kind: &str) -> Vec<Value> {
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < want {
        let chunk = tokio::time::timeout(Duration::from_secs(5), resp.chunk())
            .await
            .expect("stream stalled")
            .unwrap()
            .expect("stream open");
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut event = "";
            let mut data = String::new();
            for line in block.lines() {
                if let Some(e) = line.strip_prefix("event:") {
                    event = e.trim();
                } else if let Some(d) = line.strip_prefix("data:") {
                    data.push_str(d.trim_start());
                }
            }
            if event == kind {
                out.push(serde_json::from_str(&data).unwrap());
            }
        }
    }
    out
}

#[tokio::test]
async fn telemetry_streams_one_frame_per_tick() {
    let (server, api) = start(&[1, 1]).await;
    let mut resp = api
        .http
        .get(format!("{}/admin/telemetry?scope=nodes", api.base))
        .header("X-Admin-Secret", common::SECRET)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let first = read_sse(&mut resp, 1, "tick").await;
    assert_eq!(first[0]["tick"], 0);
    api.tick(3).await;
    let frames = read_sse(&mut resp, 3, "tick").await;
    let ticks: Vec<u64> = frames.iter().map(|f| f["tick"].as_u64().unwrap()).collect();
    assert_eq!(ticks, [1, 2, 3]);
    assert_eq!(frames[0]["nodes"].as_array().unwrap().len(), 2);
    assert_eq!(frames[0]["overheat_trip_c"], 70.0);

    let mut events = api
        .http
        .get(format!("{}/admin/telemetry?scope=events&since=0", api.base))
        .header("X-Admin-Secret", common::SECRET)
        .send()
        .await
        .unwrap();
    let backlog = read_sse(&mut events, 3, "log").await;
    assert_eq!(backlog[0]["seq"], 1);
    api.anonymous_token().await;
    let live = read_sse(&mut events, 1, "log").await;
    assert_eq!(live[0]["kind"], "TokenIssued");
    assert_eq!(live[0]["seq"], 4);

    let (status, v) = api.admin_get("/admin/telemetry?scope=weather").await;
    assert_eq!((status, code(&v)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    drop(resp);
    drop(events);
    server.shutdown().await;
}

#[tokio::test]
async fn public_routes() {
    let (server, api) = start(&[1]).await;
    let (status, v) = api.send(Method::GET, "/limits", None, false, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["max_nodes_anonymous"], 3);
    assert_eq!(v["max_lease_hours_anonymous"], 72);
    let (status, v) = api.send(Method::GET, "/nowhere", None, false, None).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "NotFound"));
    server.shutdown().await;
}

#[tokio::test]
async fn serves_console_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let mut cfg = server_config(cluster(&[1]), 1);
    cfg.console_dir = Some(dir.path().to_path_buf());
    let server = Server::start(cfg).await.unwrap();
    let body = reqwest::get(format!("http://{}/", server.addr()))
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert!(body.contains("console"));
    let (status, _) = Api::new(&server)
        .send(Method::GET, "/limits", None, false, None)
        .await;
    assert_eq!(status, StatusCode::OK);
    server.shutdown().await;
}
