#![allow(dead_code)]

use pubcluster_core::domain::{ClusterConfig, NodeSpec};
use pubcluster_server::{ServerConfig, Server};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

pub const SECRET: &str = "s3cret";

pub fn cluster(levels: &[u8]) -> ClusterConfig {
    ClusterConfig::with_nodes(
        levels
            .iter()
            .enumerate()
            .map(|(i, &l)| NodeSpec::new(i as u64 + 1, l, 1))
            .collect(),
    )
}

pub fn server_config(cluster: ClusterConfig, seed: u64) -> ServerConfig {
    let mut cfg = ServerConfig::new(cluster, seed);
    cfg.addr = "127.0.0.1:0".parse().unwrap();
    cfg.admin_secret = Some(SECRET.into());
    cfg
}

pub struct Api {
    pub base: String,
    pub http: Client,
}

impl Api {
    pub fn new(server: &Server) -> Self {
        Self {
            base: server.api_url(),
            http: Client::new(),
        }
    }

    pub async fn send(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        admin: bool,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let mut req = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(t) = token {
            req = req.header("X-Auth-Token", t);
        }
        if admin {
            req = req.header("X-Admin-Secret", SECRET);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.expect("request sent");
        let status = resp.status();
        let text = resp.text().await.unwrap();
        let value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, value)
    }

    pub async fn admin_post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.send(Method::POST, path, None, true, Some(body)).await
    }

    pub async fn admin_get(&self, path: &str) -> (StatusCode, Value) {
        self.send(Method::GET, path, None, true, None).await
    }

    pub async fn user_post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.send(Method::POST, path, Some(token), false, Some(body)).await
    }

    pub async fn user_get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.send(Method::GET, path, Some(token), false, None).await
    }

    pub async fn anonymous_token(&self) -> String {
        let (status, v) = self.send(Method::POST, "/tokens", None, false, None).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["token"].as_str().unwrap().to_string()
    }

    pub async fn tick(&self, n: u64) {
        let (status, v) = self.admin_post("/admin/tick", json!({ "n": n })).await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }

    pub async fn power_on_all(&self) {
        let (_, nodes) = self.admin_get("/admin/nodes").await;
        for n in nodes.as_array().unwrap() {
            let id = n["spec"]["node_id"].as_u64().unwrap();
            let (status, v) = self
                .admin_post(&format!("/admin/nodes/{id}/power"), json!({ "power": "on" }))
                .await;
            assert_eq!(status, StatusCode::OK, "{v}");
        }
        self.tick(3).await;
    }

    pub async fn request(&self, token: &str, nodes: u32, hours: u32) -> (StatusCode, Value) {
        self.user_post(
            "/requests",
            token,
            json!({ "nodes": nodes, "min_class": 0, "duration_hours": hours }),
        )
        .await
    }

    /// Allocates and activates everything pending; returns new block ids.
    pub async fn allocate_and_activate(&self) -> Vec<u64> {
        let (status, plan) = self.admin_post("/admin/allocate", json!({})).await;
        assert_eq!(status, StatusCode::OK, "{plan}");
        let id = plan["plan_id"].as_u64().expect("a plan was produced");
        let (status, v) = self
            .admin_post(&format!("/admin/plans/{id}/activate"), json!({}))
            .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        v["block_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b.as_u64().unwrap())
            .collect()
    }

    pub async fn events(&self, since: u64) -> Vec<Value> {
        let (status, v) = self.admin_get(&format!("/admin/events?since={since}")).await;
        assert_eq!(status, StatusCode::OK);
        v.as_array().unwrap().clone()
    }
}
