//! Operator client. Each subcommand is one API call; the only logic here
//! is argument parsing and output formatting.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "pubcluster", version, about = "Operate a pubcluster gateway")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Gateway address, `host:port` or a full URL.
    #[arg(long, global = true, env = "PUBCLUSTER_ADDR", default_value = "127.0.0.1:8080")]
    pub endpoint: String,
    #[arg(long, global = true, env = "PUBCLUSTER_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, global = true, env = "PUBCLUSTER_ADMIN_SECRET", hide_env_values = true)]
    pub admin_secret: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Human)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Human,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the gateway in the foreground.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
    },
    #[command(subcommand)]
    Node(NodeCmd),
    #[command(subcommand)]
    Request(RequestCmd),
    #[command(subcommand)]
    Alloc(AllocCmd),
    #[command(subcommand)]
    Fault(FaultCmd),
    /// Advance simulated time (sim mode only).
    Tick { n: u64 },
    #[command(subcommand)]
    Events(EventsCmd),
    #[command(subcommand)]
    Token(TokenCmd),
}

#[derive(Debug, Subcommand)]
pub enum NodeCmd {
    List,
    #[command(group(clap::ArgGroup::new("target").required(true).args(["on", "off"])))]
    Power {
        id: u64,
        #[arg(long)]
        on: bool,
        #[arg(long)]
        off: bool,
        #[arg(long)]
        forced: bool,
    },
    Reset { id: u64 },
}

#[derive(Debug, Subcommand)]
pub enum RequestCmd {
    List,
    Deny { id: u64 },
}

#[derive(Debug, Subcommand)]
pub enum AllocCmd {
    Run,
    Activate { plan_id: u64 },
}

#[derive(Debug, Subcommand)]
pub enum FaultCmd {
    /// Kinds: fan_degraded (param = cooling factor) or node_failure.
    Inject {
        node: u64,
        kind: String,
        param: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EventsCmd {
    Tail {
        #[arg(long, default_value_t = 0)]
        since: u64,
        /// Keep the connection open and print events as they commit.
        #[arg(long)]
        follow: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenCmd {
    New {
        #[arg(long, default_value = "anonymous")]
        role: String,
    },
}

enum Failure {
    Api { code: String, message: String, body: Value },
    Transport(String),
}

type Outcome = Result<(), Failure>;

struct Ctx<'a> {
    http: Client,
    base: String,
    global: &'a Global,
}

impl Ctx<'_> {
    fn request(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        let mut req = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(t) = &self.global.token {
            req = req.header("X-Auth-Token", t);
        }
        if let Some(s) = &self.global.admin_secret {
            req = req.header("X-Admin-Secret", s);
        }
        req
    }

    fn call(&self, req: RequestBuilder) -> Result<Value, Failure> {
        let resp = req.send().map_err(|e| Failure::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transport(e.to_string()))?;
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
        if status.is_success() {
            return Ok(body);
        }
        Err(Failure::Api {
            code: body["code"].as_str().unwrap_or("HttpError").to_string(),
            message: body["message"].as_str().unwrap_or(status.as_str()).to_string(),
            body,
        })
    }

    fn get(&self, path: &str) -> Result<Value, Failure> {
        self.call(self.request(reqwest::Method::GET, path))
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, Failure> {
        self.call(self.request(reqwest::Method::POST, path).json(&body))
    }
}

/// API base from an endpoint flag value.
pub fn api_base(endpoint: &str) -> String {
    let url = if endpoint.contains("://") {
        endpoint.trim_end_matches('/').to_string()
    } else {
        format!("http://{}", endpoint.trim_end_matches('/'))
    };
    if url.ends_with("/api/v1") {
        url
    } else {
        format!("{url}/api/v1")
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    if let Cmd::Serve { config, seed, mode } = &cli.command {
        return serve(config.clone(), *seed, mode.as_deref(), err);
    }
    let ctx = Ctx {
        http: Client::builder().timeout(None).build().expect("http client"),
        base: api_base(&cli.global.endpoint),
        global: &cli.global,
    };
    let printer = Printer {
        json: cli.global.output == Output::Json,
    };
    match dispatch(&ctx, &cli.command, &printer, out) {
        Ok(()) => 0,
        Err(Failure::Api { code, message, body }) => {
            if printer.json {
                let _ = writeln!(out, "{body}");
            }
            let _ = writeln!(err, "error: {code}: {message}");
            1
        }
        Err(Failure::Transport(m)) => {
            let _ = writeln!(err, "error: Transport: {m}");
            1
        }
    }
}

fn serve(config: Option<PathBuf>, seed: Option<u64>, mode: Option<&str>, err: &mut dyn Write) -> i32 {
    let mut cfg = match pubcluster_server::ServerConfig::from_env(config) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 1;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        match pubcluster_server::Mode::parse(m) {
            Some(m) => cfg.mode = m,
            None => {
                let _ = writeln!(err, "error: --mode must be sim or realtime");
                return 2;
            }
        }
    }
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(pubcluster_server::serve(cfg)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

struct Printer {
    json: bool,
}

impl Printer {
    /// One JSON document per line in json mode; `human` otherwise.
    fn one(&self, out: &mut dyn Write, v: &Value, human: impl FnOnce(&Value) -> String) {
        let _ = if self.json {
            writeln!(out, "{v}")
        } else {
            writeln!(out, "{}", human(v))
        };
    }

    fn many(&self, out: &mut dyn Write, items: &[Value], header: &str, row: impl Fn(&Value) -> String) {
        if self.json {
            for v in items {
                let _ = writeln!(out, "{v}");
            }
            return;
        }
        let _ = writeln!(out, "{header}");
        for v in items {
            let _ = writeln!(out, "{}", row(v));
        }
    }
}

/// `"Idle"` or `{"Booting": 2}` as `Booting(2)`.
fn state(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(m) if m.len() == 1 => {
            let (k, inner) = m.iter().next().unwrap();
            format!("{k}({inner})")
        }
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn opt(v: &Value) -> String {
    if v.is_null() {
        "-".into()
    } else {
        v.to_string()
    }
}

fn items(v: Value) -> Vec<Value> {
    match v {
        Value::Array(a) => a,
        other => vec![other],
    }
}

fn event_line(e: &Value) -> String {
    format!("#{} t={} {} {}", e["seq"], e["tick"], state(&e["kind"]), e["payload"])
}

fn dispatch(ctx: &Ctx, cmd: &Cmd, p: &Printer, out: &mut dyn Write) -> Outcome {
    match cmd {
        Cmd::Serve { .. } => unreachable!("handled before dispatch"),
        Cmd::Node(NodeCmd::List) => {
            let nodes = items(ctx.get("/admin/nodes")?);
            p.many(out, &nodes, "ID\tCLASS\tCTRL\tPOWER\tTEMP_C\tBLOCK", |n| {
                format!(
                    "{}\t{}\t{}\t{}\t{:.2}\t{}",
                    n["spec"]["node_id"],
                    n["spec"]["class"]["level"],
                    n["spec"]["controller_id"],
                    state(&n["power"]),
                    n["temperature_c"].as_f64().unwrap_or(f64::NAN),
                    opt(&n["block_id"]),
                )
            });
        }
        Cmd::Node(NodeCmd::Power { id, on, forced, .. }) => {
            let body = json!({ "power": if *on { "on" } else { "off" }, "forced": forced });
            let v = ctx.post(&format!("/admin/nodes/{id}/power"), body)?;
            p.one(out, &v, |v| format!("node {id}: {}", state(&v["power"])));
        }
        Cmd::Node(NodeCmd::Reset { id }) => {
            let v = ctx.post(&format!("/admin/nodes/{id}/reset"), json!({}))?;
            p.one(out, &v, |v| format!("node {id}: {}", state(&v["power"])));
        }
        Cmd::Request(RequestCmd::List) => {
            let reqs = items(ctx.get("/admin/requests")?);
            p.many(out, &reqs, "ID\tSTATUS\tNODES\tCLASS\tHOURS\tPRIO", |r| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    r["request_id"],
                    state(&r["status"]),
                    r["nodes"],
                    r["min_class"],
                    r["duration_hours"],
                    r["priority"],
                )
            });
        }
        Cmd::Request(RequestCmd::Deny { id }) => {
            let v = ctx.post(&format!("/admin/requests/{id}/deny"), json!({}))?;
            p.one(out, &v, |_| format!("request {id} denied"));
        }
        Cmd::Alloc(AllocCmd::Run) => {
            let v = ctx.post("/admin/allocate", json!({}))?;
            p.one(out, &v, |v| {
                let assignments = v["plan"]["assignments"].as_object();
                match (v["plan_id"].as_u64(), assignments) {
                    (Some(id), Some(a)) if !a.is_empty() => {
                        let mut s = format!("plan {id} (fitness {})", v["plan"]["fitness"]);
                        for (req, nodes) in a {
                            s.push_str(&format!("\n  request {req} -> nodes {nodes}"));
                        }
                        s
                    }
                    (Some(id), _) => format!("plan {id} is empty: nothing could be placed"),
                    (None, _) => "empty plan: no pending requests".into(),
                }
            });
        }
        Cmd::Alloc(AllocCmd::Activate { plan_id }) => {
            let v = ctx.post(&format!("/admin/plans/{plan_id}/activate"), json!({}))?;
            p.one(out, &v, |v| format!("plan {plan_id} activated: blocks {}", v["block_ids"]));
        }
        Cmd::Fault(FaultCmd::Inject { node, kind, param }) => {
            let v = ctx.post("/admin/faults", json!({ "node_id": node, "kind": kind, "param": param }))?;
            p.one(out, &v, |_| format!("fault {kind} injected on node {node}"));
        }
        Cmd::Tick { n } => {
            let v = ctx.post("/admin/tick", json!({ "n": n }))?;
            let events = v["events"].as_array().cloned().unwrap_or_default();
            if p.json {
                p.many(out, &events, "", |_| String::new());
            } else {
                let _ = writeln!(out, "tick {} ({} events)", v["tick"], events.len());
            }
        }
        Cmd::Events(EventsCmd::Tail { since, follow: false }) => {
            let events = items(ctx.get(&format!("/admin/events?since={since}"))?);
            for e in &events {
                p.one(out, e, event_line);
            }
        }
        Cmd::Events(EventsCmd::Tail { since, follow: true }) => {
            let resp = ctx
                .request(reqwest::Method::GET, &format!("/admin/telemetry?scope=events&since={since}"))
                .send()
                .map_err(|e| Failure::Transport(e.to_string()))?;
            if !resp.status().is_success() {
                let status = resp.status();
                let body: Value = resp.json().unwrap_or(Value::Null);
                return Err(Failure::Api {
                    code: body["code"].as_str().unwrap_or("HttpError").to_string(),
                    message: body["message"].as_str().unwrap_or(status.as_str()).to_string(),
                    body,
                });
            }
            for line in BufReader::new(resp).lines() {
                let line = line.map_err(|e| Failure::Transport(e.to_string()))?;
                if let Some(data) = line.strip_prefix("data:") {
                    if let Ok(e) = serde_json::from_str::<Value>(data.trim_start()) {
                        p.one(out, &e, event_line);
                        let _ = out.flush();
                    }
                }
            }
        }
        Cmd::Token(TokenCmd::New { role }) => {
            let v = if role == "anonymous" {
                ctx.post("/tokens", Value::Null)?
            } else {
                ctx.post("/admin/tokens", json!({ "role": role }))?
            };
            p.one(out, &v, |v| format!("{} ({})", v["token"].as_str().unwrap_or_default(), state(&v["role"])));
        }
    }
    Ok(())
}
