//! Routes under `/api/v1`.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, BoxStream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use pubcluster_core::allocator::AllocationPlan;
use pubcluster_core::auth::{Actor, Role, Token};
use pubcluster_core::domain::{NodeSpec, MAX_CLASS_LEVEL};
use pubcluster_core::registry::{NodeRecord, PowerTarget};
use pubcluster_core::thermal::{AlarmFlags, Fault, FaultKind};
use pubcluster_core::world::{
    Block, Command, Job, PlanEntry, Reply, RequestEntry, RequestStatus, Submission, Trigger, World,
};
use pubcluster_core::{BlockId, Event, JobId, NodeId, PlanId, RequestId};

use crate::config::Mode;
use crate::error::ApiError;
use crate::gateway::{Handle, TelemetryFrame};

pub const AUTH_HEADER: &str = "x-auth-token";
pub const SECRET_HEADER: &str = "x-admin-secret";

#[derive(Clone)]
pub struct AppState {
    pub gateway: Handle,
    pub admin_secret: Option<Arc<str>>,
}

/// JSON body whose rejections use the error envelope.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e: JsonRejection| ApiError::invalid(e.body_text()))
    }
}

/// Path parameters whose rejections use the error envelope.
pub struct Params<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned + Send> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        Path::<T>::from_request_parts(parts, state)
            .await
            .map(|Path(v)| Params(v))
            .map_err(|e: PathRejection| ApiError::invalid(e.body_text()))
    }
}

pub struct Q<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Q<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Q(v))
            .map_err(|e: QueryRejection| ApiError::invalid(e.body_text()))
    }
}

/// Who is calling.
enum Caller {
    Admin,
    User(Token),
}

impl Caller {
    fn actor(&self) -> Actor {
        match self {
            Caller::Admin => Actor::Admin,
            Caller::User(t) => Actor::User(t.value.clone()),
        }
    }

    fn may_see(&self, owner: &str) -> bool {
        match self {
            Caller::Admin => true,
            Caller::User(t) => t.value == owner,
        }
    }
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl AppState {
    fn caller(&self, headers: &HeaderMap, world: &World) -> Option<Caller> {
        if let (Some(secret), Some(given)) = (&self.admin_secret, header(headers, SECRET_HEADER)) {
            if constant_time_eq(secret.as_bytes(), given.as_bytes()) {
                return Some(Caller::Admin);
            }
        }
        let token = world.token(header(headers, AUTH_HEADER)?)?;
        Some(if token.role == Role::Admin {
            Caller::Admin
        } else {
            Caller::User(token.clone())
        })
    }

    fn require_user(&self, headers: &HeaderMap) -> Result<(Arc<World>, Caller), ApiError> {
        let world = self.gateway.world();
        let caller = self.caller(headers, &world).ok_or_else(ApiError::unauthorized)?;
        Ok((world, caller))
    }

    fn require_admin(&self, headers: &HeaderMap) -> Result<Arc<World>, ApiError> {
        match self.require_user(headers)? {
            (world, Caller::Admin) => Ok(world),
            _ => Err(ApiError::unauthorized()),
        }
    }
}

// ---- views ----

#[derive(Debug, Serialize, Deserialize)]
pub struct TokenView {
    pub token: String,
    pub role: Role,
    pub issued_at_tick: u64,
}

impl From<Token> for TokenView {
    fn from(t: Token) -> Self {
        Self {
            token: t.value,
            role: t.role,
            issued_at_tick: t.issued_at_tick,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RequestView {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub status: RequestStatus,
    pub nodes: u32,
    pub min_class: u8,
    pub duration_hours: u32,
    pub priority: u8,
    pub submitted_at_tick: u64,
}

impl From<&RequestEntry> for RequestView {
    fn from(e: &RequestEntry) -> Self {
        Self {
            request_id: e.request.request_id,
            status: e.status.clone(),
            nodes: e.request.node_count,
            min_class: e.request.min_class.level,
            duration_hours: e.request.duration_hours,
            priority: e.request.priority,
            submitted_at_tick: e.submitted_at_tick,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlockView {
    #[serde(flatten)]
    pub block: Block,
    pub jobs: Vec<JobId>,
}

fn block_view(world: &World, block: &Block) -> BlockView {
    BlockView {
        block: block.clone(),
        jobs: world
            .jobs()
            .filter(|j| j.block_id == block.block_id)
            .map(|j| j.job_id)
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeView {
    #[serde(flatten)]
    pub record: NodeRecord,
    pub alarms: AlarmFlags,
    pub faults: Vec<Fault>,
}

fn node_view(world: &World, record: &NodeRecord) -> NodeView {
    let monitor = world.monitor(record.id()).cloned().unwrap_or_default();
    NodeView {
        record: record.clone(),
        alarms: monitor.flags,
        faults: monitor.faults.into_iter().filter(|f| f.active).collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanView {
    pub plan_id: Option<PlanId>,
    pub plan: AllocationPlan,
}

// ---- handlers ----

async fn issue_anonymous(State(st): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let token = st.gateway.issue_token(Role::Anonymous).await?;
    Ok((StatusCode::CREATED, Json(TokenView::from(token))))
}

#[derive(Deserialize)]
struct IssueBody {
    role: String,
}

async fn issue_any(
    State(st): State<AppState>,
    headers: HeaderMap,
    Body(body): Body<IssueBody>,
) -> Result<impl IntoResponse, ApiError> {
    st.require_admin(&headers)?;
    let role = Role::parse(&body.role)
        .ok_or_else(|| ApiError::invalid("role must be anonymous, privileged or admin"))?;
    let token = st.gateway.issue_token(role).await?;
    Ok((StatusCode::CREATED, Json(TokenView::from(token))))
}

#[derive(Deserialize)]
struct RequestBody {
    nodes: u32,
    #[serde(default)]
    min_class: u8,
    duration_hours: u32,
    #[serde(default)]
    priority: Option<u8>,
}

async fn submit_request(
    State(st): State<AppState>,
    headers: HeaderMap,
    Body(body): Body<RequestBody>,
) -> Result<impl IntoResponse, ApiError> {
    let world = st.gateway.world();
    let user = header(&headers, AUTH_HEADER)
        .and_then(|t| world.token(t))
        .ok_or_else(ApiError::unauthorized)?
        .value
        .clone();
    let outcome = st
        .gateway
        .execute(Command::SubmitRequest(Submission {
            user,
            node_count: body.nodes,
            min_class: body.min_class,
            duration_hours: body.duration_hours,
            priority: body.priority,
        }))
        .await?;
    match outcome.reply {
        Reply::Request(request_id) => Ok((
            StatusCode::CREATED,
            Json(json!({ "request_id": request_id, "status": "Pending" })),
        )),
        Reply::Rejected { request_id, error } => {
            Err(ApiError::from(error).with_details(json!({ "request_id": request_id })))
        }
        other => unreachable!("{other:?}"),
    }
}

async fn get_request(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<RequestView>, ApiError> {
    let (world, caller) = st.require_user(&headers)?;
    let entry = world
        .request(RequestId(id))
        .ok_or_else(|| ApiError::from(pubcluster_core::CommandError::UnknownRequest(RequestId(id))))?;
    if !caller.may_see(&entry.request.user_token) {
        return Err(ApiError::unauthorized());
    }
    Ok(Json(RequestView::from(entry)))
}

fn visible_block<'a>(world: &'a World, caller: &Caller, id: BlockId) -> Result<&'a Block, ApiError> {
    let block = world
        .block(id)
        .ok_or_else(|| ApiError::from(pubcluster_core::CommandError::UnknownBlock(id)))?;
    if !caller.may_see(&block.owner) {
        return Err(pubcluster_core::CommandError::NotOwner(id).into());
    }
    Ok(block)
}

async fn get_block(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<BlockView>, ApiError> {
    let (world, caller) = st.require_user(&headers)?;
    let block = visible_block(&world, &caller, BlockId(id))?;
    Ok(Json(block_view(&world, block)))
}

#[derive(Deserialize)]
struct JobBody {
    width: u32,
    duration_ticks: u64,
}

async fn submit_job(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
    Body(body): Body<JobBody>,
) -> Result<impl IntoResponse, ApiError> {
    let (_, caller) = st.require_user(&headers)?;
    let outcome = st
        .gateway
        .execute(Command::SubmitJob {
            actor: caller.actor(),
            block_id: BlockId(id),
            width: body.width,
            duration_ticks: body.duration_ticks,
        })
        .await?;
    let Reply::Job(job_id) = outcome.reply else {
        unreachable!()
    };
    let world = st.gateway.world();
    let job = world.job(job_id).expect("committed job").clone();
    Ok((StatusCode::CREATED, Json(job)))
}

async fn get_job(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params((block, job)): Params<(u64, u64)>,
) -> Result<Json<Job>, ApiError> {
    let (world, caller) = st.require_user(&headers)?;
    visible_block(&world, &caller, BlockId(block))?;
    let job = world
        .job(JobId(job))
        .filter(|j| j.block_id == BlockId(block))
        .ok_or_else(|| ApiError::from(pubcluster_core::CommandError::UnknownJob(JobId(job))))?;
    Ok(Json(job.clone()))
}

async fn release_block(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<BlockView>, ApiError> {
    let (_, caller) = st.require_user(&headers)?;
    st.gateway
        .execute(Command::ReleaseBlock {
            actor: caller.actor(),
            block_id: BlockId(id),
        })
        .await?;
    let world = st.gateway.world();
    let block = world.block(BlockId(id)).expect("committed block");
    Ok(Json(block_view(&world, block)))
}

async fn limits(State(st): State<AppState>) -> Json<Value> {
    let world = st.gateway.world();
    let c = world.config();
    Json(json!({
        "max_nodes_anonymous": c.admission.max_nodes_anonymous,
        "max_lease_hours_anonymous": c.admission.max_lease_hours_anonymous,
        "max_active_blocks_per_user": c.admission.max_active_blocks_per_user,
        "max_class_level": MAX_CLASS_LEVEL,
        "overheat_trip_c": c.thermal.overheat_trip_c,
        "tick_seconds": c.tick_seconds,
    }))
}

async fn status(State(st): State<AppState>) -> Json<Value> {
    let world = st.gateway.world();
    Json(json!({
        "tick": world.tick(),
        "next_seq": world.next_seq(),
        "mode": st.gateway.mode(),
        "allocation_mode": world.config().allocation_mode,
        "nodes": world.registry().len(),
    }))
}

async fn allocate(State(st): State<AppState>, headers: HeaderMap) -> Result<Json<PlanView>, ApiError> {
    st.require_admin(&headers)?;
    let outcome = st
        .gateway
        .execute(Command::RunAllocation {
            trigger: Trigger::Admin,
        })
        .await?;
    let Reply::Plan { plan_id, plan } = outcome.reply else {
        unreachable!()
    };
    Ok(Json(PlanView { plan_id, plan }))
}

async fn get_plan(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<PlanEntry>, ApiError> {
    let world = st.require_admin(&headers)?;
    world
        .plan(PlanId(id))
        .cloned()
        .map(Json)
        .ok_or_else(|| pubcluster_core::CommandError::UnknownPlan(PlanId(id)).into())
}

async fn activate(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<Value>, ApiError> {
    st.require_admin(&headers)?;
    let outcome = st.gateway.execute(Command::ActivatePlan { plan_id: PlanId(id) }).await?;
    let Reply::Blocks(blocks) = outcome.reply else {
        unreachable!()
    };
    Ok(Json(json!({ "plan_id": id, "block_ids": blocks })))
}

async fn deny(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<RequestView>, ApiError> {
    st.require_admin(&headers)?;
    st.gateway
        .execute(Command::DenyRequest {
            request_id: RequestId(id),
        })
        .await?;
    let world = st.gateway.world();
    Ok(Json(RequestView::from(world.request(RequestId(id)).expect("committed"))))
}

async fn list_requests(
    State(st): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<Vec<RequestView>>, ApiError> {
    let world = st.require_admin(&headers)?;
    Ok(Json(world.requests().map(RequestView::from).collect()))
}

async fn list_blocks(
    State(st): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<Vec<BlockView>>, ApiError> {
    let world = st.require_admin(&headers)?;
    Ok(Json(world.blocks().map(|b| block_view(&world, b)).collect()))
}

async fn list_nodes(State(st): State<AppState>, headers: HeaderMap) -> Result<Json<Vec<NodeView>>, ApiError> {
    let world = st.require_admin(&headers)?;
    Ok(Json(world.registry().records().map(|r| node_view(&world, r)).collect()))
}

async fn register_node(
    State(st): State<AppState>,
    headers: HeaderMap,
    Body(spec): Body<NodeSpec>,
) -> Result<impl IntoResponse, ApiError> {
    st.require_admin(&headers)?;
    let id = spec.node_id;
    st.gateway.execute(Command::RegisterNode { spec }).await?;
    let world = st.gateway.world();
    let record = world.node(id).expect("committed node");
    Ok((StatusCode::CREATED, Json(node_view(&world, record))))
}

#[derive(Deserialize)]
struct PowerBody {
    #[serde(alias = "desired", alias = "state")]
    power: PowerTarget,
    #[serde(default)]
    forced: bool,
}

async fn power(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
    Body(body): Body<PowerBody>,
) -> Result<Json<NodeView>, ApiError> {
    st.require_admin(&headers)?;
    st.gateway
        .execute(Command::PowerCommand {
            node_id: NodeId(id),
            desired: body.power,
            forced: body.forced,
        })
        .await?;
    let world = st.gateway.world();
    Ok(Json(node_view(&world, world.node(NodeId(id)).expect("known node"))))
}

async fn reset(
    State(st): State<AppState>,
    headers: HeaderMap,
    Params(id): Params<u64>,
) -> Result<Json<NodeView>, ApiError> {
    st.require_admin(&headers)?;
    st.gateway.execute(Command::ResetNode { node_id: NodeId(id) }).await?;
    let world = st.gateway.world();
    Ok(Json(node_view(&world, world.node(NodeId(id)).expect("known node"))))
}

#[derive(Deserialize)]
struct FaultBody {
    node_id: NodeId,
    kind: String,
    #[serde(default)]
    param: Option<f64>,
}

fn fault_kind(kind: &str, param: Option<f64>) -> Result<FaultKind, ApiError> {
    match kind {
        "fan_degraded" | "FanDegraded" => Ok(FaultKind::FanDegraded {
            cooling_coeff: param.ok_or_else(|| {
                ApiError::invalid("fan_degraded needs param (the degraded cooling coefficient)")
            })?,
        }),
        "node_failure" | "NodeFailure" => Ok(FaultKind::NodeFailure),
        other => Err(ApiError::invalid(format!(
            "unknown fault kind {other}; expected fan_degraded or node_failure"
        ))),
    }
}

async fn inject_fault(
    State(st): State<AppState>,
    headers: HeaderMap,
    Body(body): Body<FaultBody>,
) -> Result<impl IntoResponse, ApiError> {
    st.require_admin(&headers)?;
    let kind = fault_kind(&body.kind, body.param)?;
    st.gateway
        .execute(Command::InjectFault {
            node_id: body.node_id,
            kind,
        })
        .await?;
    let world = st.gateway.world();
    Ok((
        StatusCode::CREATED,
        Json(node_view(&world, world.node(body.node_id).expect("known node"))),
    ))
}

#[derive(Deserialize)]
struct TickBody {
    #[serde(default = "one")]
    n: u64,
}

fn one() -> u64 {
    1
}

async fn tick(
    State(st): State<AppState>,
    headers: HeaderMap,
    Body(body): Body<TickBody>,
) -> Result<Json<Value>, ApiError> {
    st.require_admin(&headers)?;
    if st.gateway.mode() != Mode::Sim {
        return Err(ApiError::not_sim_mode());
    }
    let outcome = st.gateway.execute(Command::Tick { n: body.n }).await?;
    let Reply::Ticked { tick } = outcome.reply else {
        unreachable!()
    };
    Ok(Json(json!({ "tick": tick, "events": outcome.events })))
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn events(
    State(st): State<AppState>,
    headers: HeaderMap,
    Q(q): Q<SinceQuery>,
) -> Result<Json<Vec<Event>>, ApiError> {
    st.require_admin(&headers)?;
    Ok(Json(st.gateway.events_since(q.since)))
}

#[derive(Deserialize)]
struct TelemetryQuery {
    #[serde(default)]
    scope: Option<String>,
    #[serde(default)]
    since: Option<u64>,
}

type SseStream = BoxStream<'static, Result<SseEvent, Infallible>>;

fn frame_event(frame: &TelemetryFrame) -> SseEvent {
    SseEvent::default()
        .event("tick")
        .json_data(frame)
        .expect("frame serializes")
}

fn log_event(e: &Event) -> SseEvent {
    SseEvent::default()
        .event("log")
        .id(e.seq.to_string())
        .data(e.to_json_line())
}

async fn telemetry(
    State(st): State<AppState>,
    headers: HeaderMap,
    Q(q): Q<TelemetryQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let world = st.require_admin(&headers)?;
    let stream: SseStream = match q.scope.as_deref().unwrap_or("nodes") {
        "nodes" => {
            let rx = st.gateway.subscribe_frames();
            let first = frame_event(&TelemetryFrame::of(&world));
            let live = stream::unfold(rx, |mut rx| async move {
                loop {
                    match rx.recv().await {
                        Ok(f) => return Some((Ok(frame_event(&f)), rx)),
                        Err(RecvError::Lagged(_)) => continue,
                        Err(RecvError::Closed) => return None,
                    }
                }
            });
            stream::once(async move { Ok(first) }).chain(live).boxed()
        }
        "events" => {
            // subscribe before reading the backlog so nothing falls between
            let rx = st.gateway.subscribe_events();
            let since = q.since.unwrap_or_else(|| st.gateway.last_seq());
            let backlog = st.gateway.events_since(since);
            let last = backlog.last().map_or(since, |e| e.seq);
            let head = stream::iter(backlog.into_iter().map(|e| Ok(log_event(&e))));
            let live = stream::unfold((rx, last), |(mut rx, last)| async move {
                loop {
                    match rx.recv().await {
                        Ok(e) if e.seq <= last => continue,
                        Ok(e) => return Some((Ok(log_event(&e)), (rx, e.seq))),
                        Err(RecvError::Lagged(_)) => continue,
                        Err(RecvError::Closed) => return None,
                    }
                }
            });
            head.chain(live).boxed()
        }
        other => {
            return Err(ApiError::invalid(format!(
                "unknown telemetry scope {other}; expected nodes or events"
            )))
        }
    };
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", "method not allowed on this route")
}

pub fn api_routes() -> Router<AppState> {
    Router::new()
        .route("/tokens", post(issue_anonymous))
        .route("/requests", post(submit_request))
        .route("/requests/{id}", get(get_request))
        .route("/blocks/{id}", get(get_block))
        .route("/blocks/{id}/jobs", post(submit_job))
        .route("/blocks/{id}/jobs/{jid}", get(get_job))
        .route("/blocks/{id}/release", post(release_block))
        .route("/limits", get(limits))
        .route("/status", get(status))
        .route("/admin/tokens", post(issue_any))
        .route("/admin/allocate", post(allocate))
        .route("/admin/plans/{id}", get(get_plan))
        .route("/admin/plans/{id}/activate", post(activate))
        .route("/admin/requests", get(list_requests))
        .route("/admin/requests/{id}/deny", post(deny))
        .route("/admin/blocks", get(list_blocks))
        .route("/admin/nodes", get(list_nodes).post(register_node))
        .route("/admin/nodes/{id}/power", post(power))
        .route("/admin/nodes/{id}/reset", post(reset))
        .route("/admin/faults", post(inject_fault))
        .route("/admin/tick", post(tick))
        .route("/admin/events", get(events))
        .route("/admin/telemetry", get(telemetry))
        .method_not_allowed_fallback(method_not_allowed)
        .fallback(not_found)
}

pub fn router(state: AppState, console_dir: Option<&std::path::Path>) -> Router {
    let app = Router::new().nest("/api/v1", api_routes());
    let app = match console_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(
                tower_http::services::ServeDir::new(dir)
                    .fallback(tower_http::services::ServeFile::new(index)),
            )
        }
        None => app.fallback(not_found),
    };
    app.with_state(state)
}
