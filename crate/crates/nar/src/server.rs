//! HTTP/WebSocket render service.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use futures_util::{SinkExt, StreamExt};
use nar_core::gsplat::{build_splats, render_gsplat, SplatSet};
use nar_core::msr::rasterize;
use nar_core::{CameraPose, Intrinsics, PointCloud, SplatStyle, StreamSelection, Tensor};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::checkpoint::load_checkpoint;
use crate::dataset::default_style;
use crate::error::{Error, Result};
use crate::narpc::load_pointcloud;
use crate::planes::{encode_planes, encode_png, Planes};
use crate::render::{Renderer, StageTimings};

pub const SPARSITIES: [usize; 4] = [1, 2, 4, 10];
pub const MAX_SIDE: u32 = 4096;
/// Default cap on `points × pixels` for reference splatting.
pub const GSPLAT_MAX_WORK: u64 = 2_000_000_000;
const STATS_WINDOW: usize = 128;

#[derive(Debug, Clone, Args, Default)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    /// `ID=POINTCLOUD[,CHECKPOINT]`, repeatable.
    #[arg(long = "scene")]
    pub scenes: Vec<String>,
    #[arg(long)]
    pub gsplat_max_work: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct ServeFile {
    port: Option<u16>,
    host: Option<String>,
    gsplat_max_work: Option<u64>,
    scenes: Vec<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub pointcloud: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl std::str::FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, rest) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("scene `{s}` is not ID=POINTCLOUD[,CHECKPOINT]")))?;
        let (pc, ck) = match rest.split_once(',') {
            Some((a, b)) => (a, Some(PathBuf::from(b))),
            None => (rest, None),
        };
        if id.is_empty() || pc.is_empty() {
            return Err(Error::InvalidArgument(format!("scene `{s}` has an empty id or path")));
        }
        Ok(SceneSpec { id: id.into(), pointcloud: pc.into(), checkpoint: ck })
    }
}

struct Variant {
    factor: usize,
    pc: PointCloud,
    splats: OnceLock<std::result::Result<SplatSet, String>>,
}

pub struct Scene {
    id: String,
    variants: Vec<Variant>,
    renderer: Option<Renderer>,
    selection: StreamSelection,
    style: SplatStyle,
}

impl Scene {
    pub fn new(id: impl Into<String>, pc: PointCloud, renderer: Option<Renderer>) -> Result<Self> {
        let id = id.into();
        if pc.is_empty() {
            return Err(Error::InvalidArgument(format!("scene `{id}` has no points")));
        }
        let selection = match &renderer {
            Some(r) => {
                let names = r.meta.selection.channel_names(Some(&pc)).map_err(|e| {
                    Error::StreamMismatch(format!("scene `{id}`: point cloud lacks the model's streams: {e}"))
                })?;
                if names != r.meta.channel_names {
                    return Err(Error::StreamMismatch(format!(
                        "scene `{id}`: model channels {:?}, point cloud yields {names:?}",
                        r.meta.channel_names
                    )));
                }
                r.meta.selection.clone()
            }
            None => StreamSelection::rgb_only(),
        };
        let style = default_style(&pc);
        let variants = SPARSITIES
            .iter()
            .map(|&factor| Ok(Variant { factor, pc: pc.subsample(factor)?, splats: OnceLock::new() }))
            .collect::<Result<_>>()?;
        Ok(Scene { id, variants, renderer, selection, style })
    }

    pub fn load(spec: &SceneSpec) -> Result<Self> {
        let pc = load_pointcloud(&spec.pointcloud)?;
        let renderer = match &spec.checkpoint {
            Some(p) => Some(Renderer::new(&load_checkpoint(p)?)?),
            None => None,
        };
        Scene::new(spec.id.clone(), pc, renderer)
    }

    fn variant(&self, sparsity: usize) -> Option<&Variant> {
        self.variants.iter().find(|v| v.factor == sparsity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Msr,
    Neural,
    Gsplat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

fn default_side() -> u32 {
    512
}

fn default_mode() -> Mode {
    Mode::Neural
}

fn default_sparsity() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub scene: String,
    pub pose: Pose,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_sparsity")]
    pub sparsity: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LastRequest {
    pub scene: String,
    pub mode: Mode,
    pub sparsity: usize,
    pub width: u32,
    pub height: u32,
    pub points: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub requests: u64,
    pub errors: u64,
    pub by_mode: HashMap<String, u64>,
    pub by_sparsity: HashMap<String, u64>,
    pub window: usize,
    pub median: StageTimings,
    pub last: Option<LastRequest>,
}

#[derive(Default)]
struct Stats {
    requests: AtomicU64,
    errors: AtomicU64,
    mode: [AtomicU64; 3],
    sparsity: [AtomicU64; 4],
    recent: Mutex<(Vec<StageTimings>, usize, Option<LastRequest>)>,
}

impl Stats {
    fn record(&self, last: LastRequest) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.mode[last.mode as usize].fetch_add(1, Ordering::Relaxed);
        if let Some(i) = SPARSITIES.iter().position(|&s| s == last.sparsity) {
            self.sparsity[i].fetch_add(1, Ordering::Relaxed);
        }
        let mut g = self.recent.lock().unwrap_or_else(|p| p.into_inner());
        let (ring, next, slot) = &mut *g;
        if ring.len() < STATS_WINDOW {
            ring.push(last.timings);
        } else {
            ring[*next] = last.timings;
        }
        *next = (*next + 1) % STATS_WINDOW;
        *slot = Some(last);
    }

    fn report(&self) -> StatsReport {
        let g = self.recent.lock().unwrap_or_else(|p| p.into_inner());
        let by_mode = ["msr", "neural", "gsplat"]
            .iter()
            .zip(&self.mode)
            .map(|(k, v)| (k.to_string(), v.load(Ordering::Relaxed)))
            .collect();
        let by_sparsity =
            SPARSITIES.iter().zip(&self.sparsity).map(|(k, v)| (k.to_string(), v.load(Ordering::Relaxed))).collect();
        StatsReport {
            requests: self.requests.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            by_mode,
            by_sparsity,
            window: g.0.len(),
            median: StageTimings::median(&g.0),
            last: g.2.clone(),
        }
    }
}

/// Loaded scenes plus request statistics.
pub struct ServerState {
    scenes: Vec<Scene>,
    stats: Stats,
    pub gsplat_max_work: u64,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::StreamMismatch(_) | Error::Core(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize)]
pub struct SceneInfo {
    pub id: String,
    pub count: usize,
    pub streams: Vec<String>,
    pub sparsities: Vec<usize>,
    pub counts: Vec<usize>,
    pub neural: bool,
    pub channels: Vec<String>,
}

/// One finished frame.
pub struct Frame {
    pub image: Tensor<f32>,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn rgb_of(features: &Tensor<f32>, names: &[String]) -> Option<Tensor<f32>> {
    let (_, h, w) = features.chw();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in ["r", "g", "b"] {
        let i = names.iter().position(|n| n == c)?;
        out.extend_from_slice(features.plane(i));
    }
    Tensor::from_vec(&[3, h, w], out).ok()
}

impl ServerState {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("at least one scene is required".into()));
        }
        for (i, s) in scenes.iter().enumerate() {
            if scenes[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::InvalidArgument(format!("duplicate scene id `{}`", s.id)));
            }
        }
        Ok(Self { scenes, stats: Stats::default(), gsplat_max_work: GSPLAT_MAX_WORK })
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn scenes(&self) -> Vec<SceneInfo> {
        self.scenes
            .iter()
            .map(|s| {
                let full = &s.variants[0].pc;
                SceneInfo {
                    id: s.id.clone(),
                    count: full.len(),
                    streams: full.streams().iter().map(|st| st.name.clone()).collect(),
                    sparsities: s.variants.iter().map(|v| v.factor).collect(),
                    counts: s.variants.iter().map(|v| v.pc.len()).collect(),
                    neural: s.renderer.is_some(),
                    channels: s.renderer.as_ref().map(|r| r.meta.channel_names.clone()).unwrap_or_default(),
                }
            })
            .collect()
    }

    pub fn stats(&self) -> StatsReport {
        self.stats.report()
    }

    /// Validates and renders one request, recording statistics on success.
    pub fn render(&self, req: &RenderRequest) -> std::result::Result<Frame, ApiError> {
        let out = self.render_inner(req);
        if out.is_err() {
            self.stats.errors.fetch_add(1, Ordering::Relaxed);
        }
        out
    }

    fn render_inner(&self, req: &RenderRequest) -> std::result::Result<Frame, ApiError> {
        let scene = self
            .scene(&req.scene)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scene `{}`", req.scene)))?;
        if !(1..=MAX_SIDE).contains(&req.width) || !(1..=MAX_SIDE).contains(&req.height) {
            return Err(ApiError::bad(format!("width and height must be in 1..={MAX_SIDE}")));
        }
        let variant = scene
            .variant(req.sparsity)
            .ok_or_else(|| ApiError::bad(format!("sparsity must be one of {SPARSITIES:?}")))?;
        let p = &req.pose;
        if !(p.position.iter().all(|v| v.is_finite()) && p.yaw.is_finite() && p.pitch.is_finite()) {
            return Err(ApiError::bad("pose values must be finite"));
        }
        let cam = CameraPose::from_yaw_pitch(p.position, p.yaw, p.pitch, Intrinsics::with_size(req.width, req.height))
            .map_err(|e| ApiError::bad(format!("invalid pose: {e}")))?;
        let pc = &variant.pc;
        let frame = match req.mode {
            Mode::Neural => {
                let r = scene
                    .renderer
                    .as_ref()
                    .ok_or_else(|| ApiError::bad(format!("scene `{}` has no checkpoint", scene.id)))?;
                let (image, timings) = r.render(pc, &cam)?;
                Frame { image, timings }
            }
            Mode::Msr => {
                let start = Instant::now();
                let feat = rasterize(pc, &cam, &scene.selection).map_err(Error::from)?;
                let msr_ms = ms(start);
                let t = Instant::now();
                let image = rgb_of(&feat.features, &feat.names)
                    .ok_or_else(|| ApiError::bad("scene features have no rgb channels"))?;
                let transfer_proc_ms = ms(t);
                Frame { image, timings: StageTimings { msr_ms, transfer_proc_ms, unet_ms: 0.0, total_ms: ms(start) } }
            }
            Mode::Gsplat => {
                let work = pc.len() as u64 * req.width as u64 * req.height as u64;
                if work > self.gsplat_max_work {
                    return Err(ApiError::new(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        format!(
                            "reference splatting of {} points at {}x{} exceeds the work limit of {} point-pixels; \
                             the reference renderer is deliberately exhaustive, so lower the resolution or raise the sparsity",
                            pc.len(),
                            req.width,
                            req.height,
                            self.gsplat_max_work
                        ),
                    ));
                }
                let start = Instant::now();
                let splats = variant
                    .splats
                    .get_or_init(|| build_splats(pc, scene.style).map_err(|e| e.to_string()))
                    .as_ref()
                    .map_err(|e| ApiError::bad(format!("cannot splat scene: {e}")))?;
                let image = render_gsplat(splats, &cam).map_err(Error::from)?.image;
                let total_ms = ms(start);
                Frame { image, timings: StageTimings { total_ms, ..StageTimings::default() } }
            }
        };
        self.stats.record(LastRequest {
            scene: scene.id.clone(),
            mode: req.mode,
            sparsity: req.sparsity,
            width: req.width,
            height: req.height,
            points: pc.len(),
            timings: frame.timings,
        });
        Ok(frame)
    }
}

pub fn parse_request(body: &[u8]) -> std::result::Result<RenderRequest, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/api/scenes", get(scenes_handler))
        .route("/api/stats", get(stats_handler))
        .route("/api/render", post(render_handler))
        .route("/ws", get(ws_handler))
        .with_state(state)
}

async fn scenes_handler(State(state): State<Arc<ServerState>>) -> Json<Vec<SceneInfo>> {
    Json(state.scenes())
}

async fn stats_handler(State(state): State<Arc<ServerState>>) -> Json<StatsReport> {
    Json(state.stats())
}

fn wants_raw(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|p| p.trim().starts_with("application/octet-stream")))
}

async fn render_blocking(
    state: Arc<ServerState>,
    req: RenderRequest,
    raw: bool,
) -> std::result::Result<(Vec<u8>, StageTimings), ApiError> {
    tokio::task::spawn_blocking(move || {
        let frame = state.render(&req)?;
        let bytes = if raw { encode_planes(&Planes::rgb(frame.image)?)? } else { encode_png(&frame.image)? };
        Ok((bytes, frame.timings))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn render_handler(State(state): State<Arc<ServerState>>, headers: HeaderMap, body: Bytes) -> Response {
    let req = match parse_request(&body) {
        Ok(r) => r,
        Err(e) => {
            state.stats.errors.fetch_add(1, Ordering::Relaxed);
            return e.into_response();
        }
    };
    let raw = wants_raw(&headers);
    match render_blocking(state, req, raw).await {
        Ok((bytes, timings)) => {
            let mut resp = Response::new(Body::from(bytes));
            let h = resp.headers_mut();
            let ct = if raw { "application/octet-stream" } else { "image/png" };
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static(ct));
            if let Ok(v) = HeaderValue::from_str(&serde_json::to_string(&timings).unwrap_or_default()) {
                h.insert("x-stage-timings", v);
            }
            resp
        }
        Err(e) => e.into_response(),
    }
}

/// WebSocket pose message; `frame_id` defaults to a per-connection counter.
#[derive(Debug, Clone, Deserialize)]
struct WsPose {
    frame_id: Option<u32>,
    #[serde(flatten)]
    request: RenderRequest,
}

enum Pending {
    Render(u32, RenderRequest),
    Invalid(Option<u32>, String),
}

struct Slot {
    pending: Mutex<Option<Pending>>,
    notify: Notify,
    closed: AtomicBool,
}

async fn ws_handler(State(state): State<Arc<ServerState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| ws_session(state, socket))
}

async fn ws_session(state: Arc<ServerState>, socket: WebSocket) {
    let (mut tx, mut rx) = socket.split();
    let slot = Arc::new(Slot { pending: Mutex::new(None), notify: Notify::new(), closed: AtomicBool::new(false) });
    let reader_slot = slot.clone();
    let reader = tokio::spawn(async move {
        let mut counter = 0u32;
        while let Some(Ok(msg)) = rx.next().await {
            let text = match msg {
                Message::Text(t) => t.to_string(),
                Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                Message::Close(_) => break,
                _ => continue,
            };
            let item = match serde_json::from_str::<WsPose>(&text) {
                Ok(p) => {
                    let id = p.frame_id.unwrap_or(counter);
                    counter = id.wrapping_add(1);
                    Pending::Render(id, p.request)
                }
                Err(e) => {
                    let id = serde_json::from_str::<serde_json::Value>(&text)
                        .ok()
                        .and_then(|v| v.get("frame_id")?.as_u64())
                        .map(|v| v as u32);
                    Pending::Invalid(id, format!("malformed pose: {e}"))
                }
            };
            *reader_slot.pending.lock().unwrap_or_else(|p| p.into_inner()) = Some(item);
            reader_slot.notify.notify_one();
        }
        reader_slot.closed.store(true, Ordering::Release);
        reader_slot.notify.notify_one();
    });

    loop {
        let next = slot.pending.lock().unwrap_or_else(|p| p.into_inner()).take();
        let Some(item) = next else {
            if slot.closed.load(Ordering::Acquire) {
                break;
            }
            slot.notify.notified().await;
            continue;
        };
        let sent = match item {
            Pending::Invalid(frame_id, error) => {
                state.stats.errors.fetch_add(1, Ordering::Relaxed);
                let msg = serde_json::json!({ "frame_id": frame_id, "error": error, "status": 400 });
                tx.send(Message::Text(msg.to_string().into())).await
            }
            Pending::Render(frame_id, req) => match render_blocking(state.clone(), req, false).await {
                Ok((png, timings)) => {
                    let tag = serde_json::json!({ "frame_id": frame_id, "timings": timings });
                    let mut frame = Vec::with_capacity(4 + png.len());
                    frame.extend_from_slice(&frame_id.to_le_bytes());
                    frame.extend_from_slice(&png);
                    match tx.send(Message::Text(tag.to_string().into())).await {
                        Ok(()) => tx.send(Message::Binary(frame.into())).await,
                        Err(e) => Err(e),
                    }
                }
                Err(e) => {
                    let msg =
                        serde_json::json!({ "frame_id": frame_id, "error": e.message, "status": e.status.as_u16() });
                    tx.send(Message::Text(msg.to_string().into())).await
                }
            },
        };
        if sent.is_err() {
            break;
        }
    }
    reader.abort();
}

/// Serves on an already-bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ServerState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Worker thread cap from `NAR_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("NAR_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!("NAR_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn load_scenes(specs: &[SceneSpec]) -> Result<Vec<Scene>> {
    specs.iter().map(Scene::load).collect()
}

pub fn serve_blocking(args: ServeArgs, config: Option<&Path>, _seed: u64) -> Result<()> {
    let file: ServeFile = crate::config::load_section(config, "serve")?;
    let mut specs = file.scenes;
    for s in &args.scenes {
        specs.push(s.parse()?);
    }
    let mut state = ServerState::new(load_scenes(&specs)?)?;
    if let Some(w) = args.gsplat_max_work.or(file.gsplat_max_work) {
        state.gsplat_max_work = w;
    }
    let cap = thread_cap()?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    rt.enable_all();
    if let Some(n) = cap {
        rt.worker_threads(n).max_blocking_threads(n);
        // Ignore failure: the global pool may already be initialised.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let rt = rt.build()?;
    let host = args.host.or(file.host).unwrap_or_else(|| "127.0.0.1".into());
    let port = args.port.or(file.port).unwrap_or(8080);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad address {host}:{port}: {e}")))?;
    let state = Arc::new(state);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, state).await
    })?;
    Ok(())
}
