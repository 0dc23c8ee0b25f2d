//! HTTP backend that restores uploaded images with one of the fine-tuned
//! variants and serves the results.
//!
//! Routes:
//! - `POST /api/restore`: multipart `image`, `variant`, optional `reference`
//! - `GET /api/variants`
//! - `GET /api/artifacts/{id}`

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use haze_client::{ApiError, RestoreResponse, VariantInfo, VariantStatus};
use haze_core::checkpoint::{self, Checkpoint};
use haze_core::ffa::Ffa;
use haze_core::grid::ReportedManifest;
use haze_core::training::{Phase, ALLOWED_K};
use haze_core::{imageio, metrics};
use sha2::{Digest, Sha256};
use tokio::sync::OnceCell;

pub const ENV_CKPT_DIR: &str = "HAZE_RESTORE_CKPT_DIR";
pub const ENV_DEVICE: &str = "HAZE_RESTORE_DEVICE";
pub const ENV_PORT: &str = "HAZE_RESTORE_PORT";
pub const ENV_ARTIFACT_DIR: &str = "HAZE_RESTORE_ARTIFACT_DIR";

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;
pub const DEFAULT_TTL: Duration = Duration::from_secs(24 * 60 * 60);
pub const DEFAULT_IMAGE_SIZE: usize = 256;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ckpt_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub device: String,
    pub port: u16,
    /// Per-file upload cap in bytes.
    pub max_upload: usize,
    pub image_size: usize,
    pub artifact_ttl: Duration,
}

impl ServiceConfig {
    pub fn new(ckpt_dir: impl Into<PathBuf>, artifact_dir: impl Into<PathBuf>) -> Self {
        Self {
            ckpt_dir: ckpt_dir.into(),
            artifact_dir: artifact_dir.into(),
            device: "cpu".into(),
            port: haze_client::DEFAULT_PORT,
            max_upload: DEFAULT_MAX_UPLOAD,
            image_size: DEFAULT_IMAGE_SIZE,
            artifact_ttl: DEFAULT_TTL,
        }
    }

    pub fn from_env() -> anyhow::Result<Self> {
        let ckpt_dir = std::env::var_os(ENV_CKPT_DIR).map_or_else(|| PathBuf::from("checkpoints"), PathBuf::from);
        let artifact_dir = std::env::var_os(ENV_ARTIFACT_DIR)
            .map_or_else(|| std::env::temp_dir().join("haze-restore-artifacts"), PathBuf::from);
        let mut cfg = Self::new(ckpt_dir, artifact_dir);
        if let Ok(device) = std::env::var(ENV_DEVICE) {
            cfg.device = device;
        }
        if let Ok(port) = std::env::var(ENV_PORT) {
            cfg.port = port.parse().map_err(|e| anyhow::anyhow!("{ENV_PORT}={port:?}: {e}"))?;
        }
        Ok(cfg)
    }
}

struct Slot {
    path: Option<PathBuf>,
    model: OnceCell<Result<Arc<Ffa>, String>>,
}

/// The five variants. Each generator is loaded on first use behind its own
/// latch and is read-only afterwards.
pub struct VariantRegistry {
    slots: BTreeMap<usize, Slot>,
}

pub enum Lookup {
    Unknown,
    Unavailable(String),
}

impl VariantRegistry {
    pub fn discover(dir: &Path) -> Self {
        let slots = ALLOWED_K
            .iter()
            .map(|&k| {
                let path = checkpoint::latest(dir, Phase::Finetune, &format!("k{k}"));
                match &path {
                    Some(p) => tracing::info!("variant K={k}: {}", p.display()),
                    None => tracing::warn!("variant K={k}: no checkpoint in {}", dir.display()),
                }
                (k, Slot { path, model: OnceCell::new() })
            })
            .collect();
        Self { slots }
    }

    pub fn status(&self, k: usize) -> Option<VariantStatus> {
        let slot = self.slots.get(&k)?;
        let failed = matches!(slot.model.get(), Some(Err(_)));
        Some(if slot.path.is_some() && !failed {
            VariantStatus::Ready
        } else {
            VariantStatus::Unavailable
        })
    }

    pub fn is_loaded(&self, k: usize) -> bool {
        self.slots.get(&k).is_some_and(|s| matches!(s.model.get(), Some(Ok(_))))
    }

    pub async fn get(&self, k: usize) -> Result<Arc<Ffa>, Lookup> {
        let slot = self.slots.get(&k).ok_or(Lookup::Unknown)?;
        let path = slot
            .path
            .clone()
            .ok_or_else(|| Lookup::Unavailable(format!("no checkpoint for K={k}")))?;
        let loaded = slot
            .model
            .get_or_init(|| async move {
                tokio::task::spawn_blocking(move || {
                    Checkpoint::load(&path)
                        .and_then(|c| c.generator(candle_core::DType::F32))
                        .map(Arc::new)
                        .map_err(|e| e.to_string())
                })
                .await
                .unwrap_or_else(|e| Err(e.to_string()))
            })
            .await;
        loaded.clone().map_err(Lookup::Unavailable)
    }
}

/// Restored images on disk, keyed by content hash.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    dir: PathBuf,
    ttl: Duration,
}

impl ArtifactStore {
    pub fn new(dir: impl Into<PathBuf>, ttl: Duration) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, ttl })
    }

    pub fn valid_id(id: &str) -> bool {
        id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    pub fn get(&self, id: &str) -> Option<Vec<u8>> {
        if !Self::valid_id(id) {
            return None;
        }
        std::fs::read(self.path(id)).ok()
    }

    pub fn put(&self, id: &str, bytes: &[u8]) -> std::io::Result<()> {
        static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{id}.{}.{n}.tmp", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.path(id))
    }

    /// Removes artifacts older than the TTL relative to `now`; returns the count.
    pub fn sweep(&self, now: SystemTime) -> std::io::Result<usize> {
        let mut removed = 0;
        for entry in std::fs::read_dir(&self.dir)? {
            let entry = entry?;
            let modified = entry.metadata()?.modified()?;
            if now.duration_since(modified).unwrap_or_default() > self.ttl {
                std::fs::remove_file(entry.path())?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub registry: VariantRegistry,
    pub artifacts: ArtifactStore,
    pub manifest: Option<ReportedManifest>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> anyhow::Result<Self> {
        haze_core::device(&config.device)?;
        let manifest = ReportedManifest::read(&config.ckpt_dir).unwrap_or_else(|e| {
            tracing::warn!("ignoring reported-metrics manifest: {e}");
            None
        });
        Ok(Self {
            registry: VariantRegistry::discover(&config.ckpt_dir),
            artifacts: ArtifactStore::new(&config.artifact_dir, config.artifact_ttl)?,
            manifest,
            config,
        })
    }
}

#[derive(Debug)]
pub struct AppError {
    status: StatusCode,
    body: ApiError,
}

impl AppError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiError {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // two files plus multipart framing
    let limit = 2 * state.config.max_upload + 64 * 1024;
    Router::new()
        .route("/api/restore", post(restore))
        .route("/api/variants", get(variants))
        .route("/api/artifacts/{id}", get(artifact))
        .fallback(|| async { AppError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the listener fails. Starts the hourly artifact sweep.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let artifacts = state.artifacts.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(3600));
        loop {
            tick.tick().await;
            let store = artifacts.clone();
            match tokio::task::spawn_blocking(move || store.sweep(SystemTime::now())).await {
                Ok(Ok(n)) if n > 0 => tracing::info!("removed {n} expired artifacts"),
                Ok(Err(e)) => tracing::warn!("artifact sweep failed: {e}"),
                _ => {}
            }
        }
    });
    axum::serve(listener, router(state)).await
}

pub async fn bind(port: u16) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await
}

async fn variants(State(state): State<Arc<AppState>>) -> Json<Vec<VariantInfo>> {
    let list = ALLOWED_K
        .iter()
        .map(|&k| {
            let reported = state.manifest.as_ref().and_then(|m| m.get(k));
            VariantInfo {
                k,
                status: state.registry.status(k).unwrap_or(VariantStatus::Unavailable),
                ssim_reported: reported.map(|r| r.ssim),
                psnr_reported: reported.map(|r| r.psnr_db),
            }
        })
        .collect();
    Json(list)
}

async fn artifact(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, AppError> {
    let store = state.artifacts.clone();
    let lookup = id.clone();
    let bytes = tokio::task::spawn_blocking(move || store.get(&lookup))
        .await
        .map_err(AppError::internal)?
        .ok_or_else(|| AppError::new(StatusCode::NOT_FOUND, "not_found", format!("no artifact {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

struct Upload {
    image: Option<Vec<u8>>,
    variant: Option<String>,
    reference: Option<Vec<u8>>,
}

async fn read_upload(mut form: Multipart, cap: usize) -> Result<Upload, AppError> {
    let mut up = Upload {
        image: None,
        variant: None,
        reference: None,
    };
    let too_large = || AppError::bad_request("too_large", format!("uploads are limited to {cap} bytes per file"));
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large()),
            Err(e) => return Err(AppError::bad_request("bad_multipart", e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let data = match field.bytes().await {
            Ok(d) => d,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large()),
            Err(e) => return Err(AppError::bad_request("bad_multipart", e.body_text())),
        };
        if data.len() > cap {
            return Err(too_large());
        }
        match name.as_str() {
            "image" => up.image = Some(data.to_vec()),
            "reference" => up.reference = Some(data.to_vec()),
            "variant" => up.variant = Some(String::from_utf8_lossy(&data).trim().to_string()),
            _ => {}
        }
    }
    Ok(up)
}

/// `sha256(image bytes || K as little-endian u64)` in hex.
pub fn job_id(image: &[u8], k: usize) -> String {
    let mut h = Sha256::new();
    h.update(image);
    h.update((k as u64).to_le_bytes());
    hex::encode(h.finalize())
}

fn decode(bytes: &[u8], what: &str, size: usize) -> Result<candle_core::Tensor, AppError> {
    let img = imageio::decode_rgb(bytes).map_err(|e| AppError::bad_request("unsupported_format", format!("{what}: {e}")))?;
    imageio::rgb_to_tensor(&imageio::resize(&img, size, size)).map_err(AppError::internal)
}

async fn restore(State(state): State<Arc<AppState>>, form: Multipart) -> Result<Json<RestoreResponse>, AppError> {
    let up = read_upload(form, state.config.max_upload).await?;
    let variant = up
        .variant
        .ok_or_else(|| AppError::bad_request("missing_variant", "the variant field is required"))?;
    let k: usize = variant
        .parse()
        .map_err(|_| AppError::bad_request("invalid_variant", format!("variant {variant:?} is not an integer")))?;
    let image = up
        .image
        .ok_or_else(|| AppError::bad_request("missing_image", "the image field is required"))?;
    let model = state.registry.get(k).await.map_err(|e| match e {
        Lookup::Unknown => AppError::new(
            StatusCode::NOT_FOUND,
            "unknown_variant",
            format!("variant {k} does not exist; allowed: {ALLOWED_K:?}"),
        ),
        Lookup::Unavailable(why) => {
            AppError::new(StatusCode::SERVICE_UNAVAILABLE, "variant_unavailable", format!("variant {k}: {why}"))
        }
    })?;
    let id = job_id(&image, k);
    let size = state.config.image_size;
    let reference = up.reference;
    let worker = state.clone();
    let job = id.clone();
    let (psnr_db, ssim) = tokio::task::spawn_blocking(move || -> Result<(Option<f64>, Option<f64>), AppError> {
        let png = match worker.artifacts.get(&job) {
            Some(png) => png,
            None => {
                let x = decode(&image, "image", size)?;
                let restored = model.restore(&x).map_err(AppError::internal)?;
                let rgb = imageio::tensor_to_rgb(&restored).map_err(AppError::internal)?;
                let png = imageio::encode_png(&rgb).map_err(AppError::internal)?;
                worker.artifacts.put(&job, &png).map_err(AppError::internal)?;
                png
            }
        };
        let Some(reference) = reference else {
            return Ok((None, None));
        };
        let r = decode(&reference, "reference", size)?;
        let out = decode(&png, "artifact", size)?;
        let p = metrics::psnr(&out, &r, 1.0).map_err(AppError::internal)?;
        let s = metrics::ssim(&out, &r, 1.0).map_err(AppError::internal)?;
        Ok((Some(p), Some(s)))
    })
    .await
    .map_err(AppError::internal)??;
    Ok(Json(RestoreResponse {
        restored_image_url: format!("/api/artifacts/{id}"),
        job_id: id,
        psnr_db,
        ssim,
    }))
}
