//! Blinded 2AFC study service.
//!
//! ```text
//! GET  /api/next?reader=R   next unanswered pair for reader R
//! GET  /img/{token}         image bytes behind an opaque token
//! POST /api/choice          {"pair_id", "reader", "choice": "A" | "B"}
//! GET  /*                   static UI assets, when an assets directory is given
//! ```
//!
//! Accepted choices are appended to a JSON-lines log, one line per
//! response, flushed before the request returns. On start the log is
//! replayed so a restarted service resumes where it stopped.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use usqm_core::error::{Error, Result};
use usqm_core::store::{parse_jsonl, read_json, resolve};
use usqm_core::study::{image_token, Choice, PairRecord, ResponseRecord};

/// Presentation slot: which manifest image (`A` or `B`) a token shows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub token: String,
    pub choice: Choice,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

/// Body of `GET /api/next`. Carries nothing that identifies a degradation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextPair {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<Slot>,
    pub progress: Progress,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiceBody {
    pair_id: String,
    reader: String,
    choice: Choice,
}

struct Log {
    file: File,
    answered: HashSet<(String, String)>,
}

pub struct StudyState {
    pairs: Vec<PairRecord>,
    index: HashMap<String, usize>,
    images: HashMap<String, PathBuf>,
    salt: u64,
    log: Mutex<Log>,
}

impl StudyState {
    /// Loads the pair manifest and replays the response log (created if absent).
    pub fn open(pairs_path: &Path, responses_path: &Path, salt: u64) -> Result<Self> {
        let pairs: Vec<PairRecord> = read_json(pairs_path)?;
        Self::new(pairs, pairs_path, responses_path, salt)
    }

    /// Image paths in `pairs` are resolved against the directory of `manifest_path`.
    pub fn new(pairs: Vec<PairRecord>, manifest_path: &Path, responses_path: &Path, salt: u64) -> Result<Self> {
        let mut index = HashMap::new();
        let mut images = HashMap::new();
        for (i, p) in pairs.iter().enumerate() {
            if index.insert(p.pair_id.clone(), i).is_some() {
                return Err(Error::Schema {
                    source_name: manifest_path.display().to_string(),
                    row: i + 1,
                    detail: format!("duplicate pair id `{}`", p.pair_id),
                });
            }
            for img in [&p.a, &p.b] {
                let path = resolve(manifest_path, &img.path);
                if !path.is_file() {
                    return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
                images.insert(image_token(salt, &img.path), path);
            }
        }
        let answered = replay(responses_path, &index)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(responses_path)
            .map_err(|e| Error::io(responses_path, e))?;
        Ok(Self {
            pairs,
            index,
            images,
            salt,
            log: Mutex::new(Log { file, answered }),
        })
    }

    fn visible<'a>(&'a self, reader: &'a str) -> impl Iterator<Item = &'a PairRecord> + 'a {
        self.pairs
            .iter()
            .filter(move |p| p.reader.as_deref().is_none_or(|r| r == reader))
    }

    pub fn next_for(&self, reader: &str) -> NextPair {
        let log = self.log.lock().expect("log lock");
        let total = self.visible(reader).count();
        let mut answered = 0;
        let mut next = None;
        for p in self.visible(reader) {
            if log.answered.contains(&(reader.to_string(), p.pair_id.clone())) {
                answered += 1;
            } else if next.is_none() {
                next = Some(p);
            }
        }
        let progress = Progress { answered, total };
        let Some(p) = next else {
            return NextPair {
                done: true,
                pair_id: None,
                left: None,
                right: None,
                progress,
            };
        };
        let a = Slot {
            token: image_token(self.salt, &p.a.path),
            choice: Choice::A,
        };
        let b = Slot {
            token: image_token(self.salt, &p.b.path),
            choice: Choice::B,
        };
        let (left, right) = if p.swap { (b, a) } else { (a, b) };
        NextPair {
            done: false,
            pair_id: Some(p.pair_id.clone()),
            left: Some(left),
            right: Some(right),
            progress,
        }
    }

    /// Validates and durably records one choice.
    pub fn record(&self, pair_id: &str, reader: &str, choice: Choice) -> Result<ResponseRecord> {
        let reader = reader.trim();
        if reader.is_empty() {
            return Err(Error::Parameter("empty reader id".into()));
        }
        let Some(&i) = self.index.get(pair_id) else {
            return Err(Error::Parameter(format!("unknown pair `{pair_id}`")));
        };
        if let Some(owner) = &self.pairs[i].reader {
            if owner != reader {
                return Err(Error::Parameter(format!("pair `{pair_id}` is not allocated to `{reader}`")));
            }
        }
        let mut log = self.log.lock().expect("log lock");
        let key = (reader.to_string(), pair_id.to_string());
        if log.answered.contains(&key) {
            return Err(Error::Conflict(format!("`{reader}` already answered `{pair_id}`")));
        }
        let rec = ResponseRecord {
            pair_id: pair_id.to_string(),
            reader: reader.to_string(),
            choice,
            unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        log.file
            .write_all(&line)
            .and_then(|_| log.file.sync_data())
            .map_err(|e| Error::io("response log", e))?;
        log.answered.insert(key);
        Ok(rec)
    }

    pub fn image_path(&self, token: &str) -> Option<&Path> {
        self.images.get(token).map(PathBuf::as_path)
    }
}

/// Reads an existing log. A torn final line (crash mid-write) is cut off so
/// later appends start on a clean line.
fn replay(path: &Path, index: &HashMap<String, usize>) -> Result<HashSet<(String, String)>> {
    let mut answered = HashSet::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(answered),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!(
            "{}: dropping {} bytes of an incomplete final line",
            path.display(),
            text.len() - complete.len()
        );
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(complete.len() as u64).map_err(|e| Error::io(path, e))?;
    }
    let rows: Vec<ResponseRecord> = parse_jsonl(complete, &path.display().to_string())?;
    for (row, r) in rows.into_iter().enumerate() {
        if !index.contains_key(&r.pair_id) {
            return Err(Error::Schema {
                source_name: path.display().to_string(),
                row: row + 1,
                detail: format!("response to unknown pair `{}`", r.pair_id),
            });
        }
        answered.insert((r.reader, r.pair_id));
    }
    Ok(answered)
}

fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    reader: Option<String>,
}

async fn next(State(state): State<Arc<StudyState>>, Query(q): Query<NextQuery>) -> Response {
    match q.reader.as_deref().map(str::trim) {
        Some(r) if !r.is_empty() => Json(state.next_for(r)).into_response(),
        _ => error_response(StatusCode::BAD_REQUEST, "missing reader"),
    }
}

async fn choice(State(state): State<Arc<StudyState>>, body: Bytes) -> Response {
    let body: ChoiceBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed choice: {e}")),
    };
    match state.record(&body.pair_id, &body.reader, body.choice) {
        Ok(_) => Json(json!({ "ok": true })).into_response(),
        Err(Error::Conflict(m)) => error_response(StatusCode::CONFLICT, m),
        Err(Error::Parameter(m)) => error_response(StatusCode::BAD_REQUEST, m),
        Err(e) => {
            log::error!("{e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "could not store response")
        }
    }
}

async fn image(State(state): State<Arc<StudyState>>, UrlPath(token): UrlPath<String>) -> Response {
    let Some(path) = state.image_path(&token) else {
        return error_response(StatusCode::NOT_FOUND, "unknown image");
    };
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("pgm") => "image/x-portable-graymap",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime), (header::CACHE_CONTROL, "no-store")], bytes).into_response(),
        Err(e) => {
            log::error!("{}: {e}", path.display());
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "image unavailable")
        }
    }
}

async fn no_ui() -> Response {
    (
        StatusCode::NOT_FOUND,
        "study UI assets not installed; the JSON API is under /api",
    )
        .into_response()
}

pub fn router(state: Arc<StudyState>, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/next", get(next))
        .route("/api/choice", post(choice))
        .route("/img/{token}", get(image))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(no_ui),
    }
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub pairs: PathBuf,
    pub responses: PathBuf,
    pub addr: SocketAddr,
    pub assets: Option<PathBuf>,
    pub salt: u64,
}

/// Runs until ctrl-c.
pub async fn serve(cfg: ServeConfig) -> Result<()> {
    let state = Arc::new(StudyState::open(&cfg.pairs, &cfg.responses, cfg.salt)?);
    let app = router(state, cfg.assets.as_deref());
    let listener = tokio::net::TcpListener::bind(cfg.addr)
        .await
        .map_err(|e| Error::io(cfg.addr.to_string(), e))?;
    let local = listener.local_addr().map_err(|e| Error::io(cfg.addr.to_string(), e))?;
    log::info!("serving study on http://{local}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(local.to_string(), e))
}
