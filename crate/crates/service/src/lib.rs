//! Live session server.
//!
//! A participant's client creates a session over HTTP, then streams force
//! samples and probe answers over a WebSocket. The server runs the protocol
//! (practice, skill measurement, main sessions with rests), persists the
//! session after every trial and serves the same report the batch tools
//! produce from the persisted file.

mod error;
pub mod live;
mod store;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::serve::ListenerExt;
use axum::{Json, Router};
use flowtrace_core::dataio::{read_session, report_to_json, SessionConfig};
use flowtrace_core::pipeline::{analyze_cohort, AnalysisSettings};
use rand::Rng;
use serde::Deserialize;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use error::ServiceError;
use live::{ClientMessage, LiveSession, Outcome, ServerMessage, SessionStatus};
pub use store::Store;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Directory of the browser client bundle, served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Settings of the reports served at `/api/session/{id}/report`.
    pub analysis: AnalysisSettings,
}

type Shared = Arc<Mutex<LiveSession>>;

pub struct AppState {
    store: Store,
    analysis: AnalysisSettings,
    sessions: RwLock<HashMap<String, Shared>>,
    reports: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.analysis.validate()?;
        let store = Store::open(&config.data_dir)?;
        let sessions = store
            .load_all()?
            .into_iter()
            .map(|s| (s.id().to_string(), Arc::new(Mutex::new(s))))
            .collect::<HashMap<_, _>>();
        if !sessions.is_empty() {
            tracing::info!(count = sessions.len(), "resumed sessions");
        }
        Ok(Self {
            store,
            analysis: config.analysis.clone(),
            sessions: RwLock::new(sessions),
            reports: Mutex::new(HashMap::new()),
        })
    }

    fn get(&self, id: &str) -> Result<Shared, ServiceError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    async fn persist(self: &Arc<Self>, session: &Shared) -> Result<(), ServiceError> {
        let app = Arc::clone(self);
        let session = Arc::clone(session);
        tokio::task::spawn_blocking(move || {
            let s = session.lock().expect("session poisoned");
            app.reports.lock().expect("report cache poisoned").remove(s.id());
            app.store.save(&s)
        })
        .await?
    }

    /// Writes every session out again.
    pub fn flush(&self) -> Result<(), ServiceError> {
        let sessions: Vec<Shared> = self.sessions.read().expect("session table poisoned").values().cloned().collect();
        for s in sessions {
            self.store.save(&s.lock().expect("session poisoned"))?;
        }
        Ok(())
    }
}

pub fn router(app: Arc<AppState>, static_dir: Option<PathBuf>) -> Result<Router, ServiceError> {
    let mut router = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(session_status))
        .route("/api/session/{id}/finalize", post(finalize_session))
        .route("/api/session/{id}/report", get(session_report))
        .route("/api/session/{id}/stream", get(session_stream))
        .with_state(app);
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            return Err(ServiceError::StaticDir(dir.display().to_string()));
        }
        router = router.fallback_service(ServeDir::new(dir));
    }
    Ok(router)
}

/// Serves until `shutdown` resolves, then flushes every session to disk.
pub async fn serve(
    listener: TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = Arc::new(AppState::open(&config)?);
    let router = router(Arc::clone(&app), config.static_dir.clone())?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %config.data_dir.display(), "service listening");
    // Live frames are small and latency bound.
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await?;
    let flushing = Arc::clone(&app);
    tokio::task::spawn_blocking(move || flushing.flush()).await??;
    tracing::info!("sessions flushed, service stopped");
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateRequest {
    config: SessionConfig,
    seed: Option<u64>,
    subject_id: Option<String>,
}

fn valid_subject_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ServiceError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?
    };
    let (seed, id) = {
        let mut rng = rand::rng();
        let seed = req.seed.unwrap_or_else(|| rng.random());
        let id = loop {
            let id = format!("{:016x}", rng.random::<u64>());
            if !app.sessions.read().expect("session table poisoned").contains_key(&id) {
                break id;
            }
        };
        (seed, id)
    };
    let subject_id = req.subject_id.unwrap_or_else(|| id.clone());
    if !valid_subject_id(&subject_id) {
        return Err(ServiceError::BadRequest(format!(
            "subject_id `{subject_id}` must be 1-64 letters, digits, `_` or `-`"
        )));
    }
    let session = LiveSession::create(id.clone(), subject_id, req.config, seed)?;
    let status = session.status();
    let shared = Arc::new(Mutex::new(session));
    app.persist(&shared).await?;
    app.sessions.write().expect("session table poisoned").insert(id.clone(), shared);
    tracing::info!(session = %id, seed, "session created");
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

async fn session_status(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionStatus>, ServiceError> {
    let session = app.get(&id)?;
    let status = session.lock().expect("session poisoned").status();
    Ok(Json(status))
}

async fn finalize_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionStatus>, ServiceError> {
    let session = app.get(&id)?;
    session.lock().expect("session poisoned").finalize();
    app.persist(&session).await?;
    tracing::info!(session = %id, "session finalized");
    let status = session.lock().expect("session poisoned").status();
    Ok(Json(status))
}

async fn session_report(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let session = app.get(&id)?;
    if !session.lock().expect("session poisoned").is_finished() {
        return Err(ServiceError::Conflict(format!(
            "session `{id}` is still running; finalize it to get a partial report"
        )));
    }
    let cached = app.reports.lock().expect("report cache poisoned").get(&id).cloned();
    let bytes = match cached {
        Some(b) => b,
        None => {
            // Analyse the persisted file, exactly as the batch tools would.
            let path = app.store.session_path(&id);
            let settings = app.analysis.clone();
            let bytes = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ServiceError> {
                let data = read_session(&path)?;
                Ok(report_to_json(&analyze_cohort(&[data], &settings)?)?)
            })
            .await??;
            let bytes = Arc::new(bytes);
            app.reports.lock().expect("report cache poisoned").insert(id, Arc::clone(&bytes));
            bytes
        }
    };
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes.as_ref().clone()).into_response())
}

async fn session_stream(
    ws: WebSocketUpgrade,
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let session = app.get(&id)?;
    Ok(ws.on_upgrade(move |socket| run_stream(socket, app, session)))
}

async fn send(socket: &mut WebSocket, messages: Vec<ServerMessage>) -> bool {
    for m in messages {
        let text = serde_json::to_string(&m).expect("server messages serialise");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn run_stream(mut socket: WebSocket, app: Arc<AppState>, session: Shared) {
    let greeting = session.lock().expect("session poisoned").greeting();
    if !send(&mut socket, greeting).await {
        return;
    }
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let mut outcome = match serde_json::from_str::<ClientMessage>(&text) {
            Ok(m) => session.lock().expect("session poisoned").handle(m),
            Err(e) => Outcome {
                messages: vec![ServerMessage::Error {
                    message: format!("malformed message: {e}"),
                }],
                persist: false,
            },
        };
        if outcome.persist {
            if let Err(e) = app.persist(&session).await {
                outcome.messages.push(ServerMessage::Error {
                    message: format!("session not saved: {e}"),
                });
            }
        }
        if !send(&mut socket, outcome.messages).await {
            break;
        }
    }
}
