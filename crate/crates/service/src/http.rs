//! HTTP front end of the analyser: the API plus static UI assets.

use std::future::Future;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, Method, Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::net::TcpListener;

use tracelens_core::sourcemap::{fetch_bytes, SourceRoot};

use crate::api::{Api, ApiResponse, API_PREFIX};

const INDEX_HTML: &str = include_str!("index.html");

#[derive(Clone)]
struct AppState {
    api: Arc<Api>,
    /// A built web UI to serve instead of the placeholder page.
    ui_dir: Option<Arc<SourceRoot>>,
}

pub fn router(api: Arc<Api>, ui_dir: Option<SourceRoot>) -> Router {
    Router::new().fallback(handle).with_state(AppState {
        api,
        ui_dir: ui_dir.map(Arc::new),
    })
}

fn json_response(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json; charset=utf-8")], r.body_text()).into_response()
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn handle(State(state): State<AppState>, req: Request<Body>) -> Response {
    if req.method() != Method::GET && req.method() != Method::HEAD {
        return json_response(ApiResponse {
            status: 405,
            body: serde_json::json!({ "error_code": "MethodNotAllowed", "message": "the API is read-only" }),
        });
    }
    let target = req.uri().path_and_query().map(|p| p.as_str().to_string()).unwrap_or_else(|| "/".into());
    let path = req.uri().path().to_string();
    if path == API_PREFIX || path.starts_with(&format!("{API_PREFIX}/")) {
        let api = state.api.clone();
        return match tokio::task::spawn_blocking(move || api.get(&target)).await {
            Ok(r) => json_response(r),
            Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
        };
    }
    let Some(ui) = state.ui_dir else {
        return if path == "/" || path == "/index.html" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX_HTML).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let rel = match path.trim_start_matches('/') {
        "" => "index.html".to_string(),
        p => p.to_string(),
    };
    let served = tokio::task::spawn_blocking(move || {
        let file = ui.resolve(&rel).ok()?;
        fetch_bytes(&file).ok().map(|b| (content_type(&rel), b))
    })
    .await
    .ok()
    .flatten();
    match served {
        Some((ct, bytes)) => ([(header::CONTENT_TYPE, ct)], bytes).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

/// Serves until `shutdown` completes.
pub async fn serve(listener: TcpListener, app: Router, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Completes on Ctrl-C or, on Unix, SIGTERM.
pub async fn interrupted() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = ctrl_c => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = ctrl_c.await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}
