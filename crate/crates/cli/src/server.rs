//! HTTP transport for the gateway.
//!
//! - `POST /v1/rpc` — body is an [`ApiRequest`](crate::api::ApiRequest),
//!   reply is an [`ApiResponse`](crate::api::ApiResponse).
//! - `GET /v1/schema` — the feature schema new agents are created with.
//! - `GET /healthz` — liveness.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::api::{parse_request, ApiError, ApiResponse};
use crate::gateway::Gateway;

fn json_response(status: u16, body: String) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn envelope(resp: &ApiResponse) -> Response {
    json_response(resp.status(), serde_json::to_string(resp).expect("response serializes"))
}

async fn rpc(State(gateway): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req = match parse_request(&body) {
        Ok(req) => req,
        Err(resp) => return envelope(&resp),
    };
    // File I/O and retraining block; keep them off the async workers.
    let worker = tokio::task::spawn_blocking(move || {
        let resp = gateway.handle(&req);
        log::debug!("{} {} {:?} ok={}", resp.request_id, resp.agent_id, resp.operation, resp.ok);
        resp
    });
    match worker.await {
        Ok(resp) => envelope(&resp),
        Err(e) => {
            let error = ApiError::new("internal", e.to_string(), None);
            envelope(&ApiResponse::malformed(&serde_json::Value::Null, error))
        }
    }
}

async fn schema(State(gateway): State<Arc<Gateway>>) -> Response {
    json_response(200, gateway.template().schema.to_json())
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/rpc", post(rpc))
        .route("/v1/schema", get(schema))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(gateway)
}

/// Binds `addr`, reports the bound address through `on_bound`, and serves
/// until Ctrl-C.
pub async fn serve(gateway: Arc<Gateway>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
