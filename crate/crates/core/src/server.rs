//! HTTP/1.1 JSON service over the operations in [`crate::api`].

use axum::body::Bytes;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::api::{self, Operation};

const ROUTES: [(&str, Operation); 10] = [
    ("/api/v1/estimate", Operation::Estimate),
    ("/api/v1/cost", Operation::Cost),
    ("/api/v1/simulate", Operation::Simulate),
    ("/api/v1/plan/dynamic-cp", Operation::PlanDynamicCp),
    ("/api/v1/plan/echo", Operation::PlanEcho),
    ("/api/v1/plan/groups", Operation::PlanGroups),
    ("/api/v1/advise", Operation::Advise),
    ("/api/v1/quant-check", Operation::QuantCheck),
    ("/api/v1/moe-check", Operation::MoeCheck),
    ("/api/v1/calibrate", Operation::Calibrate),
];

async fn run(op: Operation, body: Bytes) -> Response {
    // Handlers are pure CPU work; keep them off the reactor threads.
    let resp = tokio::task::spawn_blocking(move || api::handle(op, &body))
        .await
        .expect("handler panicked");
    let code = StatusCode::from_u16(resp.status.http_code()).expect("valid status");
    (
        code,
        [(header::CONTENT_TYPE, "application/json")],
        resp.to_json(),
    )
        .into_response()
}

pub fn router() -> Router {
    let mut r = Router::new().route(
        "/api/v1/fixtures",
        get(|| run(Operation::Fixtures, Bytes::from_static(b"{}"))),
    );
    for (path, op) in ROUTES {
        r = r.route(path, post(move |body: Bytes| run(op, body)));
    }
    r
}

/// Serve until the process is stopped.
pub async fn serve(addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router()).await
}
