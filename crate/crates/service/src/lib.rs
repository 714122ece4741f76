//! HTTP JSON API over the mark pool.
//!
//! Routes:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/api/ballots` | PGM or PNG bytes | `{ballot_id}` |
//! | POST | `/api/ballots/{id}/segments` | `{"kind":"point","x","y"}` or `{"kind":"box","x0","y0","x1","y1"}` | `{segment_id, bbox, rle_mask}` |
//! | GET | `/api/segments/{id}/crop` | | PGM (or PNG with `?format=png`) |
//! | POST | `/api/pool` | `{segment_id}` | `{alias}` |
//! | GET | `/api/pool` | | `[{alias, ballot_id}]` |
//! | POST | `/api/query` | `{segment_id, k, exclude_same_ballot}` | `{matches}` |
//! | GET | `/api/heatmap?queries=a,b` | | `{pool_aliases, query_aliases, cells}` |
//!
//! Errors are `{"error": "..."}` with 400 (malformed), 404 (unknown id),
//! 409 (duplicate or empty pool), 415 (undecodable image) or 422 (no mark).

mod api;
mod state;

pub use api::{router, ApiError};
pub use state::{AppState, BallotRecord, ServiceConfig};

use std::io;
use std::net::SocketAddr;

use axum::http::{HeaderValue, Method};
use axum::Router;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Origin allowed when none is configured (the console's dev server).
pub const DEFAULT_ALLOW_ORIGIN: &str = "http://localhost:5173";

/// CORS for the given origins; `*` allows any.
pub fn cors_layer(origins: &[String]) -> io::Result<CorsLayer> {
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        let values = origins
            .iter()
            .map(|o| {
                HeaderValue::from_str(o)
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("bad origin {o:?}")))
            })
            .collect::<io::Result<Vec<_>>>()?;
        AllowOrigin::list(values)
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]))
}

/// Serves `app` on an already-bound listener until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr` and serves on a fresh multi-threaded runtime. `on_bound`
/// receives the actual local address (useful with port 0).
pub fn serve_blocking(addr: &str, app: Router, on_bound: impl FnOnce(SocketAddr)) -> io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        serve(listener, app).await
    })
}
