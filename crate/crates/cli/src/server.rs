//! HTTP front for the gateway. Every request advances the simulation to the
//! wall-clock time elapsed since startup, then runs under one lock.

use std::io::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use mls_core::config::Config;
use mls_core::gateway::{ApiRequest, Gateway, GatewayInit, Verb, SESSION_HEADER};
use serde_json::json;

use crate::{load_fixtures, Fixtures, OrExit, Failure, CONFIG};

/// Unknown to every HSS; the core must refuse it.
const PROBE_IMPI: &str = "probe@ims.kau.example";

struct App {
    gateway: Mutex<Gateway>,
    started: Instant,
}

pub fn build_gateway(cfg: &Config) -> Result<Gateway, Failure> {
    let Fixtures {
        hss,
        learning,
        releases,
        locations,
    } = load_fixtures(cfg)?;
    Gateway::new(GatewayInit {
        hss,
        learning,
        releases,
        params: cfg.net_params(),
        odus_failure_prob: 0.0,
        locations,
    })
    .or_exit(CONFIG)
}

/// One refused registration through both CSCFs. Its trace is the startup
/// log and depends only on the seed and link settings.
fn startup_probe(gw: &mut Gateway) {
    match gw.login(PROBE_IMPI, &"00".repeat(16)) {
        Err(e) => log::info!("startup probe refused as expected: {e:?}"),
        Ok(_) => log::error!("startup probe was admitted; check subscribers.jsonl"),
    }
}

pub fn serve(cfg: &Config) -> Result<(), Failure> {
    let mut gw = build_gateway(cfg)?;
    startup_probe(&mut gw);
    print!("{}", gw.trace_dump());
    gw.set_tracing(false);

    let port = u16::try_from(cfg.http_port).or_exit(CONFIG)?;
    let app = Arc::new(App {
        gateway: Mutex::new(gw),
        started: Instant::now(),
    });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .or_exit(CONFIG)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await.or_exit(CONFIG)?;
        let addr = listener.local_addr().or_exit(CONFIG)?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        let router = Router::new().fallback(dispatch).with_state(app);
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .or_exit(CONFIG)
    })
}

async fn dispatch(
    State(app): State<Arc<App>>,
    method: Method,
    uri: Uri,
    Query(query): Query<Vec<(String, String)>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let verb = match method {
        Method::GET => Verb::Get,
        Method::POST => Verb::Post,
        Method::DELETE => Verb::Delete,
        _ => {
            return (StatusCode::METHOD_NOT_ALLOWED, Json(json!({ "error": "MethodNotAllowed" }))).into_response();
        }
    };
    let req = ApiRequest {
        verb,
        path: uri.path().to_owned(),
        query,
        token: headers
            .get(SESSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned),
        body: body.to_vec(),
    };
    let elapsed = app.started.elapsed().as_millis() as u64;
    let resp = {
        let mut gw = app.gateway.lock().unwrap_or_else(|p| p.into_inner());
        gw.advance_to(elapsed);
        gw.handle(&req)
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(resp.body)).into_response()
}
