//! REST routes. Each route forwards to exactly one wire op.

use std::collections::{BTreeMap, HashMap};

use axum::body::Bytes;
use axum::extract::{Query, RawPathParams, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{on, MethodFilter, MethodRouter};
use axum::{Json, Router};
use beamline_core::{ErrorCode, ServerError};
use serde_json::{json, Map, Value};

use crate::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub method: &'static str,
    pub path: &'static str,
    pub op: &'static str,
}

const fn r(method: &'static str, path: &'static str, op: &'static str) -> Route {
    Route { method, path, op }
}

/// The full route table. `{name}` binds the wire `unit` argument.
pub const ROUTES: [Route; 20] = [
    r("GET", "/api/ping", "ping"),
    r("GET", "/api/status", "snapshot"),
    r("GET", "/api/units", "list_units"),
    r("GET", "/api/units/{name}", "unit_state"),
    r("POST", "/api/units/{name}/move", "move_abs"),
    r("POST", "/api/units/{name}/move_rel", "move_rel"),
    r("POST", "/api/units/{name}/stop", "stop"),
    r("POST", "/api/units/{name}/fault", "inject_fault"),
    r("DELETE", "/api/units/{name}/fault", "clear_fault"),
    r("POST", "/api/energy", "set_energy"),
    r("GET", "/api/energy", "get_energy"),
    r("POST", "/api/calc", "calc_positions"),
    r("POST", "/api/mono/params", "set_mono_param"),
    r("POST", "/api/fit", "build_fit"),
    r("GET", "/api/fit", "fit_report"),
    r("POST", "/api/detector/read", "read_detector"),
    r("POST", "/api/scan", "start_scan"),
    r("DELETE", "/api/scan", "abort_scan"),
    r("GET", "/api/scan", "scan_status"),
    r("GET", "/api/scan/points", "scan_points"),
];

/// HTTP status for a wire error code.
pub fn http_status(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::NoUnit => StatusCode::NOT_FOUND,
        ErrorCode::Busy | ErrorCode::Fault | ErrorCode::StaleFit | ErrorCode::NoScan => {
            StatusCode::CONFLICT
        }
        ErrorCode::Range | ErrorCode::Parse | ErrorCode::Limit | ErrorCode::Proto => {
            StatusCode::BAD_REQUEST
        }
        ErrorCode::Unsolvable => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::Conn => StatusCode::BAD_GATEWAY,
        ErrorCode::Io | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub struct ApiError(pub ServerError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.0.code.as_str(), "message": self.0.message });
        (http_status(self.0.code), Json(body)).into_response()
    }
}

fn filter(method: &str) -> MethodFilter {
    match Method::from_bytes(method.as_bytes()).expect("valid method") {
        Method::GET => MethodFilter::GET,
        Method::POST => MethodFilter::POST,
        Method::DELETE => MethodFilter::DELETE,
        Method::PUT => MethodFilter::PUT,
        m => panic!("unsupported method {m}"),
    }
}

/// Query values are typed as JSON where they parse (`since=3` is a number).
fn query_value(raw: &str) -> Value {
    serde_json::from_str::<Value>(raw)
        .ok()
        .filter(|v| v.is_number() || v.is_boolean())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Builds wire args from body, query string and path, in rising precedence.
pub fn build_args(
    body: &[u8],
    query: &HashMap<String, String>,
    path: &[(String, String)],
) -> Result<Option<Map<String, Value>>, ServerError> {
    let mut args = if body.iter().all(u8::is_ascii_whitespace) {
        Map::new()
    } else {
        match serde_json::from_slice::<Value>(body) {
            Ok(Value::Object(m)) => m,
            Ok(_) => {
                return Err(ServerError::new(
                    ErrorCode::Parse,
                    "request body must be a JSON object",
                ))
            }
            Err(e) => {
                return Err(ServerError::new(
                    ErrorCode::Parse,
                    format!("invalid JSON body: {e}"),
                ))
            }
        }
    };
    for (k, v) in query {
        args.insert(k.clone(), query_value(v));
    }
    for (k, v) in path {
        let key = if k == "name" { "unit" } else { k.as_str() };
        args.insert(key.to_string(), Value::String(v.clone()));
    }
    Ok((!args.is_empty()).then_some(args))
}

async fn forward(
    state: AppState,
    op: &'static str,
    path: RawPathParams,
    query: HashMap<String, String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let path: Vec<(String, String)> = path
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let args = build_args(&body, &query, &path).map_err(ApiError)?;
    let mut result = state.upstream.call(op, args).await.map_err(ApiError)?;
    if op == "list_units" {
        if let Some(units) = result.remove("units") {
            return Ok(Json(units));
        }
    }
    Ok(Json(Value::Object(result)))
}

/// The `/api` router built from [`ROUTES`].
pub fn api_router() -> Router<AppState> {
    let mut by_path: BTreeMap<&'static str, MethodRouter<AppState>> = BTreeMap::new();
    for route in ROUTES {
        let op = route.op;
        let handler =
            move |State(st): State<AppState>,
                  path: RawPathParams,
                  Query(q): Query<HashMap<String, String>>,
                  body: Bytes| async move { forward(st, op, path, q, body).await };
        let entry = by_path.remove(route.path);
        let mr = match entry {
            Some(mr) => mr.on(filter(route.method), handler),
            None => on(filter(route.method), handler),
        };
        by_path.insert(route.path, mr);
    }
    by_path
        .into_iter()
        .fold(Router::new(), |router, (path, mr)| router.route(path, mr))
}
