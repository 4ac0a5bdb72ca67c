mod common;

use std::collections::HashSet;
use std::time::Duration;

use beamline_core::command::OPS;
use beamline_core::protocol::{decode_request, encode_response, Response, ATTACH};
use beamline_core::ErrorCode;
use beamline_gateway::{http_status, ROUTES};
use serde_json::{json, Map, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;

#[test]
fn every_op_has_exactly_one_route() {
    let mut ops: Vec<&str> = ROUTES.iter().map(|r| r.op).collect();
    ops.sort_unstable();
    let mut expected = OPS.to_vec();
    expected.sort_unstable();
    assert_eq!(ops, expected);
    let keys: HashSet<(&str, &str)> = ROUTES.iter().map(|r| (r.method, r.path)).collect();
    assert_eq!(keys.len(), ROUTES.len());
}

#[test]
fn status_mapping() {
    use reqwest::StatusCode as S;
    let expect = [
        (ErrorCode::NoUnit, 404),
        (ErrorCode::Busy, 409),
        (ErrorCode::Fault, 409),
        (ErrorCode::StaleFit, 409),
        (ErrorCode::NoScan, 409),
        (ErrorCode::Range, 400),
        (ErrorCode::Parse, 400),
        (ErrorCode::Limit, 400),
        (ErrorCode::Proto, 400),
        (ErrorCode::Unsolvable, 422),
        (ErrorCode::Conn, 502),
        (ErrorCode::Io, 500),
        (ErrorCode::Internal, 500),
    ];
    assert_eq!(expect.len(), ErrorCode::ALL.len());
    for (code, status) in expect {
        assert_eq!(
            http_status(code).as_u16(),
            S::from_u16(status).unwrap().as_u16(),
            "{code:?}"
        );
    }
}

/// Answers every request with `{"op":..,"args":..}` so the caller can see what arrived.
async fn echo_upstream() -> u16 {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let port = listener.local_addr().unwrap().port();
    tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                return;
            };
            tokio::spawn(async move {
                let (rd, mut wr) = stream.into_split();
                let mut lines = BufReader::new(rd).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    let req = decode_request(line.as_bytes()).unwrap();
                    let mut result = Map::new();
                    if req.op == ATTACH {
                        result.insert("session".into(), json!(1));
                    } else {
                        let echo = json!({ "op": req.op, "args": req.args });
                        result.insert("op".into(), echo["op"].clone());
                        result.insert("args".into(), echo["args"].clone());
                        result.insert("units".into(), echo);
                    }
                    let out = encode_response(&Response::ok(req.id, result));
                    if wr.write_all(out.as_bytes()).await.is_err() {
                        return;
                    }
                }
            });
        }
    });
    port
}

#[tokio::test(flavor = "multi_thread")]
async fn each_route_reaches_its_op() {
    let port = echo_upstream().await;
    let gw = common::start_gateway(port).await;
    let http = reqwest::Client::new();
    for route in ROUTES {
        let path = route.path.replace("{name}", "exit_slit");
        let method = reqwest::Method::from_bytes(route.method.as_bytes()).unwrap();
        let mut req = http.request(method, common::url(&gw, &path));
        if route.method == "POST" {
            req = req.json(&json!({"steps": 5, "e_ev": 400.0}));
        }
        let resp = req.send().await.unwrap();
        assert_eq!(resp.status(), 200, "{route:?}");
        let body: Value = resp.json().await.unwrap();
        assert_eq!(body["op"], route.op, "{route:?}");
        if route.path.contains("{name}") {
            assert_eq!(body["args"]["unit"], "exit_slit", "{route:?}");
        }
        if route.method == "POST" {
            assert_eq!(body["args"]["steps"], 5, "{route:?}");
        }
    }
    gw.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn args_merge_body_query_and_path() {
    let port = echo_upstream().await;
    let gw = common::start_gateway(port).await;
    let http = reqwest::Client::new();
    let body: Value = http
        .get(common::url(&gw, "/api/scan/points?since=3"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["args"], json!({"since": 3}));
    let body: Value = http
        .get(common::url(&gw, "/api/fit?n_probe=250"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["args"], json!({"n_probe": 250}));
    // the path wins over a body `unit`
    let body: Value = http
        .post(common::url(&gw, "/api/units/mirror_pitch/move"))
        .json(&json!({"unit": "elsewhere", "steps": -7}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["args"], json!({"unit": "mirror_pitch", "steps": -7}));
    let body: Value = http
        .get(common::url(&gw, "/api/ping"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["args"], Value::Null);

    for bad in ["{nope", "[1,2]", "42"] {
        let resp = http
            .post(common::url(&gw, "/api/energy"))
            .body(bad)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 400);
        let err: Value = resp.json().await.unwrap();
        assert_eq!(err["code"], "E_PARSE", "{bad}");
    }
    let resp = http
        .get(common::url(&gw, "/api/nothing_here"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
    gw.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_upstream_gives_502() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let gw = common::start_gateway(port).await;
    assert!(!gw.upstream.is_connected());
    let resp = reqwest::get(common::url(&gw, "/api/units")).await.unwrap();
    assert_eq!(resp.status(), 502);
    let err: Value = resp.json().await.unwrap();
    assert_eq!(err["code"], "E_CONN");
    // the ws endpoint refuses politely when it has nothing to show
    let mut ws = common::ws_connect(&gw).await;
    assert!(common::next_json(&mut ws, Duration::from_secs(5))
        .await
        .is_none());
    gw.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn gateway_reconnects_when_the_server_comes_back() {
    let (mut server, device) = common::start_device();
    let gw = common::start_gateway(server.port()).await;
    let ok = reqwest::get(common::url(&gw, "/api/ping")).await.unwrap();
    assert_eq!(ok.status(), 200);
    let dev_port = server.port();
    server.stop();
    let mut saw_502 = false;
    for _ in 0..50 {
        if reqwest::get(common::url(&gw, "/api/ping"))
            .await
            .unwrap()
            .status()
            == 502
        {
            saw_502 = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(saw_502);
    // bring a server back on the same port
    let again = beamline_core::protocol::server::BackgroundServer::start(
        &format!("127.0.0.1:{dev_port}"),
        device.clone(),
    )
    .unwrap();
    assert!(gw.upstream.wait_connected(Duration::from_secs(10)).await);
    let resp = reqwest::get(common::url(&gw, "/api/ping")).await.unwrap();
    assert_eq!(resp.status(), 200);
    drop(again);
    gw.stop().await;
    device.shutdown();
}
