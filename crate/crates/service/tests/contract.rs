mod common;

use axum::http::StatusCode;
use common::*;
use serde_json::{json, Value};
use spine_service::ServiceConfig;

async fn create(app: &axum::Router, image: Option<&str>) -> String {
    let body = match image {
        Some(i) => json!({ "image": i }).to_string(),
        None => "{}".to_string(),
    };
    let r = call(app, "POST", "/sessions", Some(&body)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    let v = r.json();
    assert_schema("CreateReply", &v);
    v["id"].as_str().unwrap().to_string()
}

fn expect_error(r: &Reply, status: StatusCode, code: &str) -> Value {
    assert_eq!(r.status, status, "{}", String::from_utf8_lossy(&r.bytes));
    let v = r.json();
    assert_schema("ErrorReply", &v);
    assert_eq!(v["error"]["code"], code);
    v
}

#[tokio::test]
async fn health_and_unknown_routes() {
    let (_d, svc) = service(ServiceConfig::default());
    let app = router(&svc);
    let r = call(&app, "GET", "/healthz", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_schema("Health", &r.json());
    expect_error(&call(&app, "GET", "/nowhere", None).await, StatusCode::NOT_FOUND, "not_found");
}

#[tokio::test]
async fn create_sessions() {
    let (_d, svc) = service(ServiceConfig::default());
    let app = router(&svc);
    let a = create(&app, Some(first_image())).await;
    let b = create(&app, Some(first_image())).await;
    assert_ne!(a, b);
    let empty = call(&app, "POST", "/sessions", None).await;
    assert_eq!(empty.status, StatusCode::CREATED);
    assert_schema("CreateReply", &empty.json());
    let missing = call(&app, "POST", "/sessions", Some(r#"{"image":"images/none.png"}"#)).await;
    expect_error(&missing, StatusCode::NOT_FOUND, "not_found");
    let escape = call(&app, "POST", "/sessions", Some(r#"{"image":"../etc/passwd"}"#)).await;
    expect_error(&escape, StatusCode::BAD_REQUEST, "bad_request");
    assert_eq!(svc.health().sessions, 3);
}

#[tokio::test]
async fn full_scenario_over_http() {
    let (_d, svc) = service(ServiceConfig::default());
    let app = router(&svc);
    let id = create(&app, Some(first_image())).await;
    let cmd = |t: &str| json!({ "text": t }).to_string();

    let r = call(&app, "POST", &format!("/sessions/{id}/command"), Some(&cmd("Add three points"))).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_schema("CommandReply", &v);
    assert_eq!(v["op"]["op"], "add_points");
    assert_eq!(v["actions"], json!([{ "action": "set_point_budget", "label": "positive", "count": 3 }]));
    assert_eq!(v["state"]["prompts"]["pending_point_budget"], 3);
    assert!(v["mask"].is_null());

    for (i, (x, y)) in [(20, 20), (30, 31), (40, 12)].into_iter().enumerate() {
        let r = call(&app, "POST", &format!("/sessions/{id}/points"), Some(&json!({ "x": x, "y": y }).to_string())).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        assert_schema("StateReply", &v);
        assert_eq!(v["prompts"]["pending_point_budget"], 2 - i);
        assert_eq!(v["prompts"]["points"].as_array().unwrap().len(), i + 1);
    }
    let r = call(&app, "POST", &format!("/sessions/{id}/points"), Some(r#"{"x":5,"y":5}"#)).await;
    let e = expect_error(&r, StatusCode::CONFLICT, "rejected");
    assert_eq!(e["error"]["remaining"], 0);

    let before = call(&app, "GET", &format!("/sessions/{id}/state"), None).await.json();
    assert_schema("StateReply", &before);

    let r = call(&app, "POST", &format!("/sessions/{id}/command"), Some(&cmd("Generate segmentation mask"))).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_schema("CommandReply", &v);
    let mask = &v["mask"];
    assert!(mask["confidence"].is_number());
    for k in ["dc", "iou", "msd", "hd95"] {
        assert!(mask["metrics"].get(k).is_some(), "{k}");
    }
    let phases: Vec<&str> = v["latency"].as_array().unwrap().iter().map(|l| l["phase"].as_str().unwrap()).collect();
    assert_eq!(phases, ["parse", "encode", "decode", "total"]);

    let r = call(&app, "POST", &format!("/sessions/{id}/segment"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let seg = r.json();
    assert_schema("SegmentReply", &seg);
    assert_eq!(seg["cache_hit"], true);
    assert_eq!(seg["mask"]["rle"], mask["rle"]);

    let png = call(&app, "GET", &format!("/sessions/{id}/mask.png"), None).await;
    assert_eq!(png.status, StatusCode::OK);
    assert_eq!(png.content_type.as_deref(), Some("image/png"));
    let rle: spine_service::Rle = serde_json::from_value(seg["mask"]["rle"].clone()).unwrap();
    let decoder = png::Decoder::new(std::io::Cursor::new(png.bytes.clone()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width as usize, info.height as usize), (rle.width, rle.height));
    let from_png: Vec<bool> = buf[..info.buffer_size()].iter().map(|&p| p == 255).collect();
    assert!(buf[..info.buffer_size()].iter().all(|&p| p == 0 || p == 255));
    assert_eq!(from_png, rle.decode().unwrap());

    let r = call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    let u = r.json();
    assert_schema("UndoReply", &u);
    assert_eq!(u["undone"], true);
    assert_eq!(u["state"]["history_len"], 1);
    assert_eq!(u["state"]["prompts"], before["prompts"]);
}

#[tokio::test]
async fn malformed_requests_leave_state_untouched() {
    let (_d, svc) = service(ServiceConfig { free_clicks: true, ..ServiceConfig::default() });
    let app = router(&svc);
    let id = create(&app, Some(first_image())).await;
    let state = || async { call(&app, "GET", &format!("/sessions/{id}/state"), None).await.json() };
    let before = state().await;
    let p = format!("/sessions/{id}/points");
    let b = format!("/sessions/{id}/box");
    let cases: Vec<(&str, &str, StatusCode, &str)> = vec![
        (&p, "{not json", StatusCode::BAD_REQUEST, "bad_request"),
        (&p, r#"{"x":1}"#, StatusCode::BAD_REQUEST, "bad_request"),
        (&p, r#"{"x":-1,"y":2}"#, StatusCode::BAD_REQUEST, "bad_request"),
        (&p, r#"{"x":1,"y":2,"z":3}"#, StatusCode::BAD_REQUEST, "bad_request"),
        (&p, r#"{"x":1,"y":2,"label":"maybe"}"#, StatusCode::BAD_REQUEST, "bad_request"),
        (&p, r#"{"x":64,"y":2}"#, StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        (&b, r#"{"x_min":9,"y_min":9,"x_max":3,"y_max":20}"#, StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        (&b, r#"{"x_min":0,"y_min":0,"x_max":65,"y_max":20}"#, StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        (&b, r#"{"x_min":0}"#, StatusCode::BAD_REQUEST, "bad_request"),
    ];
    for (uri, body, status, code) in cases {
        expect_error(&call(&app, "POST", uri, Some(body)).await, status, code);
        assert_eq!(state().await, before, "{body}");
    }
    let c = format!("/sessions/{id}/command");
    expect_error(&call(&app, "POST", &c, Some(r#"{"txt":"next"}"#)).await, StatusCode::BAD_REQUEST, "bad_request");
    expect_error(&call(&app, "POST", &format!("/sessions/{id}/segment"), Some("[1]")).await, StatusCode::BAD_REQUEST, "bad_request");
    assert_eq!(state().await, before);
}

#[tokio::test]
async fn request_schemas_agree_with_the_server() {
    let (_d, svc) = service(ServiceConfig { free_clicks: true, ..ServiceConfig::default() });
    let app = router(&svc);
    let id = create(&app, Some(first_image())).await;
    let cases = [
        ("PointRequest", "points", r#"{"x":3,"y":4}"#),
        ("PointRequest", "points", r#"{"x":3,"y":4,"label":"negative"}"#),
        ("PointRequest", "points", r#"{"x":3}"#),
        ("PointRequest", "points", r#"{"x":3,"y":4,"extra":true}"#),
        ("BoxRequest", "box", r#"{"x_min":1,"y_min":2,"x_max":30,"y_max":40}"#),
        ("BoxRequest", "box", r#"{"x_min":1,"y_min":2,"x_max":30}"#),
        ("CommandRequest", "command", r#"{"text":"next slice"}"#),
        ("CommandRequest", "command", r#"{"text":3}"#),
        ("EmptyRequest", "undo", r#"{}"#),
        ("EmptyRequest", "undo", r#"{"a":1}"#),
    ];
    for (def, path, body) in cases {
        let value: Value = serde_json::from_str(body).unwrap();
        let schema_ok = validator(def).is_valid(&value);
        let r = call(&app, "POST", &format!("/sessions/{id}/{path}"), Some(body)).await;
        let server_ok = r.status != StatusCode::BAD_REQUEST;
        assert_eq!(schema_ok, server_ok, "{def} {body}: {}", String::from_utf8_lossy(&r.bytes));
    }
    assert!(validator("CreateRequest").is_valid(&json!({ "image": "images/a.png" })));
    assert!(!validator("CreateRequest").is_valid(&json!({ "img": "images/a.png" })));
}

#[tokio::test]
async fn parse_and_state_errors() {
    let (_d, svc) = service(ServiceConfig::default());
    let app = router(&svc);
    let id = create(&app, None).await;
    let c = format!("/sessions/{id}/command");
    let e = expect_error(
        &call(&app, "POST", &c, Some(r#"{"text":"rotate the volume ninety degrees"}"#)).await,
        StatusCode::UNPROCESSABLE_ENTITY,
        "parse_error",
    );
    assert!(e["error"]["suggestion"].is_string());
    let e = expect_error(
        &call(&app, "POST", &c, Some(r#"{"text":"show the prior slice"}"#)).await,
        StatusCode::UNPROCESSABLE_ENTITY,
        "parse_error",
    );
    assert_eq!(e["error"]["candidates"], json!(["open_image", "previous_slice"]));
    let gen = call(&app, "POST", &c, Some(r#"{"text":"Generate segmentation mask"}"#)).await;
    expect_error(&gen, StatusCode::CONFLICT, "state_error");
    let open = call(&app, "POST", &c, Some(r#"{"text":"Open image"}"#)).await;
    expect_error(&open, StatusCode::CONFLICT, "state_error");
    expect_error(&call(&app, "POST", &format!("/sessions/{id}/segment"), None).await, StatusCode::CONFLICT, "state_error");
    expect_error(&call(&app, "GET", &format!("/sessions/{id}/mask.png"), None).await, StatusCode::NOT_FOUND, "not_found");
    let click = call(&app, "POST", &format!("/sessions/{id}/points"), Some(r#"{"x":1,"y":1}"#)).await;
    expect_error(&click, StatusCode::CONFLICT, "state_error");
    let u = call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(u.status, StatusCode::OK);
    let u = u.json();
    assert_schema("UndoReply", &u);
    assert_eq!(u["undone"], false);
    assert!(u["notice"].is_string());
    assert_eq!(u["state"]["events"], 1);
}

#[tokio::test]
async fn unknown_session_is_not_found_everywhere() {
    let (_d, svc) = service(ServiceConfig::default());
    let app = router(&svc);
    let posts = [("command", r#"{"text":"next slice"}"#), ("points", r#"{"x":1,"y":1}"#), ("box", r#"{"x_min":0,"y_min":0,"x_max":2,"y_max":2}"#), ("segment", "{}"), ("undo", "{}")];
    for (path, body) in posts {
        let r = call(&app, "POST", &format!("/sessions/nope/{path}"), Some(body)).await;
        expect_error(&r, StatusCode::NOT_FOUND, "not_found");
    }
    for path in ["state", "mask.png"] {
        expect_error(&call(&app, "GET", &format!("/sessions/nope/{path}"), None).await, StatusCode::NOT_FOUND, "not_found");
    }
}

#[tokio::test]
async fn commands_drive_the_viewer() {
    let (d, svc) = service(ServiceConfig { image_dir: Some("images".into()), ..ServiceConfig::default() });
    let app = router(&svc);
    let id = create(&app, None).await;
    let c = format!("/sessions/{id}/command");
    let run = |t: &'static str| {
        let app = app.clone();
        let c = c.clone();
        async move {
            let r = call(&app, "POST", &c, Some(&json!({ "text": t }).to_string())).await;
            assert_eq!(r.status, StatusCode::OK, "{t}: {}", String::from_utf8_lossy(&r.bytes));
            let v = r.json();
            assert_schema("CommandReply", &v);
            v
        }
    };
    let v = run("Open lumbar CT images in bone window").await;
    assert_eq!(v["state"]["image"]["slice_count"], 4);
    assert_eq!(v["state"]["image"]["window"], "bone");
    assert_eq!(v["state"]["region"], "lumbar");
    assert_eq!(run("advance two slices").await["state"]["image"]["slice_index"], 2);
    assert_eq!(run("next slice").await["state"]["image"]["slice_index"], 3);
    let v = run("next slice").await;
    assert_eq!(v["state"]["image"]["slice_index"], 3);
    assert_eq!(v["notices"].as_array().unwrap().len(), 1);
    assert_eq!(run("previous slice").await["state"]["image"]["slice_index"], 2);
    let v = run("add a point at (30, 30)").await;
    assert_eq!(v["state"]["prompts"]["points"].as_array().unwrap().len(), 1);
    let v = run("add a box").await;
    assert_eq!(v["state"]["box_draw"], true);
    let r = call(&app, "POST", &format!("/sessions/{id}/box"), Some(r#"{"x_min":10,"y_min":10,"x_max":50,"y_max":50}"#)).await;
    let s = r.json();
    assert_eq!(s["box_draw"], false);
    assert_eq!(s["prompts"]["box"]["x_max"], 50);
    assert!(run("generate mask").await["mask"].is_object());
    let v = run("save the mask to out/m.png").await;
    assert!(d.path().join("out/m.png").is_file(), "{v}");
    run("clear the box").await;
    run("clear points").await;
    let v = run("place two background points").await;
    assert_eq!(v["state"]["pending_label"], "negative");
    let r = call(&app, "POST", &format!("/sessions/{id}/points"), Some(r#"{"x":2,"y":3}"#)).await;
    assert_eq!(r.json()["prompts"]["points"][0]["label"], "negative");
    assert_eq!(run("close the image").await["state"]["image"], Value::Null);
}

#[test]
fn structured_op_definition_matches_the_command_schema() {
    let doc: Value = serde_json::from_str(API_SCHEMA).unwrap();
    let mut published: Value = serde_json::from_str(spine_command::SCHEMA_JSON).unwrap();
    let obj = published.as_object_mut().unwrap();
    obj.remove("$schema");
    obj.remove("$id");
    assert_eq!(doc["$defs"]["StructuredOp"], published);
}
