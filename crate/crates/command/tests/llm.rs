use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use spine_command::*;

/// Serve one request with `reply` after `delay`; the received body comes back on the channel.
fn mock(reply: &'static str, delay: Duration) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/parse", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let _ = tx.send(serde_json::from_slice(&body).unwrap_or(Value::Null));
        thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply.len(),
            reply
        );
    });
    (url, rx)
}

const VALID: &str = r#"{"category":"point_ops","op":"add_points","slots":{"count":3,"region":"vertebral body"},"confidence":0.9,"source":"remote_llm"}"#;
const TEXT: &str = "Add three points to the vertebral body";

fn cfg(url: &str, timeout_ms: u64) -> LlmClientConfig {
    LlmClientConfig { timeout_ms, ..LlmClientConfig::new(url) }
}

#[test]
fn valid_reply_matches_grammar() {
    let (url, rx) = mock(VALID, Duration::ZERO);
    let out = parse_via_llm(TEXT, &cfg(&url, 2000), Grammar::load_default()).unwrap();
    assert_eq!(out.fallback, None);
    assert_eq!(out.op.source, OpSource::RemoteLlm);
    assert!(out.op.same_meaning(&parse_command(TEXT).unwrap()));
    let sent = rx.recv().unwrap();
    assert_eq!(sent["command"], TEXT);
    assert_eq!(sent["schema_version"], SCHEMA_VERSION);
    assert!(sent["system_prompt"].as_str().unwrap().contains("\"StructuredOp\""));
}

#[test]
fn malformed_reply_falls_back() {
    let (url, _rx) = mock("{\"op\": add_points", Duration::ZERO);
    let out = parse_via_llm(TEXT, &cfg(&url, 2000), Grammar::load_default()).unwrap();
    assert_eq!(out.fallback, Some(FallbackReason::InvalidJson));
    assert!(out.warning.is_some());
    assert_eq!(out.op, parse_command(TEXT).unwrap());
}

#[test]
fn timeout_falls_back_promptly() {
    let (url, _rx) = mock(VALID, Duration::from_millis(1500));
    let timeout = 300;
    let t = Instant::now();
    let out = parse_via_llm(TEXT, &cfg(&url, timeout), Grammar::load_default()).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(out.fallback, Some(FallbackReason::Timeout));
    assert_eq!(out.op, parse_command(TEXT).unwrap());
    assert!(elapsed < Duration::from_millis(timeout + 50), "{elapsed:?}");
}

#[test]
fn schema_violation_is_an_error() {
    let (url, _rx) = mock(
        r#"{"category":"mask_ops","op":"add_points","slots":{"count":3},"confidence":0.9,"source":"remote_llm"}"#,
        Duration::ZERO,
    );
    let err = parse_via_llm(TEXT, &cfg(&url, 2000), Grammar::load_default()).unwrap_err();
    assert!(matches!(err, ParseError::Schema(_)), "{err}");
    let (url, _rx) = mock(r#"{"op":"add_points","extra":1}"#, Duration::ZERO);
    assert!(matches!(
        parse_via_llm(TEXT, &cfg(&url, 2000), Grammar::load_default()),
        Err(ParseError::Schema(_))
    ));
}

#[test]
fn connection_refused_falls_back() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut c = cfg(&format!("http://127.0.0.1:{port}/parse"), 1000);
    c.retries = 2;
    let out = parse_via_llm(TEXT, &c, Grammar::load_default()).unwrap();
    assert_eq!(out.fallback, Some(FallbackReason::Network));
    assert!(out.warning.unwrap().contains("attempt 3"));
}

#[test]
fn config_defaults_from_json() {
    let c: LlmClientConfig = serde_json::from_str(r#"{"endpoint":"http://x"}"#).unwrap();
    assert_eq!(c, LlmClientConfig::new("http://x"));
    assert!(serde_json::from_str::<LlmClientConfig>(r#"{"endpoint":"x","bogus":1}"#).is_err());
}
