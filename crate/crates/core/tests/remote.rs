//! Remote backends against an in-process HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use dagrag::embed::{EmbedError, Encoder, RemoteEncoder};
use dagrag::http::{EndpointConfig, HttpError, RetryPolicy};
use dagrag::modelgw::{Backend, CompletionRequest, GatewayError, RemoteChatBackend, Role};
use dagrag::rerank::{RemoteScorer, Scorer};

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Value> {
    let mut reader = BufReader::new(stream);
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    serde_json::from_slice(&body).ok()
}

fn serve(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let handler: Arc<Handler> = Arc::new(handler);
    {
        let hits = hits.clone();
        let bodies = bodies.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let hits = hits.clone();
                let bodies = bodies.clone();
                let handler = handler.clone();
                thread::spawn(move || {
                    let Some(body) = read_request(&mut stream) else { return };
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    bodies.lock().unwrap().push(body.clone());
                    let (status, reply) = handler(n, &body);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        reply.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(reply.as_bytes());
                });
            }
        });
    }
    Stub { url, hits, bodies }
}

fn fast(url: &str, retries: u32) -> EndpointConfig {
    EndpointConfig {
        retry: RetryPolicy {
            retries,
            initial_backoff_ms: 1,
            multiplier: 2,
        },
        ..EndpointConfig::new(url)
    }
}

/// Encodes each text as `[len, 1, 0]`.
fn encoder_reply(body: &Value) -> String {
    let vectors: Vec<Value> = body["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| json!([t.as_str().unwrap().len() as f64, 1.0, 0.0]))
        .collect();
    json!({ "vectors": vectors }).to_string()
}

#[test]
fn remote_encoder_batches_in_order() {
    let stub = serve(|_, body| (200, encoder_reply(body)));
    let enc = RemoteEncoder::new(&fast(&stub.url, 0), 3).with_batch_size(2);
    let texts = ["a", "bb", "ccc", "dddd", "eeeee"];
    let out = enc.encode_batch(&texts).unwrap();
    let firsts: Vec<f64> = out.iter().map(|v| v.values()[0]).collect();
    assert_eq!(firsts, [1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
    for b in stub.bodies.lock().unwrap().iter() {
        assert!(b["texts"].as_array().unwrap().len() <= 2);
    }
}

#[test]
fn remote_encoder_rejects_wrong_dims() {
    let stub = serve(|_, body| (200, encoder_reply(body)));
    let enc = RemoteEncoder::new(&fast(&stub.url, 0), 4);
    assert!(matches!(
        enc.encode("x"),
        Err(EmbedError::DimensionMismatch { expected: 4, got: 3 })
    ));
}

#[test]
fn retries_server_errors_then_succeeds() {
    let stub = serve(|n, body| if n < 2 { (503, "{}".into()) } else { (200, encoder_reply(body)) });
    let enc = RemoteEncoder::new(&fast(&stub.url, 3), 3);
    assert_eq!(enc.encode("abc").unwrap().values(), [3.0, 1.0, 0.0]);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let stub = serve(|_, _| (500, "{}".into()));
    let enc = RemoteEncoder::new(&fast(&stub.url, 2), 3);
    match enc.encode("abc") {
        Err(EmbedError::EncoderUnavailable { last, attempts }) => {
            assert_eq!(last, HttpError::Status(500));
            assert_eq!(attempts, 3);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(|_, _| (400, "{}".into()));
    let enc = RemoteEncoder::new(&fast(&stub.url, 3), 3);
    assert!(enc.encode("abc").is_err());
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_scorer_splits_and_joins() {
    let stub = serve(|_, body| {
        let q = body["query"].as_str().unwrap().to_string();
        let scores: Vec<f64> = body["passages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| if p.as_str().unwrap().contains(&q) { 1.0 } else { 0.0 })
            .collect();
        (200, json!({ "scores": scores }).to_string())
    });
    let scorer = RemoteScorer::new(&fast(&stub.url, 0), 2);
    let s = scorer.score("gout", &["gout flare", "asthma", "acute gout", "eczema", "nothing"]).unwrap();
    assert_eq!(s, [1.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_chat_round_trip() {
    let stub = serve(|_, body| {
        let prompt = body["messages"][0]["content"].as_str().unwrap();
        let reply = json!({
            "choices": [{"message": {"role": "assistant", "content": format!("echo: {prompt}")}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 2}
        });
        (200, reply.to_string())
    });
    let backend = RemoteChatBackend::new(&fast(&stub.url, 0), Some("m-know".into()));
    let c = backend.complete(&CompletionRequest::new(Role::Know, "hello", 16)).unwrap();
    assert_eq!(c.text, "echo: hello");
    assert_eq!(c.usage.prompt_tokens, 7);
    assert_eq!(c.usage.output_tokens, 2);
    let sent = stub.bodies.lock().unwrap()[0].clone();
    assert_eq!(sent["model"], "m-know");
    assert_eq!(sent["max_tokens"], 16);
    assert_eq!(sent["messages"][0]["role"], "user");
}

#[test]
fn remote_chat_unavailable_maps_to_gateway_error() {
    let stub = serve(|_, _| (503, "{}".into()));
    let backend = RemoteChatBackend::new(&fast(&stub.url, 1), None);
    match backend.complete(&CompletionRequest::new(Role::Dag, "x", 4)) {
        Err(GatewayError::BackendUnavailable { role, message }) => {
            assert_eq!(role, Role::Dag);
            assert!(message.contains("2 attempt"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn in_flight_limit_bounds_concurrency() {
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (l, p) = (live.clone(), peak.clone());
    let stub = serve(move |_, body| {
        let now = l.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(std::time::Duration::from_millis(30));
        l.fetch_sub(1, Ordering::SeqCst);
        (200, encoder_reply(body))
    });
    let cfg = EndpointConfig {
        max_in_flight: 2,
        ..fast(&stub.url, 0)
    };
    let enc = RemoteEncoder::new(&cfg, 3).with_batch_size(1);
    let texts: Vec<&str> = vec!["t"; 8];
    assert_eq!(enc.encode_batch(&texts).unwrap().len(), 8);
    assert!(peak.load(Ordering::SeqCst) <= 2);
}
