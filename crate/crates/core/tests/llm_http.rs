use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use splitdit_core::caption_parser::{
    llm_complete, parse_with_llm, HttpTransport, LlmClient, LlmError, LlmRequest, NetPolicy, ParserCache,
};

#[derive(Clone, Debug)]
struct Seen {
    request_line: String,
    authorization: Option<String>,
    body: String,
}

/// Serves one canned `(status, body)` per connection, in order, and records
/// what each request looked like.
fn stub_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                request_line: request_line.trim_end().to_string(),
                authorization,
                body: String::from_utf8(buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

const TEDDY: &str = "A teddy bear wearing a red ribbon around its neck";
const TEDDY_REPLY: &str = r#"{"objects":[{"name":"teddy bear","attributes":[]},{"name":"ribbon","attributes":["red"]}],"relations":[{"subject":0,"predicate":"wearing","object":1}]}"#;

fn online() -> NetPolicy {
    NetPolicy { allow_network: true, max_retries: 2, timeout_s: 5.0 }
}

#[test]
fn parses_over_http_then_replays_offline() {
    let (url, seen, server) = stub_server(vec![(200, chat(TEDDY_REPLY))]);
    let cache = tempfile::tempdir().unwrap();
    let client = LlmClient::new(ParserCache::new(cache.path()), online(), Some(Box::new(HttpTransport::new(url, "k-123"))));
    let prims = parse_with_llm(TEDDY, &client).unwrap();
    server.join().unwrap();
    assert_eq!(prims.objects, vec!["teddy bear", "ribbon"]);
    assert_eq!(prims.relations[0].predicate, "wearing");
    assert_eq!(prims.attributes[0].value, "red");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer k-123"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["messages"][1]["content"], TEDDY);

    // The server is gone; the cache must answer.
    let offline = LlmClient::new(ParserCache::new(cache.path()), NetPolicy::default(), None);
    assert_eq!(parse_with_llm(TEDDY, &offline).unwrap(), prims);
}

#[test]
fn transient_status_is_retried() {
    let (url, seen, server) = stub_server(vec![(503, "busy".into()), (200, chat(TEDDY_REPLY))]);
    let cache = tempfile::tempdir().unwrap();
    let transport = HttpTransport::new(url, "k");
    let req = LlmRequest::new("m", TEDDY);
    let resp = llm_complete(&req, &ParserCache::new(cache.path()), &online(), Some(&transport)).unwrap();
    server.join().unwrap();
    assert_eq!(resp.attempts, 2);
    assert!(resp.parsed.is_some());
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen, server) = stub_server(vec![(401, "denied".into())]);
    let cache = tempfile::tempdir().unwrap();
    let transport = HttpTransport::new(url, "bad");
    let req = LlmRequest::new("m", TEDDY);
    let err = llm_complete(&req, &ParserCache::new(cache.path()), &online(), Some(&transport)).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, LlmError::Transport { attempts: 1, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(std::fs::read_dir(cache.path()).map_or(true, |d| d.count() == 0));
}

#[test]
fn malformed_reply_triggers_repair_request() {
    let (url, seen, server) = stub_server(vec![(200, chat("not json at all")), (200, chat(TEDDY_REPLY))]);
    let cache = tempfile::tempdir().unwrap();
    let client = LlmClient::new(ParserCache::new(cache.path()), online(), Some(Box::new(HttpTransport::new(url, "k"))));
    let prims = parse_with_llm(TEDDY, &client).unwrap();
    server.join().unwrap();
    assert_eq!(prims.objects.len(), 2);
    let seen = seen.lock().unwrap();
    let second: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    let user = second["messages"][1]["content"].as_str().unwrap();
    assert!(user.starts_with(TEDDY) && user.contains("Repair attempt 1"), "{user}");
}
