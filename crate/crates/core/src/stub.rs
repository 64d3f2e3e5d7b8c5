//! Deterministic offline backends: a pure response synthesizer keyed on
//! request content, an in-process provider wrapping it, and a minimal
//! chat-completions HTTP server for endpoint-level tests.
//!
//! The synthesizer classifies each request by markers from the shipped
//! prompt templates and fabricates a reply of the right shape (verdict,
//! index list, probe question, probe answer, grade, or dialogue line).
//! Replies are a pure function of the request, so runs are reproducible
//! under any interleaving and resumption never changes content.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;

use crate::gateway::{ChatProvider, ChatRequest, GatewayError};

/// Stable 64-bit FNV-1a, used to derive all synthetic variation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Synthesizes a deterministic assistant reply for `prompt`.
pub fn synth_response(prompt: &str) -> String {
    let h = fnv1a(prompt.as_bytes());
    if prompt.contains("Evaluate the intention behind the following line") {
        if h.is_multiple_of(5) {
            format!("The line asserts a detail (marker {}) that conflicts with the stated background. YES", h % 1000)
        } else {
            format!("The line stays within the stated background (marker {}). NO", h % 1000)
        }
    } else if prompt.contains("CLEAR conflict or inconsistency") {
        if h.is_multiple_of(6) {
            // The cited index is raw judge output; it may point at the
            // other agent or out of range, which the caller filters.
            format!("The line reverses an earlier statement. [{}]", h % 8)
        } else {
            "No clear conflict with any earlier line. []".to_string()
        }
    } else if prompt.contains("generate a new fact-based multiple choice question") {
        let tag = h % 100_000;
        format!(
            "Question: Which detail (set {tag}) is part of your background?\n\
             A) Detail {a}\nB) Detail {b}\nC) Detail {c}\nD) Detail {d}\nE) Detail {e}\n\
             Answer: B) Detail {b}",
            tag = tag,
            a = (h >> 8) % 900 + 100,
            b = (h >> 16) % 900 + 100,
            c = (h >> 24) % 900 + 100,
            d = (h >> 32) % 900 + 100,
            e = (h >> 40) % 900 + 100,
        )
    } else if prompt.contains("answer the following multiple choice question") {
        // The generator always keys the reference to choice B, so a
        // four-in-five answer rate yields realistically imperfect grades.
        let choices = extract_choices(prompt);
        let pick = if h.is_multiple_of(5) { 0 } else { 1 };
        choices
            .get(pick)
            .or_else(|| choices.first())
            .cloned()
            .unwrap_or_else(|| "B) unknown".to_string())
    } else if prompt.contains("As part of grading a test") {
        if grade_matches(prompt) {
            "YES".to_string()
        } else {
            "NO".to_string()
        }
    } else {
        format!(
            "I keep coming back to the same thread we touched on earlier, and it still rings true for me (turn marker {}).",
            h % 10_000
        )
    }
}

fn extract_choices(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .map(str::trim)
        .filter(|line| {
            let mut chars = line.chars();
            matches!(
                (chars.next(), chars.next()),
                (Some('A'..='E'), Some(')'))
            )
        })
        .map(str::to_string)
        .collect()
}

/// Mirrors the grading template shape: compares the given answer between
/// the fixed marker phrases against the `Correct Answer:` line, matching
/// on leading choice letter or on normalized full text.
fn grade_matches(prompt: &str) -> bool {
    let given = prompt
        .split_once("determine whether the given answer ")
        .and_then(|(_, rest)| rest.split_once(" matches the following correct answer"))
        .map(|(given, _)| given.trim())
        .unwrap_or("");
    let correct = prompt
        .split_once("Correct Answer:")
        .map(|(_, rest)| rest.trim())
        .unwrap_or("");
    if given.is_empty() || correct.is_empty() {
        return false;
    }
    let norm = |s: &str| s.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect::<String>();
    if norm(given) == norm(correct) {
        return true;
    }
    let letter = |s: &str| s.chars().find(|c| c.is_ascii_alphabetic()).map(|c| c.to_ascii_uppercase());
    match (letter(given), letter(correct)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// In-process provider backed by [`synth_response`], with a call counter.
pub struct SynthProvider {
    model: String,
    calls: AtomicU64,
}

impl SynthProvider {
    pub fn new() -> Self {
        SynthProvider { model: "synth-stub".into(), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Default for SynthProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatProvider for SynthProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(synth_response(request.last_user_content()))
    }

    fn model(&self) -> &str {
        &self.model
    }
}

// --- HTTP stub server ----------------------------------------------------

#[derive(Deserialize)]
struct IncomingRequest {
    #[serde(default)]
    messages: Vec<IncomingMessage>,
}

#[derive(Deserialize)]
struct IncomingMessage {
    role: String,
    content: String,
}

/// A local chat-completions endpoint that serves [`synth_response`].
///
/// Handles concurrent keep-alive connections; optionally fails the first
/// N requests with a 500 to exercise retry paths.
pub struct StubServer {
    addr: String,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    requests_served: Arc<AtomicU64>,
}

impl StubServer {
    pub fn start() -> std::io::Result<StubServer> {
        Self::start_with_faults(0)
    }

    /// Starts the server with the first `fail_first` requests answered
    /// with HTTP 500.
    pub fn start_with_faults(fail_first: u64) -> std::io::Result<StubServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = format!("http://{}", listener.local_addr()?);
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests_served = Arc::new(AtomicU64::new(0));
        let faults_left = Arc::new(AtomicU64::new(fail_first));

        let accept_shutdown = Arc::clone(&shutdown);
        let accept_served = Arc::clone(&requests_served);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let served = Arc::clone(&accept_served);
                let faults = Arc::clone(&faults_left);
                let conn_shutdown = Arc::clone(&accept_shutdown);
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &served, &faults, &conn_shutdown);
                });
            }
        });

        Ok(StubServer { addr, shutdown, handle: Some(handle), requests_served })
    }

    /// Base URL, e.g. `http://127.0.0.1:41234`.
    pub fn url(&self) -> &str {
        &self.addr
    }

    pub fn requests_served(&self) -> u64 {
        self.requests_served.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        if let Some(hostport) = self.addr.strip_prefix("http://") {
            let _ = TcpStream::connect(hostport);
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    served: &AtomicU64,
    faults: &AtomicU64,
    shutdown: &AtomicBool,
) -> std::io::Result<()> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut stream = stream;
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(()); // peer closed
        }
        let mut content_length = 0usize;
        loop {
            let mut header = String::new();
            if reader.read_line(&mut header)? == 0 {
                return Ok(());
            }
            let header = header.trim_end();
            if header.is_empty() {
                break;
            }
            if let Some(value) = header.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;

        let fault = loop {
            let left = faults.load(Ordering::SeqCst);
            if left == 0 {
                break false;
            }
            if faults
                .compare_exchange(left, left - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                break true;
            }
        };

        let (status, payload) = if fault {
            ("500 Internal Server Error", r#"{"error":"injected fault"}"#.to_string())
        } else {
            let prompt = serde_json::from_slice::<IncomingRequest>(&body)
                .ok()
                .and_then(|req| {
                    req.messages
                        .into_iter()
                        .rev()
                        .find(|m| m.role == "user")
                        .map(|m| m.content)
                })
                .unwrap_or_default();
            let content = synth_response(&prompt);
            let completion = serde_json::json!({
                "id": "stub",
                "object": "chat.completion",
                "model": "synth-stub",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop"
                }]
            });
            ("200 OK", completion.to_string())
        };
        served.fetch_add(1, Ordering::SeqCst);

        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n{payload}",
            payload.len()
        );
        stream.write_all(response.as_bytes())?;
        stream.flush()?;
    }
}
