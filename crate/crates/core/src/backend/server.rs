use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use tracing::{debug, info};

use super::{wire, BackendError, ChatBackend};

/// Serves a [`ChatBackend`] on `POST .../chat/completions` using the
/// [`wire`] contract. Stops when dropped.
pub struct WireServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
    requests: Arc<AtomicUsize>,
}

struct Shared {
    backend: Arc<dyn ChatBackend>,
    api_key: Option<String>,
    requests: Arc<AtomicUsize>,
}

impl WireServer {
    pub fn start(
        addr: &str,
        backend: Arc<dyn ChatBackend>,
        api_key: Option<String>,
        threads: usize,
    ) -> Result<Self, BackendError> {
        let server = Arc::new(
            tiny_http::Server::http(addr).map_err(|e| BackendError::Config(format!("bind {addr}: {e}")))?,
        );
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| BackendError::Config("listener has no IP address".into()))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let shared = Arc::new(Shared {
            backend,
            api_key,
            requests: requests.clone(),
        });
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = server.clone();
                let shared = shared.clone();
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&shared, req);
                    }
                })
            })
            .collect();
        info!(%addr, "wire server listening");
        Ok(Self {
            server,
            addr,
            workers,
            requests,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for [`super::BackendConfig::endpoint_url`].
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Number of chat-completion requests received.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server is shut down from another thread or the
    /// process exits.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn respond(req: tiny_http::Request, status: u16, body: serde_json::Value) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    let resp = tiny_http::Response::from_data(body.to_string().into_bytes())
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = req.respond(resp) {
        debug!(error = %e, "client went away");
    }
}

fn handle(shared: &Shared, mut req: tiny_http::Request) {
    if *req.method() != tiny_http::Method::Post || !req.url().trim_end_matches('/').ends_with("/chat/completions") {
        return respond(req, 404, wire::error_body("not_found", "POST /v1/chat/completions"));
    }
    shared.requests.fetch_add(1, Ordering::SeqCst);
    if let Some(key) = &shared.api_key {
        let expected = format!("Bearer {key}");
        let ok = req
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == expected);
        if !ok {
            return respond(req, 401, wire::error_body("invalid_api_key", "invalid API key"));
        }
    }
    let mut body = Vec::new();
    if let Err(e) = req.as_reader().read_to_end(&mut body) {
        return respond(req, 400, wire::error_body("invalid_request_error", &e.to_string()));
    }
    let (chat, conv) = match wire::parse_request(&body) {
        Ok(v) => v,
        Err(e) => return respond(req, 400, wire::error_body("invalid_request_error", &e.to_string())),
    };
    match shared.backend.complete(&conv) {
        Ok(reply) => respond(req, 200, wire::build_response(&chat.model, &reply)),
        Err(e) => {
            let status = match e {
                BackendError::Unavailable { .. } => 503,
                BackendError::Auth { .. } => 401,
                _ => 400,
            };
            respond(req, status, wire::error_body("backend_error", &e.to_string()))
        }
    }
}
