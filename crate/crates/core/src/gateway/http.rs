//! HTTP front-end over a shared [`Service`].
//!
//! Virtual time does not move on its own. [`HttpServer::start`] optionally
//! spawns a ticker that advances the clock by wall time times a scale
//! factor, for demos against a live service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{ApiRequest, ApiResponse, Method};
use crate::cloudsim::VirtualDuration;
use crate::service::Service;

pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for HttpServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpServer").field("addr", &self.addr).finish()
    }
}

/// Converts a raw HTTP exchange into an API request. Errors are already
/// formatted responses.
pub fn parse_request(method: &str, url: &str, body: &[u8]) -> Result<ApiRequest, ApiResponse> {
    let method: Method = method.parse().map_err(|_| ApiResponse::error(404, format!("unknown route {method} {url}")))?;
    let body = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(serde_json::from_slice::<Value>(body).map_err(|e| ApiResponse::error(400, format!("invalid JSON: {e}")))?)
    };
    Ok(ApiRequest { method, path: url.to_string(), body })
}

impl HttpServer {
    /// Binds `addr` (port 0 picks a free port) and serves requests on a
    /// background thread. With `time_scale = Some(s)` virtual time advances
    /// by `s` virtual seconds per wall second.
    pub fn start(service: Arc<Mutex<Service>>, addr: &str, time_scale: Option<f64>) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| std::io::Error::other(e.to_string()))?;
        let addr = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let srv = server.clone();
        let svc = service.clone();
        threads.push(std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = Vec::new();
                let resp = match req.as_reader().read_to_end(&mut body) {
                    Err(e) => ApiResponse::error(400, e),
                    Ok(_) => match parse_request(req.method().as_str(), req.url(), &body) {
                        Err(r) => r,
                        Ok(api) => svc.lock().unwrap_or_else(|p| p.into_inner()).handle(api),
                    },
                };
                let text = if resp.status == 204 { String::new() } else { resp.body.to_string() };
                let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
                let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(resp.status).with_header(header));
            }
        }));

        if let Some(scale) = time_scale.filter(|s| *s > 0.0) {
            let stop = stop.clone();
            threads.push(std::thread::spawn(move || {
                let start = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(50));
                    let virt = VirtualDuration::try_from_secs_f64(start.elapsed().as_secs_f64() * scale).unwrap_or_default();
                    let mut s = service.lock().unwrap_or_else(|p| p.into_inner());
                    let target = crate::cloudsim::VirtualTime::ZERO + virt;
                    if target > s.now() {
                        s.run_until(target);
                    }
                }
            }));
        }
        Ok(HttpServer { server, addr, stop, threads })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rules() {
        assert_eq!(parse_request("GET", "/coordinators", b"").unwrap().body, None);
        assert_eq!(parse_request("POST", "/coordinators", b"{bad").unwrap_err().status, 400);
        assert_eq!(parse_request("PATCH", "/coordinators", b"").unwrap_err().status, 404);
        assert!(parse_request("POST", "/x", b" {\"a\":1} ").unwrap().body.is_some());
    }
}
